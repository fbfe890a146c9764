#pragma once

#include "fusion/discrete.hpp"
#include "fusion/engine.hpp"
#include "fusion/nuisance.hpp"

namespace fusion {

// Final-stage model used by the longitudinal effect estimator.
enum class LongitudinalModel {
  Nonparametric,   // no restriction on the outcome law
  SymmetricError,  // outcome symmetric about its conditional mean
  LinearError,     // linear conditional mean with a known error shape
};

// A target-distribution functional together with enough structure to compute
// it, its initial gradient, and its observed-data gradient.
struct EstimandSpec {
  enum class Kind {
    Mean,                   // E[Z_d]
    LongitudinalEffect,     // sequential treatment-arm contrast over T stages
    TreatmentEffect,        // randomized contrast with an intermediate outcome
    TreatmentEffectRatio,   // the same contrast scaled by its short-term analogue
    PolicyValue,            // value of a supplied decision rule
    RootFinding,            // parameter solving a nested moment equation
    QuantileContrast,       // between-arm quantile difference
    LogisticProjection,     // weighted logistic working-model coefficients
  };
  Kind kind = Kind::Mean;

  // LongitudinalEffect
  int stages = 1;
  LongitudinalModel model = LongitudinalModel::Nonparametric;

  // PolicyValue: policy(action, covariate) = probability of the action.
  std::function<double(double, double)> policy;

  // RootFinding: moment(z, gamma) of dimension `dim`.
  int dim = 1;
  std::function<Vec(const std::vector<double>&, const Vec&)> moment;

  // QuantileContrast
  double tau = 0.5;

  // LinearError: multiplier of the error scale as a function of the
  // measurement history (u_1..u_{T-1}); constant when absent.
  std::function<double(const std::vector<double>&)> error_scale;

  // LogisticProjection: optional observation weight (default 1).
  std::function<double(const std::vector<double>&)> weight_fn;

  static EstimandSpec mean() { return {}; }
  static EstimandSpec longitudinal(int T, LongitudinalModel m = LongitudinalModel::Nonparametric) {
    EstimandSpec e;
    e.kind = Kind::LongitudinalEffect;
    e.stages = T;
    e.model = m;
    return e;
  }
  static EstimandSpec treatment_effect() {
    EstimandSpec e;
    e.kind = Kind::TreatmentEffect;
    return e;
  }
  static EstimandSpec treatment_effect_ratio() {
    EstimandSpec e;
    e.kind = Kind::TreatmentEffectRatio;
    return e;
  }
  static EstimandSpec policy_value(std::function<double(double, double)> pi) {
    EstimandSpec e;
    e.kind = Kind::PolicyValue;
    e.policy = std::move(pi);
    return e;
  }
  static EstimandSpec root_finding(int b, std::function<Vec(const std::vector<double>&, const Vec&)> m) {
    EstimandSpec e;
    e.kind = Kind::RootFinding;
    e.dim = b;
    e.moment = std::move(m);
    return e;
  }
  static EstimandSpec quantile_contrast(double tau) {
    EstimandSpec e;
    e.kind = Kind::QuantileContrast;
    e.tau = tau;
    return e;
  }
  static EstimandSpec logistic_projection(std::function<double(const std::vector<double>&)> w = nullptr) {
    EstimandSpec e;
    e.kind = Kind::LogisticProjection;
    e.weight_fn = std::move(w);
    return e;
  }
};

int estimand_dim(const EstimandSpec& est);

// Value of the functional evaluated on the induced target distribution
// (through the target conditional tables).
Vec psi_target(const EstimandSpec& est, const DiscreteModel& m);

// The same value computed through the identifying observed-data expression
// (source-stratum conditionals and fusion-set pooling). Agrees with
// psi_target under sufficient alignment; computed by a separate path on
// purpose.
Vec phi_observed(const EstimandSpec& est, const DiscreteModel& m);

// Initial (target-distribution) gradient, one ZTable per component.
std::vector<ZTable> dq_gradient(const EstimandSpec& est, const DiscreteModel& m);

// Closed-form observed-data gradient, one XTable per component.
std::vector<XTable> observed_gradient(const EstimandSpec& est, const DiscreteModel& m);

// --- data path ---------------------------------------------------------

// True when every coordinate takes few enough distinct values to enumerate.
bool all_discrete(const FusedDataset& data, const std::vector<std::size_t>& rows);

// Weighted empirical finite model built from the rows, with conditionals at
// relevant coordinates pooled over the fusion set so alignment holds by
// construction.
DiscreteModel empirical_model(const FusedDataset& data, const std::vector<std::size_t>& rows);

struct FittedEstimand {
  Vec phi;  // plug-in at the fitted nuisances
  std::function<Vec(const ObservationRecord&)> influence;
  double clip_rate = 0.0;       // density-ratio clipping frequency
  bool ridge_fallback = false;  // a linear fit needed the ridge fallback
};

// Fits every nuisance on the listed training rows and returns the plug-in
// value plus an influence-function evaluator (usable on held-out records).
FittedEstimand fit_estimand(const FusedDataset& data, const std::vector<std::size_t>& train,
                            const EstimandSpec& est, const NuisanceOptions& opts,
                            std::uint64_t seed = 1);

}  // namespace fusion
