#include "fusion/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fusion {

namespace {

// Target law per (a1, a2) arm: mean vector and covariance of (U1, U2, U3).
void arm_moments(int a1, int a2, Eigen::Vector3d& mu, Eigen::Matrix3d& sig) {
  mu << 0.0, (a1 == 0 ? 1.0 : 1.5), 0.0;
  if (a1 == 0 && a2 == 0) mu(2) = 10.0;
  if (a1 == 1 && a2 == 0) mu(2) = 20.0;
  if (a1 == 0 && a2 == 1) mu(2) = 20.0;
  if (a1 == 1 && a2 == 1) mu(2) = 40.0;
  sig << 1.0, 0.8, 0.5, 0.8, 2.0, 0.5, 0.5, 0.5, 1.0;
  if (a1 == 0 && a2 == 1) sig(2, 2) = 3.0;
  if (a1 == 1 && a2 == 1) sig << 1.0, 0.8, 0.6, 0.8, 2.0, 0.8, 0.6, 0.8, 4.0;
}

double outcome_intercept(int a1, int a2, int a3) {
  int t = a1 + a2 + a3;
  if (t == 0) return 5.0;
  if (t == 3) return 15.0;
  if (a3 == 0) return a1 + a2 == 1 ? 8.0 : 10.0;  // (1,0,0),(0,1,0) vs (1,1,0)
  if (t == 1) return 9.0;                          // (0,0,1)
  return a1 == 1 ? 10.0 : 12.0;                    // (1,0,1) vs (0,1,1)
}

// Conditional mean/sd of U3 given (U1, U2) under the arm's trivariate law.
struct U3Cond {
  double b1, b2, sd, mu3, mu1, mu2;
};
U3Cond target_u3(int a1, int a2) {
  Eigen::Vector3d mu;
  Eigen::Matrix3d sig;
  arm_moments(a1, a2, mu, sig);
  Eigen::Vector2d b = sig.topLeftCorner<2, 2>().ldlt().solve(sig.topRightCorner<2, 1>());
  double var = sig(2, 2) - b.dot(sig.topRightCorner<2, 1>());
  return {b(0), b(1), std::sqrt(var), mu(2), mu(0), mu(1)};
}

double outcome_mean(int a1, int a2, int a3, double u1, double u2, double u3) {
  Eigen::Vector3d mu;
  Eigen::Matrix3d sig;
  arm_moments(a1, a2, mu, sig);
  Eigen::Vector3d u(u1, u2, u3);
  return outcome_intercept(a1, a2, a3) + mu.dot(sig.ldlt().solve(u - mu));
}

bool contains(const std::vector<int>& v, int s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace

FusedDataset generate(const LongitudinalDGP& dgp, std::uint64_t seed) {
  FusedDataset out;
  out.spec.d = 2 * dgp.T - 1;
  out.spec.k = dgp.k;
  for (const auto& [j, srcs] : dgp.aligned) {
    out.spec.relevant.push_back(j);
    out.spec.fusion_sets[j] = srcs;
  }
  std::sort(out.spec.relevant.begin(), out.spec.relevant.end());
  out.columns = {{"u1"}, {"a1"}, {"u2"}, {"a2"}, {"u3"}, {"a3"}, {"y"}};

  std::size_t total = 0;
  for (int c : dgp.sizes) total += static_cast<std::size_t>(c);
  out.records.reserve(total);

  for (int s = 1; s <= dgp.k; ++s) {
    Rng rng(seed, 0xD00u + static_cast<std::uint64_t>(s));
    const int nobs = dgp.observed[s - 1];
    const bool al1 = contains(dgp.aligned.at(1), s);
    const bool al3 = contains(dgp.aligned.at(3), s);
    const bool al5 = contains(dgp.aligned.at(5), s);
    for (int i = 0; i < dgp.sizes[s - 1]; ++i) {
      double u1 = al1 ? rng.normal() : 3.0 + std::sqrt(2.0) * rng.normal();
      int a1 = rng.bernoulli(0.5) ? 1 : 0;
      double u2;
      if (al3)
        u2 = (a1 == 0 ? 1.0 : 1.5) + 0.8 * u1 + std::sqrt(1.36) * rng.normal();
      else
        u2 = (a1 == 0 ? 3.0 + 1.8 * u1 : 5.0 + 0.8 * u1) + std::sqrt(5.0) * rng.normal();
      int a2 = rng.bernoulli(0.5) ? 1 : 0;
      double u3;
      if (al5) {
        U3Cond c = target_u3(a1, a2);
        u3 = c.mu3 + c.b1 * (u1 - c.mu1) + c.b2 * (u2 - c.mu2) + c.sd * rng.normal();
      } else {
        double m, sd;
        if (a2 == 0) {
          m = (a1 == 0 ? 20.0 : 10.0) + 0.44 * u1 + 0.07 * u2;
          sd = std::sqrt(0.74);
        } else if (a1 == 0) {
          m = -10.0 + 0.71 * u1 + 0.12 * u2;
          sd = std::sqrt(2.34);
        } else {
          m = 10.0 + 0.41 * u1 + 0.24 * u2;
          sd = std::sqrt(3.56);
        }
        u3 = m + sd * rng.normal();
      }
      int a3 = rng.bernoulli(0.5) ? 1 : 0;
      double y = outcome_mean(a1, a2, a3, u1, u2, u3) + dgp.alpha * u3 * rng.student_t(3);

      ObservationRecord rec;
      rec.s = s;
      rec.z = {u1, double(a1), u2, double(a2), u3, double(a3), y};
      for (int j = nobs; j < 7; ++j) rec.z[j] = std::nullopt;
      out.records.push_back(std::move(rec));
    }
  }
  return out;
}

double dgp_truth(const LongitudinalDGP& dgp, std::uint64_t seed, std::size_t draws, double* mc_se) {
  Rng rng(seed, 0x7707u);
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    // common innovations across the two arms: each arm's marginal law is
    // unchanged, the variance of the difference collapses
    double n1 = rng.normal(), n2 = rng.normal(), n3 = rng.normal();
    double t = rng.student_t(3);
    double diff = 0.0;
    for (int arm = 1; arm >= 0; --arm) {
      double u1 = n1;
      double u2 = (arm == 0 ? 1.0 : 1.5) + 0.8 * u1 + std::sqrt(1.36) * n2;
      U3Cond c = target_u3(arm, arm);
      double u3 = c.mu3 + c.b1 * (u1 - c.mu1) + c.b2 * (u2 - c.mu2) + c.sd * n3;
      double y = outcome_mean(arm, arm, arm, u1, u2, u3) + dgp.alpha * u3 * t;
      diff += arm == 1 ? y : -y;
    }
    sum += diff;
    sum2 += diff * diff;
  }
  double m = sum / static_cast<double>(draws);
  if (mc_se) {
    double var = (sum2 / static_cast<double>(draws) - m * m) / static_cast<double>(draws - 1);
    *mc_se = std::sqrt(std::max(var, 0.0));
  }
  return m;
}

std::vector<Scenario> table1_scenarios() {
  std::vector<Scenario> out(3);
  out[0].name = "no_fusion";
  out[0].fusion_sets = {{1, {9}}, {3, {9}}, {5, {9}}, {7, {9}}};
  out[1].name = "partial";
  out[1].fusion_sets = {{1, {1, 3, 9}}, {3, {3, 9}}, {5, {5, 9}}, {7, {6, 9}}};
  out[2].name = "complete";
  out[2].fusion_sets = {{1, {1, 3, 9}}, {3, {3, 5, 7, 9}}, {5, {5, 6, 8, 9}}, {7, {6, 8, 9}}};
  return out;
}

const MetricCell& MetricTable::cell(const std::string& model, const std::string& scenario) const {
  for (const MetricCell& c : cells)
    if (c.model == model && c.scenario == scenario) return c;
  throw std::out_of_range("MetricTable::cell: no cell " + model + "/" + scenario);
}

std::string MetricTable::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "model,scenario,bias,var,cov_pct,reps_used,failures\n";
  for (const MetricCell& c : cells) {
    os << c.model << ',' << c.scenario << ',' << c.bias << ',';
    if (std::isfinite(c.var)) os << c.var;
    os << ',' << c.cov_pct << ',' << c.reps_used << ',' << c.failures << '\n';
  }
  return os.str();
}

std::string MetricTable::to_json() const {
  nlohmann::json j;
  j["truth"] = truth;
  j["truth_se"] = truth_se;
  j["reps"] = reps;
  j["seed"] = seed;
  j["valid"] = valid;
  j["cells"] = nlohmann::json::array();
  for (const MetricCell& c : cells) {
    nlohmann::json jc;
    jc["model"] = c.model;
    jc["scenario"] = c.scenario;
    jc["bias"] = c.bias;
    if (std::isfinite(c.var))
      jc["var"] = c.var;
    else
      jc["var"] = nullptr;
    jc["cov_pct"] = c.cov_pct;
    jc["reps_used"] = c.reps_used;
    jc["failures"] = c.failures;
    j["cells"].push_back(jc);
  }
  return j.dump(2);
}

NuisanceOptions monte_carlo_options() {
  NuisanceOptions o;
  o.folds = 1;
  o.kde_cap = 2048;
  o.ratio_draws = 2000;
  o.interactions = false;
  o.learner = "linear";
  return o;
}

MetricTable run_monte_carlo(const LongitudinalDGP& dgp, int reps, std::uint64_t seed, int threads,
                            const NuisanceOptions& opts) {
  if (reps < 1) throw std::invalid_argument("run_monte_carlo: reps must be positive");
  const std::vector<std::pair<std::string, LongitudinalModel>> models = {
      {"nonparametric", LongitudinalModel::Nonparametric},
      {"symmetric", LongitudinalModel::SymmetricError},
      {"linear", LongitudinalModel::LinearError}};
  const std::vector<Scenario> scens = table1_scenarios();
  const std::size_t ncell = models.size() * scens.size();

  MetricTable tab;
  tab.reps = reps;
  tab.seed = seed;
  tab.truth = dgp_truth(dgp, seed, 4000000, &tab.truth_se);

  std::vector<double> est(ncell * reps, 0.0), lo(ncell * reps, 0.0), hi(ncell * reps, 0.0);
  std::vector<char> ok(ncell * reps, 0);

  parallel_for(static_cast<std::size_t>(reps), resolve_threads(threads), [&](std::size_t r) {
    std::uint64_t rep_seed = seed ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(r) + 1));
    FusedDataset data = generate(dgp, rep_seed);
    for (std::size_t sc = 0; sc < scens.size(); ++sc) {
      data.spec.fusion_sets = scens[sc].fusion_sets;
      for (std::size_t mi = 0; mi < models.size(); ++mi) {
        std::size_t cell = mi * scens.size() + sc;
        EstimandSpec e = EstimandSpec::longitudinal(dgp.T, models[mi].second);
        e.error_scale = [](const std::vector<double>& u) {
          return u.size() >= 3 ? u[2] : 1.0;
        };
        try {
          EstimateReport rep = one_step(data, e, opts, rep_seed + 101 * cell);
          est[cell * reps + r] = rep.estimate(0);
          lo[cell * reps + r] = rep.ci_lower(0);
          hi[cell * reps + r] = rep.ci_upper(0);
          ok[cell * reps + r] = 1;
        } catch (const std::exception&) {
          ok[cell * reps + r] = 0;
        }
      }
    }
  });

  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    for (std::size_t sc = 0; sc < scens.size(); ++sc) {
      std::size_t cell = mi * scens.size() + sc;
      MetricCell c;
      c.model = models[mi].first;
      c.scenario = scens[sc].name;
      std::vector<double> vals;
      int covered = 0;
      for (int r = 0; r < reps; ++r) {
        if (!ok[cell * reps + r]) continue;
        double v = est[cell * reps + r];
        vals.push_back(v);
        if (lo[cell * reps + r] <= tab.truth && tab.truth <= hi[cell * reps + r]) ++covered;
      }
      c.reps_used = static_cast<int>(vals.size());
      c.failures = reps - c.reps_used;
      if (c.failures > reps / 20) tab.valid = false;
      if (vals.empty()) {
        c.bias = std::numeric_limits<double>::quiet_NaN();
        c.var = std::numeric_limits<double>::quiet_NaN();
        c.cov_pct = std::numeric_limits<double>::quiet_NaN();
        tab.valid = false;
      } else {
        c.bias = mean(vals) - tab.truth;
        c.var = vals.size() > 1 ? variance(vals) : std::numeric_limits<double>::quiet_NaN();
        c.cov_pct = 100.0 * covered / static_cast<double>(vals.size());
      }
      tab.cells.push_back(std::move(c));
    }
  }
  return tab;
}

// --- finite-support fixtures -------------------------------------------

std::vector<std::string> toy_catalog() { return {"nested", "itt", "ope", "qte", "dag"}; }

namespace {

std::vector<std::vector<double>> atoms(std::initializer_list<double> v) {
  std::vector<std::vector<double>> out;
  for (double x : v) out.push_back({x});
  return out;
}

DiscreteModel toy_nested() {
  DiscreteModel m;
  m.spec.d = 2;
  m.spec.k = 2;
  m.spec.relevant = {1, 2};
  m.spec.fusion_sets = {{1, {1, 2}}, {2, {1}}};
  m.support = {atoms({0, 1, 2}), atoms({0, 1})};
  m.s_probs = {0.6, 0.4};
  m.set_aligned_conditional(1, {0.5, 0.3, 0.2});
  m.set_aligned_conditional(2, {0.7, 0.3, 0.4, 0.6, 0.2, 0.8});
  m.set_default_conditional(2, {0.5, 0.5, 0.5, 0.5, 0.9, 0.1});
  m.finalize();
  return m;
}

DiscreteModel toy_itt() {
  DiscreteModel m;
  m.spec.d = 4;
  m.spec.k = 3;
  m.spec.relevant = {1, 3, 4};
  m.spec.fusion_sets = {{1, {1, 2, 3}}, {3, {2, 3}}, {4, {3}}};
  m.support = {atoms({0, 1}), atoms({0, 1}), atoms({0, 1}), atoms({0, 1})};
  m.s_probs = {0.3, 0.3, 0.4};
  m.set_aligned_conditional(1, {0.6, 0.4});
  m.set_conditional(2, {1}, {0.5, 0.5, 0.5, 0.5});
  m.set_conditional(2, {2}, {0.6, 0.4, 0.4, 0.6});
  m.set_conditional(2, {3}, {0.45, 0.55, 0.55, 0.45});
  m.set_aligned_conditional(3, {0.7, 0.3, 0.5, 0.5, 0.4, 0.6, 0.3, 0.7});
  m.set_default_conditional(3, {0.8, 0.2, 0.6, 0.4, 0.5, 0.5, 0.1, 0.9});
  m.set_aligned_conditional(4, {0.8, 0.2, 0.7, 0.3, 0.6, 0.4, 0.5, 0.5,
                                0.55, 0.45, 0.45, 0.55, 0.35, 0.65, 0.25, 0.75});
  m.set_default_conditional(4, {0.7, 0.3, 0.7, 0.3, 0.5, 0.5, 0.5, 0.5,
                                0.4, 0.6, 0.4, 0.6, 0.3, 0.7, 0.3, 0.7});
  m.finalize();
  return m;
}

DiscreteModel toy_ope() {
  DiscreteModel m;
  m.spec.d = 3;
  m.spec.k = 2;
  m.spec.relevant = {1, 3};
  m.spec.fusion_sets = {{1, {1, 2}}, {3, {2}}};
  m.support = {atoms({0, 1}), atoms({0, 1}), atoms({0, 1, 2})};
  m.s_probs = {0.45, 0.55};
  m.set_aligned_conditional(1, {0.55, 0.45});
  // one logging mechanism shared by every source
  m.set_conditional(2, {1, 2}, {0.65, 0.35, 0.4, 0.6});
  m.set_aligned_conditional(3, {0.5, 0.3, 0.2, 0.2, 0.5, 0.3, 0.4, 0.4, 0.2, 0.1, 0.4, 0.5});
  m.set_default_conditional(3, {0.3, 0.3, 0.4, 0.3, 0.4, 0.3, 0.25, 0.5, 0.25, 0.2, 0.2, 0.6});
  m.finalize();
  return m;
}

DiscreteModel toy_qte() {
  DiscreteModel m;
  m.spec.d = 3;
  m.spec.k = 2;
  m.spec.relevant = {1, 3};
  m.spec.fusion_sets = {{1, {1, 2}}, {3, {2}}};
  m.support = {atoms({0, 1}), atoms({0, 1}), atoms({0, 1, 2, 3, 4})};
  m.s_probs = {0.5, 0.5};
  m.set_aligned_conditional(1, {0.5, 0.5});
  m.set_conditional(2, {1}, {0.5, 0.5, 0.5, 0.5});
  m.set_conditional(2, {2}, {0.6, 0.4, 0.3, 0.7});
  m.set_aligned_conditional(3, {0.30, 0.25, 0.20, 0.15, 0.10,   // z1=0, z2=0
                                0.10, 0.15, 0.20, 0.25, 0.30,   // z1=0, z2=1
                                0.25, 0.25, 0.20, 0.20, 0.10,   // z1=1, z2=0
                                0.05, 0.20, 0.25, 0.25, 0.25}); // z1=1, z2=1
  m.set_default_conditional(3, {0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2,
                                0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2});
  m.finalize();
  return m;
}

DiscreteModel toy_dag() {
  DiscreteModel m;
  m.spec.d = 3;
  m.spec.k = 2;
  m.spec.relevant = {1, 2, 3};
  m.spec.fusion_sets = {{1, {1, 2}}, {2, {1, 2}}, {3, {1, 2}}};
  m.spec.model_class[3] = ModelClass::dag_parents({2});
  m.support = {atoms({0, 1}), atoms({0, 1, 2}), atoms({0, 1})};
  m.s_probs = {0.7, 0.3};
  m.set_aligned_conditional(1, {0.55, 0.45});
  m.set_aligned_conditional(2, {0.5, 0.3, 0.2, 0.2, 0.3, 0.5});
  // third coordinate depends on its parent z2 only, matching the class
  m.set_aligned_conditional(3, {0.7, 0.3, 0.5, 0.5, 0.3, 0.7,
                                0.7, 0.3, 0.5, 0.5, 0.3, 0.7});
  m.finalize();
  return m;
}

}  // namespace

DiscreteModel make_discrete_toy(const std::string& id) {
  if (id == "nested") return toy_nested();
  if (id == "itt") return toy_itt();
  if (id == "ope") return toy_ope();
  if (id == "qte") return toy_qte();
  if (id == "dag") return toy_dag();
  throw std::invalid_argument("make_discrete_toy: unknown id " + id);
}

EstimandSpec toy_estimand(const std::string& id) {
  if (id == "nested" || id == "dag") return EstimandSpec::mean();
  if (id == "itt") return EstimandSpec::treatment_effect();
  if (id == "ope")
    return EstimandSpec::policy_value([](double a, double x) {
      double p1 = x > 0.5 ? 0.8 : 0.2;
      return a > 0.5 ? p1 : 1.0 - p1;
    });
  if (id == "qte") return EstimandSpec::quantile_contrast(0.45);
  throw std::invalid_argument("toy_estimand: unknown id " + id);
}

}  // namespace fusion
