#pragma once

#include <map>
#include <memory>

#include "fusion/data.hpp"
#include "fusion/learners.hpp"

namespace fusion {

struct NuisanceOptions {
  int folds = 2;            // cross-fitting folds (1 = none)
  double clip_c = 50.0;     // density-ratio clip: values forced into [1/c, c]
  double trim_eps = 0.01;   // propensity trim
  std::size_t kde_cap = 1024;
  std::size_t ratio_draws = 5000;  // target-marginal sample floor for λ
  bool interactions = true;        // linear-learner basis
  std::string learner = "linear";  // "linear" | "kernel" | "ensemble"
};

std::unique_ptr<Regressor> make_learner(const NuisanceOptions& opts);

// Density-ratio estimate numerator/denominator via product-kernel KDEs,
// stratified on discrete columns (a column is treated as discrete when it
// takes few distinct values). Evaluations are clipped into [1/c, c] and
// clips are counted.
class DensityRatio {
 public:
  DensityRatio() = default;
  void fit(const Mat& num, const Vec& num_w, const Mat& den, const Vec& den_w, double clip_c,
           std::size_t kde_cap);
  double eval(const Vec& x) const;
  double clip_rate() const {
    return total_ == 0 ? 0.0 : static_cast<double>(clipped_) / static_cast<double>(total_);
  }
  void reset_counters() const { clipped_ = 0; total_ = 0; }
  double clip_c() const { return clip_c_; }

 private:
  struct Stratum {
    double num_mass = 0.0, den_mass = 0.0;
    std::shared_ptr<Kde> num_kde, den_kde;  // over continuous columns, may be null
  };
  std::vector<int> discrete_cols_, continuous_cols_;
  std::map<std::vector<double>, Stratum> strata_;
  double clip_c_ = 50.0;
  bool identity_ = false;  // λ₀ ≡ 1 (no conditioning columns)
  mutable long clipped_ = 0, total_ = 0;
};

// Everything data-dependent that the gradient formulas consume.
struct NuisanceFit {
  // E[Z_j | Z̄_{j-1}] fit on rows pooled over the fusion set at j.
  std::map<int, std::shared_ptr<Regressor>> cond_means;
  // λ_{j-1} per relevant j (identity at j = 1).
  std::map<int, std::shared_ptr<DensityRatio>> lambda;
  std::map<int, double> source_probs;  // P(S ∈ 𝒮_j)
  std::vector<int> fold_of;            // per-record fold id (empty without cross-fitting)
  double clip_c = 50.0;
  double trim_eps = 0.01;
  bool ridge_fallback = false;  // any component fit needed the ridge fallback
};

// Weighted regression of coordinate `target_j` on the listed conditioning
// coordinates, restricted to rows pooled over the fusion set at `pool_j`.
std::shared_ptr<Regressor> fit_conditional_mean(const FusedDataset& data, int target_j,
                                                const std::vector<int>& conditioning, int pool_j,
                                                const NuisanceOptions& opts);

// λ_{j-1}: ratio of the target marginal of Z̄_{j-1} (materialized by
// sequential simulation from the fitted aligned conditionals, sample size
// max(ratio_draws, n)) over the pooled-𝒮_j marginal.
std::shared_ptr<DensityRatio> fit_density_ratio(const FusedDataset& data, int j,
                                                const NuisanceOptions& opts, std::uint64_t seed);

// One shared conditional fit per (j, 𝒮_j), density ratios and source
// probabilities for every relevant j.
NuisanceFit fit_all(const FusedDataset& data, const NuisanceOptions& opts, std::uint64_t seed = 1);

// Deterministic fold assignment (round-robin within source so every fold
// sees every source).
std::vector<int> assign_folds(const FusedDataset& data, int folds);

// Utility: rows of the pooled sub-dataset as a design matrix of coordinates
// `cols` plus the weight vector; rows with any needed slot missing are
// skipped. Returns kept record indices.
std::vector<std::size_t> design_matrix(const FusedDataset& data, const std::vector<std::size_t>& rows,
                                       const std::vector<int>& cols, Mat& X, Vec& w);

}  // namespace fusion
