#pragma once

#include "fusion/estimands.hpp"

namespace fusion {

struct EstimateReport {
  Vec estimate;    // plug-in + averaged influence-function correction
  Vec plug_in;     // fold-averaged plug-in alone
  Vec correction;  // mean influence-function value (the one-step shift)
  Mat covariance;  // estimated sampling covariance of `estimate`
  Vec std_error;
  Vec ci_lower, ci_upper;  // Wald, at the requested level
  double level = 0.95;
  Mat if_values;  // pooled out-of-fold influence values, one row per record seen
  Vec if_mean;    // their weighted column means
  int folds = 1;
  Vec fold_spread;  // max |fold estimate - average|, per component
  double clip_rate = 0.0;
  bool ridge_fallback = false;
  std::size_t n = 0;
  std::size_t skipped = 0;  // evaluation rows outside every term's support
};

// Cross-fitted one-step estimator: nuisances fit per fold on the complement,
// per-fold one-step estimates averaged, covariance from the pooled
// out-of-fold influence values. folds <= 1 disables cross-fitting.
EstimateReport one_step(const FusedDataset& data, const EstimandSpec& est,
                        const NuisanceOptions& opts, std::uint64_t seed = 1, double level = 0.95);

}  // namespace fusion
