#pragma once

#include "fusion/onestep.hpp"

namespace fusion {

// Nine-source longitudinal generator with four stages: measurements
// U_1..U_4 (the last being the outcome) interleaved with Bernoulli(0.5)
// treatments. Aligned sources draw each measurement from the target
// conditional law; the others use shifted laws, and later columns are
// masked per source.
struct LongitudinalDGP {
  int T = 4;
  int k = 9;
  std::vector<int> sizes = {2000, 400, 2000, 400, 2000, 4000, 2000, 4000, 2000};
  // number of leading coordinates observed per source
  std::vector<int> observed = {1, 1, 3, 3, 5, 7, 5, 7, 7};
  // sources whose conditional law at each measurement coordinate matches the
  // target (the generator's ground truth, independent of any analysis spec)
  std::map<int, std::vector<int>> aligned = {
      {1, {1, 3, 9}}, {3, {3, 5, 7, 9}}, {5, {5, 6, 8, 9}}, {7, {6, 8, 9}}};
  double alpha = 0.1;  // error scale multiplier (times U_3)
};

// Deterministic given seed. The dataset's spec carries the generator's
// aligned sets; Monte Carlo scenarios override the fusion sets before
// estimation.
FusedDataset generate(const LongitudinalDGP& dgp, std::uint64_t seed);

// Always-treat minus never-treat mean outcome under the target law,
// by counterfactual simulation (`draws` per arm).
double dgp_truth(const LongitudinalDGP& dgp, std::uint64_t seed, std::size_t draws,
                 double* mc_se = nullptr);

// The three published fusion scenarios, in presentation order.
struct Scenario {
  std::string name;
  std::map<int, std::vector<int>> fusion_sets;
};
std::vector<Scenario> table1_scenarios();

struct MetricCell {
  std::string model, scenario;
  double bias = 0.0;
  double var = 0.0;      // NaN when undefined (reps < 2)
  double cov_pct = 0.0;  // CI coverage of the truth, percent
  int reps_used = 0;
  int failures = 0;
};

struct MetricTable {
  std::vector<MetricCell> cells;
  double truth = 0.0, truth_se = 0.0;
  int reps = 0;
  std::uint64_t seed = 0;
  bool valid = true;  // false when any cell exceeds 5% failures

  const MetricCell& cell(const std::string& model, const std::string& scenario) const;
  std::string to_csv() const;
  std::string to_json() const;
};

// Full grid: three models x three scenarios, one dataset per replication
// shared across cells. Per-replication RNG streams are derived from
// (seed, rep), so the table is identical for any thread count.
MetricTable run_monte_carlo(const LongitudinalDGP& dgp, int reps, std::uint64_t seed, int threads,
                            const NuisanceOptions& opts);

// Options tuned for the desk-scale Monte Carlo run.
NuisanceOptions monte_carlo_options();

// Finite-support fixtures exercising the gradient machinery end to end.
std::vector<std::string> toy_catalog();  // {"nested","itt","ope","qte","dag"}
DiscreteModel make_discrete_toy(const std::string& id);
// The estimand each toy is built for.
EstimandSpec toy_estimand(const std::string& id);

}  // namespace fusion
