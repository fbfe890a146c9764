#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fusion/onestep.hpp"
#include "fusion/simulate.hpp"

using namespace fusion;

namespace {

FusedDataset scalar_source(const std::vector<double>& values, const std::vector<double>& weights) {
  FusedDataset d;
  d.spec.d = 1;
  d.spec.k = 1;
  d.spec.relevant = {1};
  d.spec.fusion_sets = {{1, {1}}};
  for (std::size_t i = 0; i < values.size(); ++i) {
    ObservationRecord r;
    r.z = {values[i]};
    r.w = weights.empty() ? 1.0 : weights[i];
    d.records.push_back(r);
  }
  return d;
}

FusedDataset sample_from(const DiscreteModel& m, int n, std::uint64_t seed) {
  FusedDataset d;
  d.spec = m.spec;
  std::vector<double> cum;
  cum.reserve(std::size_t(m.n_configs()) * m.k());
  double acc = 0.0;
  for (long zi = 0; zi < m.n_configs(); ++zi)
    for (int s = 1; s <= m.k(); ++s) {
      acc += m.joint(zi, s);
      cum.push_back(acc);
    }
  Rng rng(seed, 0xABC);
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform() * acc;
    std::size_t lo = std::lower_bound(cum.begin(), cum.end(), u) - cum.begin();
    long zi = long(lo) / m.k();
    int s = int(lo % m.k()) + 1;
    ObservationRecord r;
    for (double v : m.values(zi, m.d())) r.z.push_back(v);
    r.s = s;
    d.records.push_back(r);
  }
  return d;
}

}  // namespace

TEST_CASE("single-source mean equals the weighted sample mean exactly") {
  std::vector<double> v = {1.5, -2.0, 7.25, 3.0, 0.5};
  std::vector<double> w = {1.0, 2.0, 0.5, 1.5, 3.0};
  NuisanceOptions opts;
  opts.folds = 1;
  EstimateReport r = one_step(scalar_source(v, w), EstimandSpec::mean(), opts);
  double sw = 0.0, sx = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    sx += w[i] * v[i];
    sw += w[i];
  }
  CHECK(r.estimate[0] == doctest::Approx(sx / sw).epsilon(1e-14));
  CHECK(r.n == v.size());
  CHECK(r.estimate[0] == doctest::Approx(r.plug_in[0] + r.correction[0]).epsilon(1e-14));
}

TEST_CASE("cross-fitting keeps the exact mean on balanced unweighted folds") {
  std::vector<double> v;
  Rng rng(3, 3);
  for (int i = 0; i < 40; ++i) v.push_back(rng.normal() * 2.0 + 1.0);
  NuisanceOptions opts;
  opts.folds = 2;
  EstimateReport r = one_step(scalar_source(v, {}), EstimandSpec::mean(), opts);
  CHECK(r.folds == 2);
  CHECK(r.estimate[0] == doctest::Approx(mean(v)).epsilon(1e-12));
  CHECK(r.fold_spread[0] >= 0.0);
}

TEST_CASE("integer weights replicate duplicated rows") {
  NuisanceOptions opts;
  opts.folds = 1;
  EstimateReport a =
      one_step(scalar_source({1.0, 2.0, 5.0}, {1.0, 1.0, 2.0}), EstimandSpec::mean(), opts);
  EstimateReport b =
      one_step(scalar_source({1.0, 2.0, 5.0, 5.0}, {}), EstimandSpec::mean(), opts);
  CHECK(a.estimate[0] == doctest::Approx(b.estimate[0]).epsilon(1e-14));
}

TEST_CASE("confidence intervals use the exact normal quantile") {
  CHECK(normal_quantile(0.975) == doctest::Approx(1.959963984540054).epsilon(1e-12));
  CHECK(normal_quantile(0.95) == doctest::Approx(1.6448536269514722).epsilon(1e-12));
  std::vector<double> v;
  Rng rng(9, 0);
  for (int i = 0; i < 200; ++i) v.push_back(rng.normal());
  NuisanceOptions opts;
  opts.folds = 1;
  EstimateReport r = one_step(scalar_source(v, {}), EstimandSpec::mean(), opts, 1, 0.95);
  CHECK(r.ci_upper[0] - r.estimate[0] ==
        doctest::Approx(1.959963984540054 * r.std_error[0]).epsilon(1e-10));
  CHECK(r.estimate[0] - r.ci_lower[0] ==
        doctest::Approx(1.959963984540054 * r.std_error[0]).epsilon(1e-10));
  EstimateReport r90 = one_step(scalar_source(v, {}), EstimandSpec::mean(), opts, 1, 0.90);
  CHECK(r90.ci_upper[0] - r90.estimate[0] ==
        doctest::Approx(1.6448536269514722 * r90.std_error[0]).epsilon(1e-10));
  // standard error of a sample mean
  CHECK(r.std_error[0] == doctest::Approx(std::sqrt(variance(v) / v.size())).epsilon(0.02));
}

TEST_CASE("finite-support data: influence values average to zero in sample") {
  DiscreteModel m = make_discrete_toy("nested");
  FusedDataset data = sample_from(m, 3000, 21);
  NuisanceOptions opts;
  opts.folds = 1;
  EstimateReport r = one_step(data, toy_estimand("nested"), opts, 21);
  CHECK(std::abs(r.if_mean[0]) < 1e-10);
  CHECK(r.clip_rate == 0.0);
  double truth = psi_target(toy_estimand("nested"), m)[0];
  CHECK(r.estimate[0] == doctest::Approx(truth).epsilon(0.15));
  CHECK(std::abs(r.estimate[0] - truth) < 5.0 * r.std_error[0]);
  REQUIRE(r.if_values.rows() > 0);
  CHECK(std::size_t(r.if_values.rows()) + r.skipped == data.records.size());
}

TEST_CASE("finite-support data: cross-fitting matches the no-fold path closely") {
  DiscreteModel m = make_discrete_toy("itt");
  FusedDataset data = sample_from(m, 4000, 33);
  NuisanceOptions opts1, opts2;
  opts1.folds = 1;
  opts2.folds = 2;
  EstimateReport a = one_step(data, toy_estimand("itt"), opts1, 33);
  EstimateReport b = one_step(data, toy_estimand("itt"), opts2, 33);
  CHECK(b.folds == 2);
  CHECK(a.estimate[0] == doctest::Approx(b.estimate[0]).epsilon(0.2));
  CHECK(std::abs(a.estimate[0] - b.estimate[0]) < 4.0 * a.std_error[0]);
  CHECK(b.fold_spread[0] < 10.0 * a.std_error[0]);
}

TEST_CASE("estimates concentrate around the toy truth across replications") {
  DiscreteModel m = make_discrete_toy("ope");
  EstimandSpec est = toy_estimand("ope");
  double truth = psi_target(est, m)[0];
  NuisanceOptions opts;
  opts.folds = 1;
  int n = 800, reps = 30, covered = 0;
  std::vector<double> errs;
  for (int rep = 0; rep < reps; ++rep) {
    FusedDataset data = sample_from(m, n, 100 + rep);
    EstimateReport r = one_step(data, est, opts, 100 + rep);
    errs.push_back((r.estimate[0] - truth) * std::sqrt(double(n)));
    if (truth >= r.ci_lower[0] && truth <= r.ci_upper[0]) ++covered;
  }
  // root-n-scaled errors stay centered, and the intervals mostly cover
  CHECK(std::abs(mean(errs)) < 3.0 * std::sqrt(variance(errs) / reps));
  CHECK(covered >= reps * 8 / 10);
}
