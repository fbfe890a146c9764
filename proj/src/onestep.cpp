#include "fusion/onestep.hpp"

#include <cmath>
#include <stdexcept>

namespace fusion {

EstimateReport one_step(const FusedDataset& data, const EstimandSpec& est,
                        const NuisanceOptions& opts, std::uint64_t seed, double level) {
  const int b = estimand_dim(est);
  const std::size_t n = data.records.size();
  if (n == 0) throw std::invalid_argument("one_step: empty dataset");

  int folds = opts.folds > 1 ? opts.folds : 1;
  std::vector<int> fold_of = folds > 1 ? assign_folds(data, folds) : std::vector<int>(n, 0);

  std::vector<Vec> fold_est;
  Vec plug = Vec::Zero(b), corr = Vec::Zero(b);
  std::vector<Vec> if_values;  // out-of-fold influence values, pooled
  std::vector<double> if_w;
  if_values.reserve(n);
  double clip = 0.0;
  bool ridge = false;

  for (int f = 0; f < folds; ++f) {
    std::vector<std::size_t> train, eval;
    for (std::size_t i = 0; i < n; ++i) {
      if (folds > 1 && fold_of[i] == f)
        eval.push_back(i);
      else
        train.push_back(i);
    }
    if (folds == 1) eval = train;
    FittedEstimand fit = fit_estimand(data, train, est, opts, seed + static_cast<std::uint64_t>(f));
    Vec mean_if = Vec::Zero(b);
    double tw = 0.0;
    for (std::size_t i : eval) {
      Vec v = fit.influence(data.records[i]);
      if (!v.allFinite())
        throw std::runtime_error("one_step: non-finite influence value at record " + std::to_string(i));
      mean_if += data.records[i].w * v;
      tw += data.records[i].w;
      if_values.push_back(v);
      if_w.push_back(data.records[i].w);
    }
    if (tw <= 0.0) throw std::runtime_error("one_step: a fold has no evaluation weight");
    mean_if /= tw;
    fold_est.push_back(fit.phi + mean_if);
    plug += fit.phi;
    corr += mean_if;
    clip += fit.clip_rate;
    ridge = ridge || fit.ridge_fallback;
  }

  EstimateReport rep;
  rep.folds = folds;
  rep.n = n;
  rep.level = level;
  rep.clip_rate = clip / folds;
  rep.ridge_fallback = ridge;
  rep.plug_in = plug / folds;
  rep.correction = corr / folds;
  rep.estimate = Vec::Zero(b);
  for (const Vec& e : fold_est) rep.estimate += e;
  rep.estimate /= static_cast<double>(folds);
  rep.fold_spread = Vec::Zero(b);
  for (const Vec& e : fold_est)
    rep.fold_spread = rep.fold_spread.cwiseMax((e - rep.estimate).cwiseAbs());

  // covariance of the weighted influence average
  Vec mean_v = Vec::Zero(b);
  double tw = 0.0, tw2 = 0.0;
  for (std::size_t i = 0; i < if_values.size(); ++i) {
    mean_v += if_w[i] * if_values[i];
    tw += if_w[i];
  }
  mean_v /= tw;
  rep.if_values = Mat(static_cast<long>(if_values.size()), b);
  for (std::size_t i = 0; i < if_values.size(); ++i) rep.if_values.row(static_cast<long>(i)) = if_values[i].transpose();
  rep.if_mean = mean_v;
  rep.covariance = Mat::Zero(b, b);
  for (std::size_t i = 0; i < if_values.size(); ++i) {
    Vec c = if_values[i] - mean_v;
    rep.covariance += if_w[i] * if_w[i] * c * c.transpose();
    tw2 += if_w[i] * if_w[i];
  }
  (void)tw2;
  rep.covariance /= tw * tw;

  rep.std_error = rep.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  double zq = normal_quantile(0.5 + level / 2.0);
  rep.ci_lower = rep.estimate - zq * rep.std_error;
  rep.ci_upper = rep.estimate + zq * rep.std_error;
  return rep;
}

}  // namespace fusion
