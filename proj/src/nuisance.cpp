#include "fusion/nuisance.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace fusion {

namespace {

constexpr int kMaxDiscreteLevels = 12;

std::vector<double> distinct_levels(const std::vector<double>& v) {
  std::set<double> s(v.begin(), v.end());
  if (static_cast<int>(s.size()) > kMaxDiscreteLevels) return {};
  return {s.begin(), s.end()};
}

}  // namespace

std::unique_ptr<Regressor> make_learner(const NuisanceOptions& opts) {
  if (opts.learner == "kernel") return std::make_unique<KernelRegression>(opts.kde_cap);
  if (opts.learner == "ensemble") return std::make_unique<EnsembleStack>(default_library());
  Basis b;
  b.interactions = opts.interactions;
  return std::make_unique<LinearModel>(b);
}

std::vector<std::size_t> design_matrix(const FusedDataset& data, const std::vector<std::size_t>& rows,
                                       const std::vector<int>& cols, Mat& X, Vec& w) {
  std::vector<std::size_t> kept;
  kept.reserve(rows.size());
  for (std::size_t r : rows) {
    const auto& rec = data.records[r];
    bool ok = true;
    for (int c : cols)
      if (!rec.z[c - 1].has_value()) {
        ok = false;
        break;
      }
    if (ok) kept.push_back(r);
  }
  X.resize(static_cast<long>(kept.size()), static_cast<long>(cols.size()));
  w.resize(static_cast<long>(kept.size()));
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const auto& rec = data.records[kept[i]];
    for (std::size_t c = 0; c < cols.size(); ++c) X(static_cast<long>(i), static_cast<long>(c)) = *rec.z[cols[c] - 1];
    w[static_cast<long>(i)] = rec.w;
  }
  return kept;
}

void DensityRatio::fit(const Mat& num, const Vec& num_w, const Mat& den, const Vec& den_w,
                       double clip_c, std::size_t kde_cap) {
  clip_c_ = clip_c;
  strata_.clear();
  discrete_cols_.clear();
  continuous_cols_.clear();
  if (num.cols() == 0) {
    identity_ = true;
    return;
  }
  identity_ = false;
  for (int c = 0; c < den.cols(); ++c) {
    std::set<double> lev;
    for (long r = 0; r < den.rows(); ++r) lev.insert(den(r, c));
    if (static_cast<int>(lev.size()) <= kMaxDiscreteLevels)
      discrete_cols_.push_back(c);
    else
      continuous_cols_.push_back(c);
  }
  auto key_of = [&](const Mat& m, long r) {
    std::vector<double> key(discrete_cols_.size());
    for (std::size_t i = 0; i < discrete_cols_.size(); ++i) key[i] = m(r, discrete_cols_[i]);
    return key;
  };
  struct Rows {
    std::vector<long> num_rows, den_rows;
  };
  std::map<std::vector<double>, Rows> groups;
  double num_total = 0.0, den_total = 0.0;
  for (long r = 0; r < num.rows(); ++r) {
    groups[key_of(num, r)].num_rows.push_back(r);
    num_total += num_w[r];
  }
  for (long r = 0; r < den.rows(); ++r) {
    groups[key_of(den, r)].den_rows.push_back(r);
    den_total += den_w[r];
  }
  for (auto& [key, rows] : groups) {
    Stratum st;
    for (long r : rows.num_rows) st.num_mass += num_w[r];
    for (long r : rows.den_rows) st.den_mass += den_w[r];
    st.num_mass /= std::max(num_total, 1e-300);
    st.den_mass /= std::max(den_total, 1e-300);
    if (!continuous_cols_.empty()) {
      auto build = [&](const Mat& m, const Vec& wts, const std::vector<long>& idx) -> std::shared_ptr<Kde> {
        if (idx.empty()) return nullptr;
        Mat xc(static_cast<long>(idx.size()), static_cast<long>(continuous_cols_.size()));
        Vec wc(static_cast<long>(idx.size()));
        for (std::size_t i = 0; i < idx.size(); ++i) {
          for (std::size_t c = 0; c < continuous_cols_.size(); ++c)
            xc(static_cast<long>(i), static_cast<long>(c)) = m(idx[i], continuous_cols_[c]);
          wc[static_cast<long>(i)] = wts[idx[i]];
        }
        auto kde = std::make_shared<Kde>(kde_cap);
        kde->fit(xc, wc);
        return kde;
      };
      st.num_kde = build(num, num_w, rows.num_rows);
      st.den_kde = build(den, den_w, rows.den_rows);
    }
    strata_[key] = st;
  }
}

double DensityRatio::eval(const Vec& x) const {
  if (identity_) return 1.0;
  ++total_;
  std::vector<double> key(discrete_cols_.size());
  for (std::size_t i = 0; i < discrete_cols_.size(); ++i) key[i] = x[discrete_cols_[i]];
  double raw = 0.0;
  auto it = strata_.find(key);
  if (it != strata_.end()) {
    const Stratum& st = it->second;
    double numd = st.num_mass, dend = st.den_mass;
    if (!continuous_cols_.empty()) {
      Vec xc(static_cast<long>(continuous_cols_.size()));
      for (std::size_t c = 0; c < continuous_cols_.size(); ++c) xc[static_cast<long>(c)] = x[continuous_cols_[c]];
      numd *= st.num_kde ? st.num_kde->density(xc) : 0.0;
      dend *= st.den_kde ? st.den_kde->density(xc) : 0.0;
    }
    raw = dend > 0.0 ? numd / dend : (numd > 0.0 ? clip_c_ * 2.0 : 0.0);
  }
  double clipped = std::clamp(raw, 1.0 / clip_c_, clip_c_);
  if (clipped != raw) ++clipped_;
  return clipped;
}

std::shared_ptr<Regressor> fit_conditional_mean(const FusedDataset& data, int target_j,
                                                const std::vector<int>& conditioning, int pool_j,
                                                const NuisanceOptions& opts) {
  auto rows = pooled_indices(data, pool_j);
  std::vector<int> needed = conditioning;
  needed.push_back(target_j);
  Mat full;
  Vec w;
  auto kept = design_matrix(data, rows, needed, full, w);
  if (kept.empty()) throw std::runtime_error("no usable rows for conditional mean fit");
  Mat X = full.leftCols(static_cast<long>(conditioning.size()));
  Vec y = full.col(full.cols() - 1);
  auto model = make_learner(opts);
  model->fit(X, y, w);
  return std::shared_ptr<Regressor>(model.release());
}

namespace {

// Samples one coordinate given its (flattened) history; fitted on rows pooled
// over the coordinate's aligned sources so the draw follows the induced
// target conditional.
struct CondSampler {
  bool discrete = false;
  std::vector<double> levels;
  std::vector<std::unique_ptr<Regressor>> level_prob;  // discrete case
  std::unique_ptr<Regressor> mean;                     // continuous case
  std::vector<double> residuals, res_cdf;

  double sample(const Vec& hist, Rng& rng) const {
    if (discrete) {
      std::vector<double> p(levels.size());
      double tot = 0.0;
      for (std::size_t l = 0; l < levels.size(); ++l) {
        p[l] = std::max(0.0, level_prob[l]->predict(hist));
        tot += p[l];
      }
      if (tot <= 0.0) {
        for (auto& v : p) v = 1.0 / static_cast<double>(levels.size());
      } else {
        for (auto& v : p) v /= tot;
      }
      return levels[static_cast<std::size_t>(rng.categorical(p))];
    }
    double u = rng.uniform();
    auto it = std::lower_bound(res_cdf.begin(), res_cdf.end(), u);
    std::size_t idx = std::min(static_cast<std::size_t>(it - res_cdf.begin()), residuals.size() - 1);
    return mean->predict(hist) + residuals[idx];
  }
};

CondSampler fit_sampler(const FusedDataset& data, int m, const NuisanceOptions& opts) {
  std::vector<std::size_t> rows;
  if (data.spec.is_relevant(m)) {
    rows = pooled_indices(data, m);
  } else {
    rows.resize(data.records.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  }
  std::vector<int> cols;
  for (int c = 1; c <= m; ++c) cols.push_back(c);
  Mat full;
  Vec w;
  design_matrix(data, rows, cols, full, w);
  if (full.rows() == 0) throw std::runtime_error("no usable rows for coordinate sampler");
  Mat X = full.leftCols(m - 1);
  Vec y = full.col(m - 1);

  CondSampler cs;
  std::vector<double> yv(y.data(), y.data() + y.size());
  cs.levels = distinct_levels(yv);
  cs.discrete = !cs.levels.empty();
  if (cs.discrete) {
    for (double lev : cs.levels) {
      Vec ind(y.size());
      for (long r = 0; r < y.size(); ++r) ind[r] = (y[r] == lev) ? 1.0 : 0.0;
      std::unique_ptr<Regressor> fit;
      if (cs.levels.size() == 2) {
        Basis b;
        b.interactions = opts.interactions;
        fit = std::make_unique<LogisticModel>(b, opts.trim_eps);
      } else {
        fit = make_learner(opts);
      }
      fit->fit(X, ind, w);
      cs.level_prob.push_back(std::move(fit));
    }
  } else {
    cs.mean = make_learner(opts);
    cs.mean->fit(X, y, w);
    cs.residuals.resize(static_cast<std::size_t>(y.size()));
    cs.res_cdf.resize(cs.residuals.size());
    double tot = w.sum(), acc = 0.0;
    for (long r = 0; r < y.size(); ++r) {
      cs.residuals[static_cast<std::size_t>(r)] = y[r] - cs.mean->predict(X.row(r).transpose());
      acc += w[r] / tot;
      cs.res_cdf[static_cast<std::size_t>(r)] = acc;
    }
  }
  return cs;
}

}  // namespace

std::shared_ptr<DensityRatio> fit_density_ratio(const FusedDataset& data, int j,
                                                const NuisanceOptions& opts, std::uint64_t seed) {
  auto ratio = std::make_shared<DensityRatio>();
  if (j <= 1) {
    Mat empty(0, 0);
    Vec none(0);
    ratio->fit(empty, none, empty, none, opts.clip_c, opts.kde_cap);
    return ratio;
  }
  std::vector<CondSampler> samplers;
  samplers.reserve(static_cast<std::size_t>(j - 1));
  for (int m = 1; m < j; ++m) samplers.push_back(fit_sampler(data, m, opts));

  std::size_t n_draws = std::max(opts.ratio_draws, data.records.size());
  Mat num(static_cast<long>(n_draws), j - 1);
  Vec num_w = Vec::Ones(static_cast<long>(n_draws));
  Rng rng(seed, 0xfeedULL + static_cast<std::uint64_t>(j));
  for (std::size_t r = 0; r < n_draws; ++r) {
    for (int m = 1; m < j; ++m) {
      Vec hist = num.row(static_cast<long>(r)).head(m - 1).transpose();
      num(static_cast<long>(r), m - 1) = samplers[static_cast<std::size_t>(m - 1)].sample(hist, rng);
    }
  }

  std::vector<int> cols;
  for (int c = 1; c < j; ++c) cols.push_back(c);
  Mat den;
  Vec den_w;
  design_matrix(data, pooled_indices(data, j), cols, den, den_w);
  if (den.rows() == 0) throw std::runtime_error("no usable rows for density-ratio denominator");
  ratio->fit(num, num_w, den, den_w, opts.clip_c, opts.kde_cap);
  return ratio;
}

std::vector<int> assign_folds(const FusedDataset& data, int folds) {
  std::vector<int> out(data.records.size(), 0);
  if (folds <= 1) return out;
  std::map<int, int> counter;
  for (std::size_t i = 0; i < data.records.size(); ++i)
    out[i] = counter[data.records[i].s]++ % folds;
  return out;
}

NuisanceFit fit_all(const FusedDataset& data, const NuisanceOptions& opts, std::uint64_t seed) {
  NuisanceFit fit;
  fit.clip_c = opts.clip_c;
  fit.trim_eps = opts.trim_eps;
  double total_w = 0.0;
  std::map<int, double> by_source;
  for (const auto& rec : data.records) {
    total_w += rec.w;
    by_source[rec.s] += rec.w;
  }
  for (int j : data.spec.relevant) {
    double p = 0.0;
    for (int s : data.spec.fusion_sets.at(j)) p += by_source.count(s) ? by_source[s] / total_w : 0.0;
    fit.source_probs[j] = p;

    std::vector<int> cond;
    for (int c = 1; c < j; ++c) cond.push_back(c);
    auto reg = fit_conditional_mean(data, j, cond, j, opts);
    if (auto* lin = dynamic_cast<LinearModel*>(reg.get()); lin && lin->used_ridge_fallback())
      fit.ridge_fallback = true;
    fit.cond_means[j] = reg;
    fit.lambda[j] = fit_density_ratio(data, j, opts, seed);
  }
  if (opts.folds > 1) fit.fold_of = assign_folds(data, opts.folds);
  return fit;
}

}  // namespace fusion
