#include "fusion/engine.hpp"

#include <algorithm>
#include <cmath>

namespace fusion {

namespace {

// Projects a per-(z̄_j) table through the model-class tangent projection at
// coordinate j, under the induced target conditional. Entries at histories
// off the target support are zeroed (they are masked downstream anyway).
std::vector<double> project_coordinate(const DiscreteModel& m, int j,
                                       const std::vector<double>& r) {
  auto ref = coordinate_dist(m, j);
  int na = m.size(j);
  CoordinateFunction f;
  f.j = j;
  f.eval = [ref, r, na](const std::vector<double>& zbar) {
    size_t alen = ref->atoms[0].size();
    std::vector<double> hist(zbar.begin(), zbar.end() - static_cast<long>(alen));
    std::vector<double> atom(zbar.end() - static_cast<long>(alen), zbar.end());
    int h = ref->find_history(hist);
    int a = ref->find_atom(atom);
    if (h < 0 || a < 0) throw std::runtime_error("coordinate lookup failed");
    return r[static_cast<long>(h) * na + a];
  };
  CoordinateFunction pf = project(f, m.spec.class_at(j), ref);
  std::vector<double> out(r.size(), 0.0);
  for (size_t h = 0; h < ref->histories.size(); ++h) {
    if (ref->hist_weights[h] <= 0.0) continue;
    for (int a = 0; a < na; ++a) {
      std::vector<double> z = ref->histories[h];
      const auto& atom = ref->atoms[a];
      z.insert(z.end(), atom.begin(), atom.end());
      out[h * na + a] = pf.eval(z);
    }
  }
  return out;
}

// λ_{j-1}(z̄_{j-1})·comp_j(z̄_j), optionally projected, as a per-prefix-j table.
std::vector<double> weighted_component(const DiscreteModel& m, int j, const ZTable& comp) {
  std::vector<double> lam = m.lambda_table(j);
  int na = m.size(j);
  std::vector<double> r(m.n_prefix(j), 0.0);
  for (long h = 0; h < m.n_prefix(j - 1); ++h)
    for (int a = 0; a < na; ++a)
      r[h * na + a] = lam[h] * comp[m.first_config(j, h * na + a)];
  return r;
}

}  // namespace

GradientComponents decompose(const DiscreteModel& m, const ZTable& d_q) {
  GradientComponents out;
  out.js = m.spec.relevant;
  std::vector<double> prev_prefix;  // E_Q[D | z̄_{j-1}]
  for (int j : out.js) {
    std::vector<double> ej = m.target_cond_expect(d_q, j);
    std::vector<double> ejm1 = m.target_cond_expect(d_q, j - 1);
    ZTable comp(m.n_configs(), 0.0);
    for (long zi = 0; zi < m.n_configs(); ++zi)
      comp[zi] = ej[m.prefix_of(zi, j)] - ejm1[m.prefix_of(zi, j - 1)];
    out.comp.push_back(std::move(comp));
  }
  return out;
}

XTable lift(const DiscreteModel& m, const GradientComponents& c) {
  XTable out(m.n_configs() * m.k(), 0.0);
  for (size_t t = 0; t < c.js.size(); ++t) {
    int j = c.js[t];
    std::vector<double> lam = m.lambda_table(j);
    double pf = m.p_fusion(j);
    for (long zi = 0; zi < m.n_configs(); ++zi) {
      double term = lam[m.prefix_of(zi, j - 1)] * c.comp[t][zi] / pf;
      if (term == 0.0) continue;
      for (int s : m.spec.fusion_sets.at(j)) out[zi * m.k() + (s - 1)] += term;
    }
  }
  return out;
}

std::vector<double> gamma_j(const DiscreteModel& m, const XTable& f, int j) {
  const std::vector<int>& srcs = m.spec.fusion_sets.at(j);
  std::vector<double> ej = m.cond_expect(f, j, srcs);
  std::vector<double> ejm1 = m.cond_expect(f, j - 1, srcs);
  std::vector<char> sup = m.support_mask(j - 1);
  std::vector<double> out(m.n_prefix(j), 0.0);
  for (long h = 0; h < m.n_prefix(j); ++h) {
    long hm1 = h / m.size(j);
    if (sup[hm1]) out[h] = ej[h] - ejm1[hm1];
  }
  return out;
}

XTable project_fused(const DiscreteModel& m, const XTable& f) {
  const int k = m.k();
  XTable out(m.n_configs() * k, 0.0);
  double grand = m.expect(f);

  // Per-source, per-coordinate stratum projections E[f|z̄_j,s] − E[f|z̄_{j-1},s].
  // strata[s-1][j] holds E[f | z̄_j, S=s] over prefixes of length j.
  std::vector<std::vector<std::vector<double>>> strata(k);
  for (int s = 1; s <= k; ++s) {
    strata[s - 1].resize(m.d() + 1);
    for (int j = 0; j <= m.d(); ++j) strata[s - 1][j] = m.cond_expect(f, j, {s});
  }

  for (long zi = 0; zi < m.n_configs(); ++zi)
    for (int s = 1; s <= k; ++s) {
      double v = strata[s - 1][0][0] - grand;  // marginal-of-S stratum
      for (int j = 1; j <= m.d(); ++j)
        v += strata[s - 1][j][m.prefix_of(zi, j)] - strata[s - 1][j - 1][m.prefix_of(zi, j - 1)];
      out[zi * k + (s - 1)] = v;
    }

  // Aligned-coordinate correction: replace the per-source stratum piece by
  // the target-model projection of Γ_j(f) on the target support.
  for (int j : m.spec.relevant) {
    std::vector<double> gj = gamma_j(m, f, j);
    std::vector<double> pg = project_coordinate(m, j, gj);
    std::vector<char> sup = m.support_mask(j - 1);
    for (long zi = 0; zi < m.n_configs(); ++zi) {
      long h = m.prefix_of(zi, j);
      long hm1 = m.prefix_of(zi, j - 1);
      if (!sup[hm1]) continue;
      for (int s : m.spec.fusion_sets.at(j)) {
        double stratum = strata[s - 1][j][h] - strata[s - 1][j - 1][hm1];
        out[zi * k + (s - 1)] += pg[h] - stratum;
      }
    }
  }
  return out;
}

XTable canonical(const DiscreteModel& m, const GradientComponents& c) {
  XTable out(m.n_configs() * m.k(), 0.0);
  for (size_t t = 0; t < c.js.size(); ++t) {
    int j = c.js[t];
    std::vector<double> r = weighted_component(m, j, c.comp[t]);
    std::vector<double> pr = project_coordinate(m, j, r);
    std::vector<char> sup = m.support_mask(j - 1);
    double pf = m.p_fusion(j);
    for (long zi = 0; zi < m.n_configs(); ++zi) {
      long hm1 = m.prefix_of(zi, j - 1);
      if (!sup[hm1]) continue;
      double term = pr[m.prefix_of(zi, j)] / pf;
      if (term == 0.0) continue;
      for (int s : m.spec.fusion_sets.at(j)) out[zi * m.k() + (s - 1)] += term;
    }
  }
  return out;
}

double nested_fusion_identity_max_dev(const DiscreteModel& m, const GradientComponents& c) {
  const int d = m.d(), k = m.k();
  if (static_cast<int>(c.js.size()) != d)
    throw std::invalid_argument("nested-fusion identity requires every coordinate to be relevant");
  for (int j = 1; j < d; ++j) {
    const auto& lo = m.spec.fusion_sets.at(j);
    for (int s : m.spec.fusion_sets.at(j + 1))
      if (std::find(lo.begin(), lo.end(), s) == lo.end())
        throw std::invalid_argument("fusion sets are not nested");
  }

  // Projected per-coordinate terms Π{λ_{j-1}·comp_j}(z̄_j).
  std::vector<std::vector<double>> pr(d);
  for (int j = 1; j <= d; ++j)
    pr[j - 1] = project_coordinate(m, j, weighted_component(m, j, c.comp[j - 1]));

  // Complete-case level per source: C(s) = max{j : s ∈ 𝒮_j}.
  std::vector<int> level(k, 0);
  for (int s = 1; s <= k; ++s)
    for (int j = 1; j <= d; ++j)
      if (m.spec.in_fusion_set(s, j)) level[s - 1] = j;
  auto p_ge = [&](int l) {
    double p = 0.0;
    for (int s = 1; s <= k; ++s)
      if (level[s - 1] >= l) p += m.p_source(s);
    return p;
  };

  XTable lhs = canonical(m, c);
  double worst = 0.0;
  for (long zi = 0; zi < m.n_configs(); ++zi) {
    // Running sums Σ_{j≤l} Π{r_j}(z̄_j).
    std::vector<double> cum(d + 1, 0.0);
    for (int j = 1; j <= d; ++j)
      cum[j] = cum[j - 1] + pr[j - 1][m.prefix_of(zi, j)];
    for (int s = 1; s <= k; ++s) {
      bool has_mass = m.joint(zi, s) > 0.0;
      if (!has_mass) continue;
      int cs = level[s - 1];
      double rhs = (cs == d ? 1.0 : 0.0) / p_ge(d) * cum[d];
      for (int l = 1; l <= d - 1; ++l) {
        double pge = p_ge(l);
        double pcl = pge > 0.0 ? (pge - p_ge(l + 1)) / pge : 0.0;
        double w = ((cs == l ? 1.0 : 0.0) - (cs >= l ? 1.0 : 0.0) * pcl) / p_ge(l + 1);
        rhs += w * cum[l];
      }
      worst = std::max(worst, std::abs(lhs[zi * k + (s - 1)] - rhs));
    }
  }
  return worst;
}

PathwiseResult pathwise_oracle(const DiscreteModel& m,
                               const std::function<double(const DiscreteModel&)>& phi,
                               const XTable& d, const TangentScore& h,
                               std::vector<double> eps_grid) {
  std::sort(eps_grid.begin(), eps_grid.end(), std::greater<double>());
  std::vector<double> eps_used(eps_grid.size()), diffs(eps_grid.size());
  for (size_t i = 0; i < eps_grid.size(); ++i) {
    double ep = 0.0, em = 0.0;
    DiscreteModel plus = perturb(m, h, eps_grid[i], &ep);
    DiscreteModel minus = perturb(m, h, -eps_grid[i], &em);
    // Keep the stencil symmetric even if positivity shrank one side.
    double eps = std::min(ep, std::abs(em));
    if (eps != ep) plus = perturb(m, h, eps, &ep);
    if (eps != std::abs(em)) minus = perturb(m, h, -eps, &em);
    eps_used[i] = eps;
    diffs[i] = (phi(plus) - phi(minus)) / (2.0 * eps);
  }
  // Richardson extrapolation on the two smallest levels (O(ε²) error).
  size_t n = eps_grid.size();
  double deriv;
  if (n >= 2) {
    double e1 = eps_used[n - 2], e2 = eps_used[n - 1];
    deriv = (e1 * e1 * diffs[n - 1] - e2 * e2 * diffs[n - 2]) / (e1 * e1 - e2 * e2);
  } else {
    deriv = diffs[0];
  }
  PathwiseResult out;
  out.derivative = deriv;
  XTable ht = h.as_xtable(m);
  XTable dh(ht.size());
  for (size_t i = 0; i < ht.size(); ++i) dh[i] = ht[i] * d[i];
  out.inner = m.expect(dh);
  out.mismatch = std::abs(out.derivative - out.inner);
  return out;
}

namespace {

// Conditionally centered uniform noise for one (source, history) block.
void fill_centered(std::vector<double>& block, const std::vector<double>& probs, Rng& rng) {
  int na = static_cast<int>(block.size());
  double mean = 0.0, tot = 0.0;
  for (int a = 0; a < na; ++a) block[a] = 2.0 * rng.uniform() - 1.0;
  for (int a = 0; a < na; ++a) {
    mean += probs[a] * block[a];
    tot += probs[a];
  }
  if (tot <= 0.0) {
    std::fill(block.begin(), block.end(), 0.0);
    return;
  }
  mean /= tot;
  for (int a = 0; a < na; ++a) block[a] = probs[a] > 0.0 ? block[a] - mean : 0.0;
}

void rescale(TangentScore& ts, double cap) {
  double mx = 0.0;
  for (double v : ts.s_score) mx = std::max(mx, std::abs(v));
  for (const auto& t : ts.cond_score)
    for (double v : t) mx = std::max(mx, std::abs(v));
  if (mx > cap && mx > 0.0) {
    double f = cap / mx;
    for (double& v : ts.s_score) v *= f;
    for (auto& t : ts.cond_score)
      for (double& v : t) v *= f;
  }
}

}  // namespace

TangentScore random_tangent_score(const DiscreteModel& m, Rng& rng) {
  TangentScore ts;
  ts.cond_score.resize(m.d());
  // Source-weight direction, centered against P(S).
  ts.s_score.resize(m.k());
  double mean = 0.0;
  for (int s = 0; s < m.k(); ++s) {
    ts.s_score[s] = 2.0 * rng.uniform() - 1.0;
    mean += m.s_probs[s] * ts.s_score[s];
  }
  for (int s = 0; s < m.k(); ++s) ts.s_score[s] -= mean;

  for (int j = 1; j <= m.d(); ++j) {
    long np = m.n_prefix(j - 1);
    int na = m.size(j);
    ts.cond_score[j - 1].assign(m.cond[j - 1].size(), 0.0);

    std::vector<double> aligned;  // shared direction f_j over (h, a)
    std::vector<char> sup;
    if (m.spec.is_relevant(j)) {
      // Raw conditionally centered noise under the target conditional, then
      // projected into the model-class tangent space.
      const auto& tc = m.target_cond(j);
      std::vector<double> raw(np * na, 0.0);
      for (long h = 0; h < np; ++h) {
        std::vector<double> block(na), probs(na);
        for (int a = 0; a < na; ++a) probs[a] = tc[h * na + a];
        fill_centered(block, probs, rng);
        for (int a = 0; a < na; ++a) raw[h * na + a] = block[a];
      }
      aligned = project_coordinate(m, j, raw);
      sup = m.support_mask(j - 1);
    }

    for (int s = 1; s <= m.k(); ++s) {
      bool in_set = m.spec.is_relevant(j) && m.spec.in_fusion_set(s, j);
      for (long h = 0; h < np; ++h) {
        long base = (static_cast<long>(s - 1) * np + h) * na;
        if (in_set && sup[h]) {
          for (int a = 0; a < na; ++a) ts.cond_score[j - 1][base + a] = aligned[h * na + a];
        } else {
          std::vector<double> block(na), probs(na);
          for (int a = 0; a < na; ++a) probs[a] = m.cond[j - 1][base + a];
          fill_centered(block, probs, rng);
          for (int a = 0; a < na; ++a) ts.cond_score[j - 1][base + a] = block[a];
        }
      }
    }
  }
  rescale(ts, 1.0);
  return ts;
}

TangentScore alignment_breaking_score(const DiscreteModel& m, Rng& rng) {
  // Last relevant coordinate whose fusion set has at least two sources.
  int j = 0;
  for (int cand : m.spec.relevant)
    if (m.spec.fusion_sets.at(cand).size() >= 2) j = cand;
  if (j == 0) throw std::invalid_argument("needs a fusion set with at least two sources");
  const auto& set = m.spec.fusion_sets.at(j);
  int s1 = set[0], s2 = set[1];

  long np = m.n_prefix(j - 1);
  int na = m.size(j);
  std::vector<char> sup = m.support_mask(j - 1);

  TangentScore ts;
  ts.s_score.assign(m.k(), 0.0);
  ts.cond_score.resize(m.d());
  ts.cond_score[j - 1].assign(m.cond[j - 1].size(), 0.0);

  for (long h = 0; h < np; ++h) {
    if (!sup[h]) continue;
    // Joint mass of (history, source) for the two sources.
    double w1 = 0.0, w2 = 0.0;
    for (long zi = m.first_config(j - 1, h); zi < m.first_config(j - 1, h + 1); ++zi) {
      w1 += m.joint(zi, s1);
      w2 += m.joint(zi, s2);
    }
    if (w1 <= 0.0 || w2 <= 0.0) continue;
    std::vector<double> block(na), probs(na);
    long base1 = (static_cast<long>(s1 - 1) * np + h) * na;
    for (int a = 0; a < na; ++a) probs[a] = m.cond[j - 1][base1 + a];
    fill_centered(block, probs, rng);
    long base2 = (static_cast<long>(s2 - 1) * np + h) * na;
    for (int a = 0; a < na; ++a) {
      ts.cond_score[j - 1][base1 + a] = block[a];
      ts.cond_score[j - 1][base2 + a] = -(w1 / w2) * block[a];
    }
    break;  // one history is enough for the control
  }
  rescale(ts, 1.0);
  return ts;
}

}  // namespace fusion
