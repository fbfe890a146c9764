#include "fusion/discrete.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

namespace fusion {

namespace {
constexpr double kMassTol = 1e-14;
}

void DiscreteModel::set_conditional(int j, const std::vector<int>& sources,
                                    const std::vector<double>& table) {
  if (cond.size() != static_cast<size_t>(spec.d)) cond.resize(spec.d);
  long np = 1;
  for (int m = 1; m < j; ++m) np *= static_cast<long>(support[m - 1].size());
  long want = static_cast<long>(spec.k) * np * static_cast<long>(support[j - 1].size());
  if (cond[j - 1].empty()) cond[j - 1].assign(want, -1.0);
  if (static_cast<long>(table.size()) != np * static_cast<long>(support[j - 1].size()))
    throw std::invalid_argument("set_conditional: table size mismatch at j=" + std::to_string(j));
  for (int s : sources)
    for (long t = 0; t < static_cast<long>(table.size()); ++t)
      cond[j - 1][static_cast<long>(s - 1) * table.size() + t] = table[t];
}

void DiscreteModel::set_aligned_conditional(int j, const std::vector<double>& table) {
  set_conditional(j, spec.fusion_sets.at(j), table);
}

void DiscreteModel::set_default_conditional(int j, const std::vector<double>& table) {
  std::vector<int> remaining;
  long np = 1;
  for (int m = 1; m < j; ++m) np *= static_cast<long>(support[m - 1].size());
  long per = np * static_cast<long>(support[j - 1].size());
  if (cond.size() != static_cast<size_t>(spec.d)) cond.resize(spec.d);
  if (cond[j - 1].empty()) cond[j - 1].assign(static_cast<long>(spec.k) * per, -1.0);
  for (int s = 1; s <= spec.k; ++s)
    if (cond[j - 1][static_cast<long>(s - 1) * per] < 0.0) remaining.push_back(s);
  set_conditional(j, remaining, table);
}

void DiscreteModel::finalize() {
  int d = spec.d, k = spec.k;
  n_prefix_.assign(d + 1, 1);
  for (int j = 1; j <= d; ++j) n_prefix_[j] = n_prefix_[j - 1] * size(j);
  suffix_.assign(d + 1, 1);
  for (int j = d - 1; j >= 0; --j) suffix_[j] = suffix_[j + 1] * size(j + 1);

  // Sanity on the conditional tables.
  for (int j = 1; j <= d; ++j) {
    long per = n_prefix_[j - 1] * size(j);
    if (static_cast<long>(cond[j - 1].size()) != static_cast<long>(k) * per)
      throw std::runtime_error("finalize: conditional table missing at j=" + std::to_string(j));
    for (int s = 1; s <= k; ++s)
      for (long h = 0; h < n_prefix_[j - 1]; ++h) {
        double tot = 0.0;
        for (int a = 0; a < size(j); ++a) {
          double p = cond[j - 1][(static_cast<long>(s - 1) * n_prefix_[j - 1] + h) * size(j) + a];
          if (p < 0.0) throw std::runtime_error("finalize: unset/negative conditional at j=" + std::to_string(j));
          tot += p;
        }
        if (std::abs(tot - 1.0) > 1e-9)
          throw std::runtime_error("finalize: conditional at j=" + std::to_string(j) + " does not sum to 1");
      }
  }

  // Joint pmf.
  joint_.assign(n_configs() * k, 0.0);
  for (long zi = 0; zi < n_configs(); ++zi)
    for (int s = 1; s <= k; ++s) {
      double p = s_probs[s - 1];
      for (int j = 1; j <= d && p > 0.0; ++j) {
        long h = prefix_of(zi, j - 1);
        int a = atom_at(zi, j);
        p *= cond[j - 1][(static_cast<long>(s - 1) * n_prefix_[j - 1] + h) * size(j) + a];
      }
      joint_[zi * k + (s - 1)] = p;
    }

  // Induced target conditionals: pooled over the fusion set at relevant
  // coordinates, pooled over all sources elsewhere.
  target_cond_.assign(d, {});
  std::vector<int> all_sources(k);
  for (int s = 1; s <= k; ++s) all_sources[s - 1] = s;
  for (int j = 1; j <= d; ++j) {
    const std::vector<int>& srcs =
        spec.is_relevant(j) ? spec.fusion_sets.at(j) : all_sources;
    target_cond_[j - 1] = cond_density(j, srcs);
  }

  // Target prefix marginals.
  target_prefix_.assign(d + 1, {});
  target_prefix_[0] = {1.0};
  for (int j = 1; j <= d; ++j) {
    target_prefix_[j].assign(n_prefix_[j], 0.0);
    for (long h = 0; h < n_prefix_[j - 1]; ++h)
      for (int a = 0; a < size(j); ++a)
        target_prefix_[j][h * size(j) + a] =
            target_prefix_[j - 1][h] * target_cond_[j - 1][h * size(j) + a];
  }
}

std::vector<double> DiscreteModel::values(long zi, int j) const {
  std::vector<double> out;
  for (int m = 1; m <= j; ++m) {
    const auto& atom = support[m - 1][atom_at(zi, m)];
    out.insert(out.end(), atom.begin(), atom.end());
  }
  return out;
}

double DiscreteModel::p_fusion(int j) const {
  double p = 0.0;
  for (int s : spec.fusion_sets.at(j)) p += s_probs[s - 1];
  return p;
}

double DiscreteModel::target_pmf(long zi) const {
  double p = 1.0;
  for (int j = 1; j <= spec.d && p > 0.0; ++j)
    p *= target_cond_[j - 1][prefix_of(zi, j - 1) * size(j) + atom_at(zi, j)];
  return p;
}

std::vector<double> DiscreteModel::lambda_table(int j) const {
  std::vector<double> denom = prefix_given_sources(j - 1, spec.fusion_sets.at(j));
  std::vector<double> out(n_prefix_[j - 1], 0.0);
  for (long h = 0; h < n_prefix_[j - 1]; ++h) {
    double num = target_prefix_[j - 1][h];
    if (num > kMassTol && denom[h] > kMassTol) out[h] = num / denom[h];
  }
  return out;
}

std::vector<char> DiscreteModel::support_mask(int jm1) const {
  std::vector<char> out(n_prefix_[jm1], 0);
  for (long h = 0; h < n_prefix_[jm1]; ++h) out[h] = target_prefix_[jm1][h] > kMassTol ? 1 : 0;
  return out;
}

double DiscreteModel::expect(const XTable& f) const {
  double acc = 0.0;
  for (long i = 0; i < static_cast<long>(joint_.size()); ++i) acc += joint_[i] * f[i];
  return acc;
}

double DiscreteModel::var(const XTable& f) const {
  double m = expect(f), acc = 0.0;
  for (long i = 0; i < static_cast<long>(joint_.size()); ++i) {
    double c = f[i] - m;
    acc += joint_[i] * c * c;
  }
  return acc;
}

std::vector<double> DiscreteModel::cond_expect(const XTable& f, int j,
                                               const std::vector<int>& srcs) const {
  std::vector<double> num(n_prefix_[j], 0.0), den(n_prefix_[j], 0.0);
  for (long zi = 0; zi < n_configs(); ++zi) {
    long h = prefix_of(zi, j);
    for (int s : srcs) {
      double p = joint_[zi * spec.k + (s - 1)];
      num[h] += p * f[zi * spec.k + (s - 1)];
      den[h] += p;
    }
  }
  std::vector<double> out(n_prefix_[j], 0.0);
  for (long h = 0; h < n_prefix_[j]; ++h)
    if (den[h] > kMassTol) out[h] = num[h] / den[h];
  return out;
}

std::vector<double> DiscreteModel::cond_density(int j, const std::vector<int>& srcs) const {
  // P(Z̄_j | S ∈ srcs) aggregated from the joint, then normalized per prefix.
  std::vector<double> mass(n_prefix_[j], 0.0);
  for (long zi = 0; zi < n_configs(); ++zi) {
    long h = prefix_of(zi, j);
    for (int s : srcs) mass[h] += joint_[zi * spec.k + (s - 1)];
  }
  std::vector<double> out(n_prefix_[j], 0.0);
  for (long h = 0; h < n_prefix_[j - 1]; ++h) {
    double tot = 0.0;
    for (int a = 0; a < size(j); ++a) tot += mass[h * size(j) + a];
    if (tot > kMassTol)
      for (int a = 0; a < size(j); ++a) out[h * size(j) + a] = mass[h * size(j) + a] / tot;
  }
  return out;
}

std::vector<double> DiscreteModel::prefix_given_sources(int j, const std::vector<int>& srcs) const {
  std::vector<double> mass(n_prefix_[j], 0.0);
  double tot = 0.0;
  for (long zi = 0; zi < n_configs(); ++zi) {
    long h = prefix_of(zi, j);
    for (int s : srcs) {
      double p = joint_[zi * spec.k + (s - 1)];
      mass[h] += p;
      tot += p;
    }
  }
  // Every prefix accumulates the same suffix multiplicity, so dividing by the
  // grand total leaves the correct prefix law.
  if (tot > kMassTol)
    for (long h = 0; h < n_prefix_[j]; ++h) mass[h] /= tot;
  return mass;
}

double DiscreteModel::target_expect(const ZTable& g) const {
  double acc = 0.0;
  for (long zi = 0; zi < n_configs(); ++zi) acc += target_pmf(zi) * g[zi];
  return acc;
}

std::vector<double> DiscreteModel::target_cond_expect(const ZTable& g, int j) const {
  std::vector<double> num(n_prefix_[j], 0.0), den(n_prefix_[j], 0.0);
  for (long zi = 0; zi < n_configs(); ++zi) {
    long h = prefix_of(zi, j);
    double p = target_pmf(zi);
    num[h] += p * g[zi];
    den[h] += p;
  }
  std::vector<double> out(n_prefix_[j], 0.0);
  for (long h = 0; h < n_prefix_[j]; ++h)
    if (den[h] > kMassTol) out[h] = num[h] / den[h];
  return out;
}

ZTable DiscreteModel::from_prefix(const std::vector<double>& t, int j) const {
  ZTable out(n_configs(), 0.0);
  for (long zi = 0; zi < n_configs(); ++zi) out[zi] = t[prefix_of(zi, j)];
  return out;
}

XTable TangentScore::as_xtable(const DiscreteModel& m) const {
  XTable out(m.n_configs() * m.k(), 0.0);
  for (long zi = 0; zi < m.n_configs(); ++zi)
    for (int s = 1; s <= m.k(); ++s) {
      double h = s_score.empty() ? 0.0 : s_score[s - 1];
      for (int j = 1; j <= m.d(); ++j) {
        if (cond_score[j - 1].empty()) continue;
        long hp = m.prefix_of(zi, j - 1);
        int a = m.atom_at(zi, j);
        h += cond_score[j - 1][(static_cast<long>(s - 1) * m.n_prefix(j - 1) + hp) * m.size(j) + a];
      }
      out[zi * m.k() + (s - 1)] = h;
    }
  return out;
}

DiscreteModel perturb(const DiscreteModel& m, const TangentScore& h, double eps, double* eps_used) {
  // Shrink eps until every perturbed probability stays strictly positive.
  for (int tries = 0; tries < 60; ++tries) {
    bool ok = true;
    DiscreteModel out = m;
    for (int s = 1; s <= m.k() && ok; ++s) {
      double g = h.s_score.empty() ? 0.0 : h.s_score[s - 1];
      out.s_probs[s - 1] = m.s_probs[s - 1] * (1.0 + eps * g);
      if (m.s_probs[s - 1] > 0.0 && out.s_probs[s - 1] <= 0.0) ok = false;
    }
    for (int j = 1; j <= m.d() && ok; ++j) {
      if (h.cond_score[j - 1].empty()) continue;
      for (long i = 0; i < static_cast<long>(m.cond[j - 1].size()); ++i) {
        double p = m.cond[j - 1][i] * (1.0 + eps * h.cond_score[j - 1][i]);
        if (m.cond[j - 1][i] > 0.0 && p <= 0.0) {
          ok = false;
          break;
        }
        out.cond[j - 1][i] = p;
      }
    }
    if (ok) {
      out.finalize();
      if (eps_used) *eps_used = eps;
      return out;
    }
    eps *= 0.5;
  }
  throw std::runtime_error("perturb: could not keep the perturbed pmf positive");
}

std::string DiscreteModel::to_json() const {
  nlohmann::json j;
  j["d"] = spec.d;
  j["k"] = spec.k;
  j["J"] = spec.relevant;
  nlohmann::json fs;
  for (const auto& [idx, set] : spec.fusion_sets) fs[std::to_string(idx)] = set;
  j["fusion_sets"] = fs;
  j["support"] = support;
  j["s_probs"] = s_probs;
  j["cond"] = cond;
  return j.dump(2);
}

DiscreteModel DiscreteModel::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  DiscreteModel m;
  m.spec.d = j.at("d").get<int>();
  m.spec.k = j.at("k").get<int>();
  m.spec.relevant = j.at("J").get<std::vector<int>>();
  for (auto& [key, val] : j.at("fusion_sets").items())
    m.spec.fusion_sets[std::stoi(key)] = val.get<std::vector<int>>();
  m.support = j.at("support").get<std::vector<std::vector<std::vector<double>>>>();
  m.s_probs = j.at("s_probs").get<std::vector<double>>();
  m.cond = j.at("cond").get<std::vector<std::vector<double>>>();
  m.finalize();
  return m;
}

}  // namespace fusion
