#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fusion/engine.hpp"
#include "fusion/simulate.hpp"

using namespace fusion;

namespace {

// joint probability recomputed straight from the factor tables
double manual_joint(const DiscreteModel& m, long zi, int s) {
  double p = m.s_probs[s - 1];
  for (int j = 1; j <= m.d(); ++j) {
    long h = m.prefix_of(zi, j - 1);
    int a = m.atom_at(zi, j);
    p *= m.cond[j - 1][((s - 1) * m.n_prefix(j - 1) + h) * m.size(j) + a];
  }
  return p;
}

}  // namespace

TEST_CASE("every toy model is a normalized probability model") {
  for (const auto& id : toy_catalog()) {
    CAPTURE(id);
    DiscreteModel m = make_discrete_toy(id);
    double sp = 0.0;
    for (double p : m.s_probs) sp += p;
    CHECK(sp == doctest::Approx(1.0).epsilon(1e-12));
    double total = 0.0, target = 0.0;
    for (long zi = 0; zi < m.n_configs(); ++zi) {
      target += m.target_pmf(zi);
      for (int s = 1; s <= m.k(); ++s) {
        double p = m.joint(zi, s);
        CHECK(p >= 0.0);
        CHECK(p == doctest::Approx(manual_joint(m, zi, s)).epsilon(1e-12));
        total += p;
      }
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(target == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("aligned sources share the conditional on the target support") {
  for (const auto& id : toy_catalog()) {
    CAPTURE(id);
    DiscreteModel m = make_discrete_toy(id);
    for (int j : m.spec.relevant) {
      const auto& srcs = m.spec.fusion_sets.at(j);
      auto mask = m.support_mask(j - 1);
      for (long h = 0; h < m.n_prefix(j - 1); ++h) {
        if (!mask[h]) continue;
        for (int a = 0; a < m.size(j); ++a) {
          double ref = m.cond[j - 1][((srcs[0] - 1) * m.n_prefix(j - 1) + h) * m.size(j) + a];
          for (int s : srcs) {
            double v = m.cond[j - 1][((s - 1) * m.n_prefix(j - 1) + h) * m.size(j) + a];
            CHECK(v == doctest::Approx(ref).epsilon(1e-12));
          }
          CHECK(m.target_cond(j)[h * m.size(j) + a] == doctest::Approx(ref).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("first-coordinate history ratio is identically one on support") {
  DiscreteModel m = make_discrete_toy("nested");
  auto lam = m.lambda_table(1);
  REQUIRE(lam.size() == std::size_t(m.n_prefix(0)));
  for (double v : lam) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("history ratio agrees with the defining quotient of marginals") {
  DiscreteModel m = make_discrete_toy("itt");
  for (int j : m.spec.relevant) {
    auto lam = m.lambda_table(j);
    auto num = m.target_prefix_marginal(j - 1);
    auto den = m.prefix_given_sources(j - 1, m.spec.fusion_sets.at(j));
    auto mask = m.support_mask(j - 1);
    for (long h = 0; h < m.n_prefix(j - 1); ++h) {
      if (mask[h] && den[h] > 0.0)
        CHECK(lam[h] == doctest::Approx(num[h] / den[h]).epsilon(1e-12));
      else
        CHECK(lam[h] == 0.0);
    }
  }
}

TEST_CASE("expect and var match direct enumeration") {
  DiscreteModel m = make_discrete_toy("ope");
  XTable f(m.n_configs() * m.k());
  for (long zi = 0; zi < m.n_configs(); ++zi)
    for (int s = 1; s <= m.k(); ++s) {
      auto v = m.values(zi, m.d());
      f[zi * m.k() + (s - 1)] = v[0] + 2.0 * v.back() + 0.3 * s;
    }
  double ef = 0.0, ef2 = 0.0;
  for (long zi = 0; zi < m.n_configs(); ++zi)
    for (int s = 1; s <= m.k(); ++s) {
      double p = m.joint(zi, s), x = f[zi * m.k() + (s - 1)];
      ef += p * x;
      ef2 += p * x * x;
    }
  CHECK(m.expect(f) == doctest::Approx(ef).epsilon(1e-12));
  CHECK(m.var(f) == doctest::Approx(ef2 - ef * ef).epsilon(1e-10));
}

TEST_CASE("conditional expectations and densities match enumeration") {
  DiscreteModel m = make_discrete_toy("qte");
  std::vector<int> srcs = {2};
  XTable f(m.n_configs() * m.k());
  for (long zi = 0; zi < m.n_configs(); ++zi)
    for (int s = 1; s <= m.k(); ++s) f[zi * m.k() + (s - 1)] = m.values(zi, m.d()).back();
  int j = 1;
  auto ce = m.cond_expect(f, j, srcs);
  auto pj = m.prefix_given_sources(j, srcs);
  double psrcs = 0.0;
  for (int s : srcs) psrcs += m.p_source(s);
  for (long h = 0; h < m.n_prefix(j); ++h) {
    double num = 0.0, den = 0.0;
    for (long zi = 0; zi < m.n_configs(); ++zi) {
      if (m.prefix_of(zi, j) != h) continue;
      for (int s : srcs) {
        num += m.joint(zi, s) * f[zi * m.k() + (s - 1)];
        den += m.joint(zi, s);
      }
    }
    if (den > 0.0) CHECK(ce[h] == doctest::Approx(num / den).epsilon(1e-12));
    CHECK(pj[h] == doctest::Approx(den / psrcs).epsilon(1e-12));
  }
  // conditional density rows are proper pmfs and agree with the joint
  auto cd = m.cond_density(2, srcs);
  for (long h = 0; h < m.n_prefix(1); ++h) {
    double row = 0.0, hmass = 0.0;
    std::vector<double> cell(m.size(2), 0.0);
    for (long zi = 0; zi < m.n_configs(); ++zi) {
      if (m.prefix_of(zi, 1) != h) continue;
      for (int s : srcs) {
        cell[m.atom_at(zi, 2)] += m.joint(zi, s);
        hmass += m.joint(zi, s);
      }
    }
    for (int a = 0; a < m.size(2); ++a) {
      row += cd[h * m.size(2) + a];
      if (hmass > 0.0)
        CHECK(cd[h * m.size(2) + a] == doctest::Approx(cell[a] / hmass).epsilon(1e-12));
    }
    if (hmass > 0.0) CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("target conditional expectations telescope") {
  DiscreteModel m = make_discrete_toy("dag");
  ZTable g(m.n_configs());
  for (long zi = 0; zi < m.n_configs(); ++zi) {
    auto v = m.values(zi, m.d());
    g[zi] = v[0] * v[0] + v.back();
  }
  // E_Q[E_Q[g | z̄_1]] = E_Q[g]
  auto g1 = m.target_cond_expect(g, 1);
  double outer = 0.0;
  const auto& marg = m.target_prefix_marginal(1);
  for (long h = 0; h < m.n_prefix(1); ++h) outer += marg[h] * g1[h];
  CHECK(outer == doctest::Approx(m.target_expect(g)).epsilon(1e-12));
  // lifting a prefix table and conditioning back is the identity
  auto lifted = m.from_prefix(g1, 1);
  auto back = m.target_cond_expect(lifted, 1);
  for (long h = 0; h < m.n_prefix(1); ++h)
    if (marg[h] > 0.0) CHECK(back[h] == doctest::Approx(g1[h]).epsilon(1e-12));
}

TEST_CASE("perturbation stays normalized and moves expectations at first order") {
  DiscreteModel m = make_discrete_toy("nested");
  Rng rng(2024, 11);
  TangentScore h = random_tangent_score(m, rng);
  double eps_used = 0.0;
  DiscreteModel mp = perturb(m, h, 1e-3, &eps_used);
  CHECK(eps_used > 0.0);
  double sp = 0.0;
  for (double p : mp.s_probs) sp += p;
  CHECK(sp == doctest::Approx(1.0).epsilon(1e-12));
  double total = 0.0;
  for (long zi = 0; zi < mp.n_configs(); ++zi)
    for (int s = 1; s <= mp.k(); ++s) {
      CHECK(mp.joint(zi, s) >= 0.0);
      total += mp.joint(zi, s);
    }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  // derivative of E_{P_eps}[f] equals the covariance with the score
  XTable f(m.n_configs() * m.k());
  for (long zi = 0; zi < m.n_configs(); ++zi)
    for (int s = 1; s <= m.k(); ++s) f[zi * m.k() + (s - 1)] = m.values(zi, m.d())[0] + 0.1 * s;
  XTable hx = h.as_xtable(m);
  XTable fh(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) fh[i] = f[i] * hx[i];
  double slope = (mp.expect(f) - m.expect(f)) / eps_used;
  CHECK(slope == doctest::Approx(m.expect(fh)).epsilon(5e-3));
  // the score itself is centered
  CHECK(m.expect(hx) == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("json round trip preserves the model") {
  for (const auto& id : toy_catalog()) {
    CAPTURE(id);
    DiscreteModel m = make_discrete_toy(id);
    DiscreteModel r = DiscreteModel::from_json(m.to_json());
    REQUIRE(r.d() == m.d());
    REQUIRE(r.k() == m.k());
    REQUIRE(r.n_configs() == m.n_configs());
    for (long zi = 0; zi < m.n_configs(); ++zi) {
      for (int s = 1; s <= m.k(); ++s)
        CHECK(r.joint(zi, s) == doctest::Approx(m.joint(zi, s)).epsilon(1e-14));
      CHECK(r.target_pmf(zi) == doctest::Approx(m.target_pmf(zi)).epsilon(1e-14));
    }
    CHECK(r.spec.relevant == m.spec.relevant);
  }
}

TEST_CASE("configuration indexing helpers are mutually consistent") {
  DiscreteModel m = make_discrete_toy("itt");
  for (long zi = 0; zi < m.n_configs(); ++zi) {
    long h = 0;
    for (int j = 1; j <= m.d(); ++j) {
      int a = m.atom_at(zi, j);
      CHECK(m.prefix_of(zi, j - 1) == h);
      h = m.extend_prefix(h, j, a);
    }
    CHECK(h == zi);
    CHECK(m.first_config(m.d(), zi) == zi);
    auto v = m.values(zi, m.d());
    std::size_t expected = 0;
    for (int j = 1; j <= m.d(); ++j) expected += m.support[j - 1][m.atom_at(zi, j)].size();
    CHECK(v.size() == expected);
  }
}

TEST_CASE("fusion-set mass equals the sum of member source masses") {
  DiscreteModel m = make_discrete_toy("ope");
  for (int j : m.spec.relevant) {
    double p = 0.0;
    for (int s : m.spec.fusion_sets.at(j)) p += m.p_source(s);
    CHECK(m.p_fusion(j) == doctest::Approx(p).epsilon(1e-14));
  }
}
