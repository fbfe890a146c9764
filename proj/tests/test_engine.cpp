#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fusion/engine.hpp"
#include "fusion/simulate.hpp"

using namespace fusion;

namespace {

// full-data gradient of E_Q[g]: g - E_Q[g]
ZTable mean_gradient(const DiscreteModel& m, const ZTable& g) {
  double mu = m.target_expect(g);
  ZTable d(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] - mu;
  return d;
}

ZTable default_g(const DiscreteModel& m) {
  ZTable g(m.n_configs());
  for (long zi = 0; zi < m.n_configs(); ++zi) {
    auto v = m.values(zi, m.d());
    g[zi] = v.back() + 0.25 * v[0] * v.back();
  }
  return g;
}

double inner(const DiscreteModel& m, const XTable& a, const XTable& b) {
  XTable ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) ab[i] = a[i] * b[i];
  return m.expect(ab);
}

DiscreteModel single_source_model() {
  DiscreteModel m;
  m.spec.d = 2;
  m.spec.k = 1;
  m.spec.relevant = {1, 2};
  m.spec.fusion_sets = {{1, {1}}, {2, {1}}};
  m.support = {{{0.0}, {1.0}}, {{0.0}, {1.0}, {2.0}}};
  m.s_probs = {1.0};
  m.cond.resize(2);
  m.set_conditional(1, {1}, {0.5, 0.5});
  m.set_conditional(2, {1}, {0.2, 0.3, 0.5, 0.4, 0.4, 0.2});
  m.finalize();
  return m;
}

DiscreteModel partial_coverage_model() {
  DiscreteModel m;
  m.spec.d = 1;
  m.spec.k = 2;
  m.spec.relevant = {1};
  m.spec.fusion_sets = {{1, {1}}};
  m.support = {{{0.0}, {1.0}}};
  m.s_probs = {0.7, 0.3};
  m.cond.resize(1);
  m.set_conditional(1, {1}, {0.3, 0.7});
  m.set_conditional(1, {2}, {0.6, 0.4});
  m.finalize();
  return m;
}

}  // namespace

TEST_CASE("decomposition telescopes back to the centered gradient") {
  for (const auto& id : {"nested", "itt", "qte"}) {
    CAPTURE(id);
    DiscreteModel m = make_discrete_toy(id);
    ZTable dq = mean_gradient(m, default_g(m));
    GradientComponents c = decompose(m, dq);
    REQUIRE(c.js == m.spec.relevant);
    // each component is conditionally centered under the target law
    for (std::size_t i = 0; i < c.js.size(); ++i) {
      auto cm = m.target_cond_expect(c.comp[i], c.js[i] - 1);
      const auto& marg = m.target_prefix_marginal(c.js[i] - 1);
      for (long h = 0; h < m.n_prefix(c.js[i] - 1); ++h)
        if (marg[h] > 0.0) CHECK(cm[h] == doctest::Approx(0.0).epsilon(1e-10).scale(1.0));
    }
  }
  // when every coordinate is relevant the components sum to the gradient
  DiscreteModel m = make_discrete_toy("nested");
  ZTable dq = mean_gradient(m, default_g(m));
  GradientComponents c = decompose(m, dq);
  REQUIRE(c.js.size() == std::size_t(m.d()));
  for (long zi = 0; zi < m.n_configs(); ++zi) {
    if (m.target_pmf(zi) <= 0.0) continue;
    double sum = 0.0;
    for (const auto& comp : c.comp) sum += comp[zi];
    CHECK(sum == doctest::Approx(dq[zi]).epsilon(1e-10).scale(1.0));
  }
}

TEST_CASE("single source: the lifted gradient is the centered full-data gradient") {
  DiscreteModel m = single_source_model();
  ZTable dq = mean_gradient(m, default_g(m));
  XTable lifted = lift(m, decompose(m, dq));
  for (long zi = 0; zi < m.n_configs(); ++zi)
    CHECK(lifted[zi] == doctest::Approx(dq[zi]).epsilon(1e-10).scale(1.0));
}

TEST_CASE("sources outside every fusion set receive a zero gradient") {
  DiscreteModel m = partial_coverage_model();
  ZTable dq = mean_gradient(m, default_g(m));
  XTable lifted = lift(m, decompose(m, dq));
  for (long zi = 0; zi < m.n_configs(); ++zi) {
    CHECK(lifted[zi * 2 + 1] == 0.0);  // source 2 is never pooled
    // source 1 rows carry the inverse-probability-weighted component
    CHECK(lifted[zi * 2 + 0] == doctest::Approx(dq[zi] / 0.7).epsilon(1e-10).scale(1.0));
  }
  CHECK(m.expect(lifted) == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
}

TEST_CASE("coordinate conditional-difference operator matches its definition") {
  DiscreteModel m = make_discrete_toy("itt");
  Rng rng(7, 0);
  XTable f(m.n_configs() * m.k());
  for (auto& v : f) v = rng.normal();
  for (int j : m.spec.relevant) {
    const auto& srcs = m.spec.fusion_sets.at(j);
    auto g = gamma_j(m, f, j);
    auto ej = m.cond_expect(f, j, srcs);
    auto ejm1 = m.cond_expect(f, j - 1, srcs);
    auto mask = m.support_mask(j - 1);
    for (long h = 0; h < m.n_prefix(j); ++h) {
      long hp = h / m.size(j);
      double expected = mask[hp] ? ej[h] - ejm1[hp] : 0.0;
      CHECK(g[h] == doctest::Approx(expected).epsilon(1e-10).scale(1.0));
    }
  }
}

TEST_CASE("the lifted gradient's conditional differences recover its components") {
  DiscreteModel m = make_discrete_toy("nested");
  ZTable dq = mean_gradient(m, default_g(m));
  GradientComponents c = decompose(m, dq);
  XTable lifted = lift(m, c);
  for (std::size_t i = 0; i < c.js.size(); ++i) {
    int j = c.js[i];
    auto lam = m.lambda_table(j);
    auto g = gamma_j(m, lifted, j);
    double pj = m.p_fusion(j);
    for (long h = 0; h < m.n_prefix(j); ++h) {
      long hp = h / m.size(j);
      double expected = lam[hp] * c.comp[i][m.first_config(j, h)] / pj;
      CHECK(g[h] == doctest::Approx(expected).epsilon(1e-9).scale(1.0));
    }
  }
}

TEST_CASE("fused-space projection: idempotent, norm reducing, keeps source scores") {
  for (const auto& id : toy_catalog()) {
    CAPTURE(id);
    DiscreteModel m = make_discrete_toy(id);
    Rng rng(13, 5);
    XTable f(m.n_configs() * m.k());
    for (auto& v : f) v = rng.normal();
    XTable pf = project_fused(m, f);
    XTable ppf = project_fused(m, pf);
    double worst = 0.0;
    for (std::size_t i = 0; i < pf.size(); ++i) worst = std::max(worst, std::abs(ppf[i] - pf[i]));
    CHECK(worst < 1e-8);
    CHECK(inner(m, pf, pf) <= inner(m, f, f) + 1e-10);
    // residual is orthogonal to every valid submodel score
    for (int rep = 0; rep < 5; ++rep) {
      TangentScore h = random_tangent_score(m, rng);
      XTable hx = h.as_xtable(m);
      XTable resid(f.size());
      for (std::size_t i = 0; i < f.size(); ++i) resid[i] = f[i] - pf[i];
      CHECK(inner(m, resid, hx) == doctest::Approx(0.0).epsilon(1e-8).scale(1.0));
      // scores themselves are fixed points
      XTable ph = project_fused(m, hx);
      double dev = 0.0;
      for (std::size_t i = 0; i < hx.size(); ++i) dev = std::max(dev, std::abs(ph[i] - hx[i]));
      CHECK(dev < 1e-8);
    }
    // centered pure-source functions lie in the tangent space
    XTable g(m.n_configs() * m.k(), 0.0);
    std::vector<double> gs(m.k());
    double mu = 0.0;
    for (int s = 1; s <= m.k(); ++s) {
      gs[s - 1] = s * 1.5 - 2.0;
      mu += m.p_source(s) * gs[s - 1];
    }
    for (long zi = 0; zi < m.n_configs(); ++zi)
      for (int s = 1; s <= m.k(); ++s) g[zi * m.k() + (s - 1)] = gs[s - 1] - mu;
    XTable pg = project_fused(m, g);
    double dev = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) dev = std::max(dev, std::abs(pg[i] - g[i]));
    CHECK(dev < 1e-8);
  }
}

TEST_CASE("with unrestricted classes the efficient gradient equals the lift") {
  for (const auto& id : {"nested", "itt", "ope", "qte"}) {
    CAPTURE(id);
    DiscreteModel m = make_discrete_toy(id);
    ZTable dq = mean_gradient(m, default_g(m));
    GradientComponents c = decompose(m, dq);
    XTable l = lift(m, c), e = canonical(m, c);
    for (std::size_t i = 0; i < l.size(); ++i)
      CHECK(e[i] == doctest::Approx(l[i]).epsilon(1e-10).scale(1.0));
  }
}

TEST_CASE("a restricted class strictly reduces the gradient variance") {
  DiscreteModel m = make_discrete_toy("dag");
  // the last coordinate only depends on its parent, so the interaction with
  // the non-parent coordinate is pure noise the restricted class removes
  ZTable g(m.n_configs());
  for (long zi = 0; zi < m.n_configs(); ++zi) {
    auto v = m.values(zi, m.d());
    g[zi] = v[0] * v.back();
  }
  ZTable dq = mean_gradient(m, g);
  GradientComponents c = decompose(m, dq);
  XTable l = lift(m, c), e = canonical(m, c);
  double vl = m.var(l), ve = m.var(e);
  CHECK(ve <= vl + 1e-12);
  CHECK(ve < vl * 0.99);  // strict gain from the conditional-independence class
  CHECK(m.expect(e) == doctest::Approx(0.0).epsilon(1e-10).scale(1.0));
}

TEST_CASE("nested fusion sets reproduce the augmented complete-case form") {
  DiscreteModel m = make_discrete_toy("nested");
  ZTable dq = mean_gradient(m, default_g(m));
  GradientComponents c = decompose(m, dq);
  CHECK(nested_fusion_identity_max_dev(m, c) < 1e-10);
}

TEST_CASE("pathwise derivative identity along valid submodels") {
  for (const auto& id : {"nested", "dag"}) {
    CAPTURE(id);
    DiscreteModel m = make_discrete_toy(id);
    ZTable g = default_g(m);
    ZTable dq = mean_gradient(m, g);
    XTable e = canonical(m, decompose(m, dq));
    auto phi = [&](const DiscreteModel& mp) { return mp.target_expect(g); };
    Rng rng(777, 1);
    double worst = 0.0, biggest = 0.0;
    for (int rep = 0; rep < 6; ++rep) {
      TangentScore h = random_tangent_score(m, rng);
      PathwiseResult r = pathwise_oracle(m, phi, e, h);
      worst = std::max(worst, r.mismatch);
      biggest = std::max(biggest, std::abs(r.derivative));
    }
    CHECK(worst < 1e-6);
    CHECK(biggest > 1e-3);  // the submodels genuinely move the functional
    // a corrupted gradient is caught
    XTable bad = e;
    for (auto& v : bad) v *= 1.05;
    Rng rng2(777, 1);
    double gap = 0.0;
    for (int rep = 0; rep < 6; ++rep) {
      TangentScore h = random_tangent_score(m, rng2);
      PathwiseResult r = pathwise_oracle(m, phi, bad, h);
      gap = std::max(gap, r.mismatch);
    }
    CHECK(gap > 1e-3);
  }
}

TEST_CASE("alignment-breaking directions do not move the functional") {
  DiscreteModel m = make_discrete_toy("nested");
  ZTable g = default_g(m);
  XTable e = canonical(m, decompose(m, mean_gradient(m, g)));
  auto phi = [&](const DiscreteModel& mp) { return mp.target_expect(g); };
  Rng rng(99, 4);
  for (int rep = 0; rep < 3; ++rep) {
    TangentScore h = alignment_breaking_score(m, rng);
    XTable hx = h.as_xtable(m);
    CHECK(m.expect(hx) == doctest::Approx(0.0).epsilon(1e-10).scale(1.0));
    PathwiseResult r = pathwise_oracle(m, phi, e, h);
    CHECK(std::abs(r.inner) < 1e-8);
    CHECK(std::abs(r.derivative) < 1e-6);
  }
}
