#include "fusion/tangent.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fusion/common.hpp"
#include "fusion/discrete.hpp"

namespace fusion {

namespace {

constexpr double kMatchTol = 1e-9;

bool close(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (std::abs(a[i] - b[i]) > kMatchTol) return false;
  return true;
}

std::vector<double> concat(const std::vector<double>& h, const std::vector<double>& a) {
  std::vector<double> out = h;
  out.insert(out.end(), a.begin(), a.end());
  return out;
}

}  // namespace

int CoordinateDist::find_history(const std::vector<double>& h) const {
  for (size_t i = 0; i < histories.size(); ++i)
    if (close(histories[i], h)) return static_cast<int>(i);
  return -1;
}

int CoordinateDist::find_atom(const std::vector<double>& a) const {
  for (size_t i = 0; i < atoms.size(); ++i)
    if (close(atoms[i], a)) return static_cast<int>(i);
  return -1;
}

namespace {

// Splits a flattened z̄_j into (history, atom) against the reference shapes.
void split_point(const CoordinateDist& ref, const std::vector<double>& zbar,
                 std::vector<double>& hist, std::vector<double>& atom) {
  size_t alen = ref.atoms.empty() ? 1 : ref.atoms[0].size();
  if (zbar.size() < alen) throw std::invalid_argument("projection input shorter than the coordinate atom");
  hist.assign(zbar.begin(), zbar.end() - static_cast<long>(alen));
  atom.assign(zbar.end() - static_cast<long>(alen), zbar.end());
}

double cond_inner(const CoordinateDist& ref, int h,
                  const std::function<double(const std::vector<double>&)>& u,
                  const std::function<double(const std::vector<double>&)>& v) {
  double acc = 0.0;
  for (size_t a = 0; a < ref.atoms.size(); ++a) {
    double p = ref.cond(h, static_cast<Eigen::Index>(a));
    if (p <= 0.0) continue;
    std::vector<double> z = concat(ref.histories[h], ref.atoms[a]);
    acc += p * u(z) * v(z);
  }
  return acc;
}

double cond_mean(const CoordinateDist& ref, int h,
                 const std::function<double(const std::vector<double>&)>& u) {
  return cond_inner(ref, h, u, [](const std::vector<double>&) { return 1.0; });
}

std::vector<std::vector<int>> permutations_of(int r, std::size_t cap) {
  std::vector<int> idx(r);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<std::vector<int>> perms;
  do {
    perms.push_back(idx);
    if (perms.size() >= cap) break;
  } while (std::next_permutation(idx.begin(), idx.end()));
  return perms;
}

}  // namespace

double max_conditional_mean(const CoordinateFunction& f, const CoordinateDist& ref) {
  double worst = 0.0;
  for (size_t h = 0; h < ref.histories.size(); ++h)
    if (ref.hist_weights[h] > 0.0)
      worst = std::max(worst, std::abs(cond_mean(ref, static_cast<int>(h), f.eval)));
  return worst;
}

CoordinateFunction project(const CoordinateFunction& f, const ModelClass& model,
                           std::shared_ptr<const CoordinateDist> ref) {
  CoordinateFunction out;
  out.j = f.j;
  auto fe = f.eval;

  switch (model.kind) {
    case ModelKind::LocallyNonparametric:
      out.eval = fe;
      return out;

    case ModelKind::ConditionalMomentRestriction: {
      auto g0 = model.g0;
      if (!g0) throw std::invalid_argument("moment-restriction class lacks its g0 function");
      out.eval = [fe, g0, ref](const std::vector<double>& zbar) {
        std::vector<double> hist, atom;
        split_point(*ref, zbar, hist, atom);
        int h = ref->find_history(hist);
        if (h < 0) throw std::runtime_error("projection query at an unseen history");
        double num = cond_inner(*ref, h, fe, g0);
        double den = cond_inner(*ref, h, g0, g0);
        if (den <= 1e-14) return fe(zbar);  // restriction vacuous at this history
        return fe(zbar) - (num / den) * g0(zbar);
      };
      return out;
    }

    case ModelKind::RepeatedMeasures: {
      int r = model.repeats;
      std::size_t cap = r <= 6 ? static_cast<std::size_t>(-1) : 720;
      auto perms = std::make_shared<std::vector<std::vector<int>>>(permutations_of(r, cap));
      out.eval = [fe, r, perms](const std::vector<double>& zbar) {
        if (static_cast<int>(zbar.size()) < r)
          throw std::invalid_argument("repeated-measures point shorter than the replicate block");
        size_t base = zbar.size() - static_cast<size_t>(r);
        double acc = 0.0;
        std::vector<double> z = zbar;
        for (const auto& perm : *perms) {
          for (int i = 0; i < r; ++i) z[base + i] = zbar[base + perm[i]];
          acc += fe(z);
        }
        return acc / static_cast<double>(perms->size());
      };
      return out;
    }

    case ModelKind::DAGParents: {
      auto parents = model.parents;
      out.eval = [fe, parents, ref](const std::vector<double>& zbar) {
        std::vector<double> hist, atom;
        split_point(*ref, zbar, hist, atom);
        int a0 = ref->find_atom(atom);
        if (a0 < 0) throw std::runtime_error("projection query at an unseen atom");
        auto pa_of = [&parents](const std::vector<double>& h) {
          std::vector<double> pa;
          for (int p : parents) pa.push_back(h[p - 1]);
          return pa;
        };
        std::vector<double> pa0 = pa_of(hist);
        // E[f | z_j = atom, pa] and E[f | pa] under the joint (history, atom) law.
        double num_a = 0.0, den_a = 0.0, num_p = 0.0, den_p = 0.0;
        for (size_t h = 0; h < ref->histories.size(); ++h) {
          if (ref->hist_weights[h] <= 0.0 || !close(pa_of(ref->histories[h]), pa0)) continue;
          for (size_t a = 0; a < ref->atoms.size(); ++a) {
            double wgt = ref->hist_weights[h] * ref->cond(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(a));
            if (wgt <= 0.0) continue;
            double v = fe(concat(ref->histories[h], ref->atoms[a]));
            num_p += wgt * v;
            den_p += wgt;
            if (static_cast<int>(a) == a0) {
              num_a += wgt * v;
              den_a += wgt;
            }
          }
        }
        double ea = den_a > 0.0 ? num_a / den_a : 0.0;
        double ep = den_p > 0.0 ? num_p / den_p : 0.0;
        return ea - ep;
      };
      return out;
    }

    case ModelKind::SymmetricLocation: {
      auto center = model.center;
      auto score = model.score;
      out.eval = [fe, center, score, ref](const std::vector<double>& zbar) {
        std::vector<double> hist, atom;
        split_point(*ref, zbar, hist, atom);
        if (atom.size() != 1) throw std::invalid_argument("symmetric-location coordinate must be scalar");
        int h = ref->find_history(hist);
        if (h < 0) throw std::runtime_error("projection query at an unseen history");
        double g;
        if (center) {
          g = center(hist);
        } else {
          // Conditional mean equals the center under symmetry.
          g = cond_mean(*ref, h, [&ref](const std::vector<double>& z) { return z.back(); });
        }
        // Even part: reflect the coordinate about the center.
        std::vector<double> reflected = hist;
        reflected.push_back(2.0 * g - atom[0]);
        double even = 0.5 * (fe(zbar) + fe(reflected));
        if (!score) return even;
        auto ell = [&score](const std::vector<double>& z) { return score(z)(0); };
        double info = cond_inner(*ref, h, ell, ell);
        if (info <= 1e-12) info = 1e-12;  // information floor
        double coef = cond_inner(*ref, h, fe, ell) / info;
        return coef * ell(zbar) + even;
      };
      return out;
    }

    case ModelKind::ParametricScoreFamily: {
      auto score = model.score;
      int c = model.score_dim;
      if (!score || c <= 0) throw std::invalid_argument("score-family class lacks its score function");
      // Unconditional moments under the joint reference law.
      Mat A = Mat::Zero(c, c);
      Vec b = Vec::Zero(c);
      for (size_t h = 0; h < ref->histories.size(); ++h) {
        if (ref->hist_weights[h] <= 0.0) continue;
        for (size_t a = 0; a < ref->atoms.size(); ++a) {
          double wgt = ref->hist_weights[h] * ref->cond(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(a));
          if (wgt <= 0.0) continue;
          std::vector<double> z = concat(ref->histories[h], ref->atoms[a]);
          Vec l = score(z);
          A += wgt * l * l.transpose();
          b += wgt * l * fe(z);
        }
      }
      Eigen::FullPivLU<Mat> lu(A);
      if (lu.rank() < c) {
        std::string which;
        for (int i = 0; i < c; ++i)
          if (A(i, i) <= 1e-12) which += (which.empty() ? "" : ",") + std::to_string(i);
        throw std::runtime_error("singular score second-moment matrix (degenerate components: " +
                                 (which.empty() ? std::string("linear dependence") : which) + ")");
      }
      Vec coef = lu.solve(b);
      out.eval = [score, coef](const std::vector<double>& zbar) { return coef.dot(score(zbar)); };
      return out;
    }
  }
  throw std::logic_error("unreachable model kind");
}

std::vector<std::vector<double>> tangent_basis(const ModelClass& model, const CoordinateDist& ref) {
  const size_t H = ref.histories.size(), A = ref.atoms.size();
  auto table_of = [&](const std::function<double(const std::vector<double>&)>& u) {
    std::vector<double> t(H * A, 0.0);
    for (size_t h = 0; h < H; ++h)
      for (size_t a = 0; a < A; ++a)
        if (ref.hist_weights[h] > 0.0 && ref.cond(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(a)) > 0.0)
          t[h * A + a] = u(concat(ref.histories[h], ref.atoms[a]));
    return t;
  };

  // Start from a spanning set of L²₀ of the conditional: per-history centered
  // atom indicators.
  std::vector<std::vector<double>> raw;
  auto refp = std::make_shared<CoordinateDist>(ref);
  for (size_t h0 = 0; h0 < H; ++h0) {
    if (ref.hist_weights[h0] <= 0.0) continue;
    for (size_t a0 = 0; a0 < A; ++a0) {
      double p0 = ref.cond(static_cast<Eigen::Index>(h0), static_cast<Eigen::Index>(a0));
      if (p0 <= 0.0) continue;
      auto hist0 = ref.histories[h0];
      auto atom0 = ref.atoms[a0];
      CoordinateFunction f;
      f.j = ref.j;
      f.eval = [hist0, atom0, p0, alen = atom0.size()](const std::vector<double>& zbar) {
        std::vector<double> h(zbar.begin(), zbar.end() - static_cast<long>(alen));
        std::vector<double> a(zbar.end() - static_cast<long>(alen), zbar.end());
        if (!close(h, hist0)) return 0.0;
        return (close(a, atom0) ? 1.0 : 0.0) - p0;
      };
      // Projecting the spanning set of the nonparametric tangent space yields
      // a spanning set of the restricted tangent space.
      CoordinateFunction pf = project(f, model, refp);
      raw.push_back(table_of(pf.eval));
    }
  }
  return raw;
}

std::shared_ptr<CoordinateDist> coordinate_dist(const DiscreteModel& m, int j) {
  auto ref = std::make_shared<CoordinateDist>();
  ref->j = j;
  ref->atoms = m.support[j - 1];
  const auto& marg = m.target_prefix_marginal(j - 1);
  const auto& tc = m.target_cond(j);
  long np = m.n_prefix(j - 1);
  int na = m.size(j);
  for (long h = 0; h < np; ++h) {
    // Keep every enumerated history (including zero-mass ones) so lookups by
    // value always resolve; weights carry the support information.
    std::vector<double> hv;
    long rem = h;
    // Decode prefix h into atom indices (most significant coordinate first).
    std::vector<int> idx(j - 1, 0);
    for (int mcoord = j - 1; mcoord >= 1; --mcoord) {
      idx[mcoord - 1] = static_cast<int>(rem % m.size(mcoord));
      rem /= m.size(mcoord);
    }
    for (int mcoord = 1; mcoord <= j - 1; ++mcoord) {
      const auto& atom = m.support[mcoord - 1][idx[mcoord - 1]];
      hv.insert(hv.end(), atom.begin(), atom.end());
    }
    ref->histories.push_back(hv);
    ref->hist_weights.push_back(marg[h]);
  }
  ref->cond.resize(np, na);
  for (long h = 0; h < np; ++h)
    for (int a = 0; a < na; ++a) ref->cond(h, a) = tc[h * na + a];
  return ref;
}

}  // namespace fusion
