#pragma once

#include <memory>

#include "fusion/data.hpp"

namespace fusion {

class DiscreteModel;

// Finite weighted representation of a reference conditional law at
// coordinate j: the marginal of the history z̄_{j-1} plus the conditional
// distribution of the coordinate's atoms given each history. Exact for
// discrete models; the continuous estimators use specialized closed forms
// instead of this representation.
struct CoordinateDist {
  int j = 1;
  std::vector<std::vector<double>> atoms;      // coordinate values (possibly multi-component)
  std::vector<std::vector<double>> histories;  // flattened z̄_{j-1} values
  std::vector<double> hist_weights;            // marginal masses, sum 1
  Mat cond;                                    // histories × atoms

  int find_history(const std::vector<double>& h) const;
  int find_atom(const std::vector<double>& a) const;
};

// Candidate element of L²₀ of the reference conditional: a function of the
// flattened z̄_j (history followed by the coordinate's atom values).
struct CoordinateFunction {
  int j = 1;
  std::function<double(const std::vector<double>&)> eval;
};

// Verifies (by enumeration over the reference) that f is conditionally
// centered; returns the max |E[f | history]| over histories.
double max_conditional_mean(const CoordinateFunction& f, const CoordinateDist& ref);

// Projection of f onto the tangent space of the model class at coordinate j,
// relative to the reference conditional:
//   - LocallyNonparametric: identity.
//   - ConditionalMomentRestriction(g0): f − (E[g0·f|·]/E[g0²|·])·g0.
//   - RepeatedMeasures(r): average of f over permutations of the replicate
//     block (all r! for r ≤ 6, else 720 sampled deterministically).
//   - DAGParents(L): E[f|z_j, parents] − E[f|parents].
//   - SymmetricLocation: E[f·ℓ|·]·ℓ/I + (f(z) + f(z̃))/2 with z̃ the
//     reflection about the center; the center defaults to the conditional
//     mean under the reference, ℓ must be supplied via ModelClass::score
//     (omit it to project onto the even part alone).
//   - ParametricScoreFamily(ℓ): (E[ℓℓᵀ]⁻¹E[ℓf])ᵀℓ; singular E[ℓℓᵀ] is an
//     error naming the degenerate components.
CoordinateFunction project(const CoordinateFunction& f, const ModelClass& model,
                           std::shared_ptr<const CoordinateDist> ref);

// A spanning set of the tangent subspace at coordinate j, each element given
// as a table over (history, atom) pairs [h * n_atoms + a]. Used by the
// enumeration oracles (orthogonality checks, least-squares projections).
std::vector<std::vector<double>> tangent_basis(const ModelClass& model, const CoordinateDist& ref);

// Reference conditional of the induced target distribution θ(P) of a
// discrete model at coordinate j.
std::shared_ptr<CoordinateDist> coordinate_dist(const DiscreteModel& m, int j);

}  // namespace fusion
