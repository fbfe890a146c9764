#pragma once

#include "fusion/discrete.hpp"
#include "fusion/tangent.hpp"

namespace fusion {

// Coordinate decomposition of a target-distribution gradient: component j is
// a function of z̄_j with zero conditional mean given z̄_{j-1}, stored on the
// full configuration grid.
struct GradientComponents {
  std::vector<int> js;         // relevant coordinates, ascending
  std::vector<ZTable> comp;    // aligned with js
};

// comp_j = E_Q[D|z̄_j] − E_Q[D|z̄_{j-1}] under the induced target
// distribution, for each relevant j.
GradientComponents decompose(const DiscreteModel& m, const ZTable& d_q);

// Observed-data gradient: Σ_j 1(s∈𝒮_j)/P(S∈𝒮_j)·λ_{j-1}(z̄_{j-1})·comp_j(z̄_j).
// λ is zero off the target support, which carries the support indicator.
XTable lift(const DiscreteModel& m, const GradientComponents& c);

// Γ_j(f)(z̄_j) = 1_support(z̄_{j-1})·{E[f|z̄_j,S∈𝒮_j] − E[f|z̄_{j-1},S∈𝒮_j]};
// returned over prefixes of length j.
std::vector<double> gamma_j(const DiscreteModel& m, const XTable& f, int j);

// Projection of an arbitrary square-integrable f(z,s) onto the fused tangent
// space: per-(z̄_j,s) stratum projections plus the aligned-coordinate
// correction that swaps in the target-model projection of Γ_j(f).
XTable project_fused(const DiscreteModel& m, const XTable& f);

// Canonical gradient: Σ_j 1_support·1(s∈𝒮_j)/P(S∈𝒮_j)·Π{λ_{j-1}·comp_j | 𝒯_j}(z̄_j),
// with Π the model-class projection at coordinate j.
XTable canonical(const DiscreteModel& m, const GradientComponents& c);

// For nested fusion sets covering every coordinate, the canonical gradient
// coincides with the influence function of an augmented inverse probability
// weighted complete-case estimator built from the full-data gradient.
// Returns the maximum pointwise deviation over positive-probability cells.
double nested_fusion_identity_max_dev(const DiscreteModel& m, const GradientComponents& c);

struct PathwiseResult {
  double derivative = 0.0;  // Richardson-extrapolated central difference
  double inner = 0.0;       // E_P[D·h]
  double mismatch = 0.0;
};

// Checks the pathwise-derivative identity dφ(P_ε)/dε|₀ = E_P[D·h] by central
// differences over the ε grid with Richardson extrapolation on the two
// smallest levels.
PathwiseResult pathwise_oracle(const DiscreteModel& m,
                               const std::function<double(const DiscreteModel&)>& phi,
                               const XTable& d, const TangentScore& h,
                               std::vector<double> eps_grid = {1e-3, 5e-4, 1e-4});

// Random score of a valid submodel of the fused model: aligned sources move
// in lockstep along a model-class tangent direction on the target support,
// everything else is freely (conditionally centered) perturbed. Scaled so
// multiplicative perturbations stay positive on the whole grid.
TangentScore random_tangent_score(const DiscreteModel& m, Rng& rng);

// A direction orthogonal to the fused tangent space: two aligned sources at
// the last relevant coordinate move in opposite directions, leaving the
// pooled conditional unchanged at first order. Used as a regularity control.
TangentScore alignment_breaking_score(const DiscreteModel& m, Rng& rng);

}  // namespace fusion
