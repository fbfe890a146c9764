#pragma once

#include <string>

#include "fusion/data.hpp"

namespace fusion {

// Function tables on a finite model. A ZTable is indexed by the joint
// z-configuration (values may in fact depend only on a prefix); an XTable is
// indexed by (z-configuration, source) as zi * k + (s - 1).
using ZTable = std::vector<double>;
using XTable = std::vector<double>;

// Finite-support model of the observed data (Z, S), built from per-source
// conditional pmf tables. Aligned sources share a conditional table by
// construction, so sufficient alignment holds exactly and all expectations,
// projections, and pathwise derivatives can be enumerated.
//
// Configuration indexing is row-major with coordinate d varying fastest, so
// the prefix z̄_j of a configuration is its leading digits.
class DiscreteModel {
 public:
  FusionSpec spec;
  // support[j-1][a] = atom a of coordinate j; atoms are usually scalars but
  // may carry several components (exchangeable replicate blocks).
  std::vector<std::vector<std::vector<double>>> support;
  std::vector<double> s_probs;  // P(S = s), s = 1..k
  // cond[j-1][((s-1) * n_prefix(j-1) + h) * size(j) + a]
  //   = P(Z_j = atom a | Z̄_{j-1} = prefix h, S = s)
  std::vector<std::vector<double>> cond;

  // Assigns the same conditional table (indexed by [h * size(j) + a]) to the
  // listed sources; convenience for construction.
  void set_conditional(int j, const std::vector<int>& sources, const std::vector<double>& table);
  // Assigns to every source in the fusion set at j (aligned conditional).
  void set_aligned_conditional(int j, const std::vector<double>& table);
  // Assigns to every source not yet covered at coordinate j.
  void set_default_conditional(int j, const std::vector<double>& table);

  // Must be called after the tables are filled; computes the joint pmf, the
  // induced target distribution, density ratios, and support masks.
  void finalize();

  int d() const { return spec.d; }
  int k() const { return spec.k; }
  int size(int j) const { return static_cast<int>(support[j - 1].size()); }
  long n_configs() const { return n_prefix_[spec.d]; }
  long n_prefix(int j) const { return n_prefix_[j]; }  // j in 0..d

  long prefix_of(long zi, int j) const { return zi / suffix_[j]; }
  long first_config(int j, long h) const { return h * suffix_[j]; }
  int atom_at(long zi, int j) const { return static_cast<int>((zi / suffix_[j]) % size(j)); }
  long extend_prefix(long h, int j, int a) const { return h * size(j) + a; }

  // Flattened numeric values of z̄_j for a configuration.
  std::vector<double> values(long zi, int j) const;

  double joint(long zi, int s) const { return joint_[zi * spec.k + (s - 1)]; }
  double p_source(int s) const { return s_probs[s - 1]; }
  double p_fusion(int j) const;  // P(S ∈ 𝒮_j)

  // Induced target distribution θ(P): aligned pooled conditionals at relevant
  // coordinates, all-source pooled conditionals elsewhere.
  // target_cond(j): table over [h * size(j) + a].
  const std::vector<double>& target_cond(int j) const { return target_cond_[j - 1]; }
  double target_pmf(long zi) const;
  const std::vector<double>& target_prefix_marginal(int j) const { return target_prefix_[j]; }

  // λ_{j-1}: target marginal of Z̄_{j-1} over its conditional-on-𝒮_j law;
  // table over prefixes of length j-1 (0 off the target support).
  std::vector<double> lambda_table(int j) const;
  // Target-support mask for prefixes of length jm1.
  std::vector<char> support_mask(int jm1) const;

  // E_P[F], Var_P[F] over (Z, S).
  double expect(const XTable& f) const;
  double var(const XTable& f) const;

  // E_P[F | Z̄_j = h, S ∈ srcs] for every prefix h of length j (0 when the
  // conditioning event has no mass).
  std::vector<double> cond_expect(const XTable& f, int j, const std::vector<int>& srcs) const;
  // P(Z_j = a | Z̄_{j-1} = h, S ∈ srcs), table over [h * size(j) + a].
  std::vector<double> cond_density(int j, const std::vector<int>& srcs) const;
  // P(Z̄_j = h | S ∈ srcs) over prefixes of length j.
  std::vector<double> prefix_given_sources(int j, const std::vector<int>& srcs) const;

  // E_Q[G] and E_Q[G | Z̄_j = h] under the induced target distribution.
  double target_expect(const ZTable& g) const;
  std::vector<double> target_cond_expect(const ZTable& g, int j) const;

  // Lifts a table over prefixes of length j to a full ZTable.
  ZTable from_prefix(const std::vector<double>& t, int j) const;

  std::string to_json() const;
  static DiscreteModel from_json(const std::string& text);

 private:
  std::vector<long> n_prefix_;  // n_prefix_[j], j = 0..d
  std::vector<long> suffix_;    // configurations per unit of prefix length j
  std::vector<double> joint_;   // (zi, s)
  std::vector<std::vector<double>> target_cond_;
  std::vector<std::vector<double>> target_prefix_;  // [j] over prefixes of length j
};

// A score of a one-dimensional submodel through the model: a mean-zero
// perturbation of the source weights plus conditionally mean-zero
// perturbations of each conditional table. Scores synthesized for the fused
// model keep aligned sources in lockstep on the target support.
struct TangentScore {
  std::vector<double> s_score;                   // size k, Σ p_s · g(s) = 0
  std::vector<std::vector<double>> cond_score;   // same shapes as DiscreteModel::cond

  // Total score h(z, s) as an XTable.
  XTable as_xtable(const DiscreteModel& m) const;
};

// Model perturbed along the score: P_ε ∝ componentwise (1 + ε·score). Each
// factor stays exactly normalized because scores are conditionally centered;
// ε is shrunk automatically if positivity would fail (shrunk value reported).
DiscreteModel perturb(const DiscreteModel& m, const TangentScore& h, double eps, double* eps_used = nullptr);

}  // namespace fusion
