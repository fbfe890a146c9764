#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fusion/common.hpp"

namespace fusion {

// A slot is either a numeric value (reals and categorical codes alike) or
// structurally missing. Missingness is a dedicated state, not a NaN pun;
// NaN/"NA"/empty cells are normalized to this on CSV ingest.
using Slot = std::optional<double>;

struct ObservationRecord {
  std::vector<Slot> z;
  int s = 1;      // source label in 1..k
  double w = 1.0; // sampling weight

  // True when slots 1..j (1-based) are all present.
  bool observed_through(int j) const {
    if (j > static_cast<int>(z.size())) return false;
    for (int i = 0; i < j; ++i)
      if (!z[i].has_value()) return false;
    return true;
  }
};

enum class ModelKind {
  LocallyNonparametric,
  ConditionalMomentRestriction,
  RepeatedMeasures,
  DAGParents,
  SymmetricLocation,
  ParametricScoreFamily,
};

// Restriction placed on the conditional law of Z_j given its history. The
// functional parameters take the flattened history-plus-value vector z̄_j
// (for RepeatedMeasures, coordinate j itself may occupy several entries).
struct ModelClass {
  ModelKind kind = ModelKind::LocallyNonparametric;
  // ConditionalMomentRestriction: E[g0(Z̄_j) | Z̄_{j-1}] = 0.
  std::function<double(const std::vector<double>&)> g0;
  // RepeatedMeasures: coordinate j is an exchangeable r-vector.
  int repeats = 0;
  // DAGParents: Z_j independent of non-parents given parents (1-based, < j).
  std::vector<int> parents;
  // SymmetricLocation: law of Z_j symmetric about center(z̄_{j-1}).
  std::function<double(const std::vector<double>&)> center;
  // ParametricScoreFamily: score vector ℓ(z̄_j) of dimension score_dim.
  int score_dim = 0;
  std::function<Vec(const std::vector<double>&)> score;

  static ModelClass nonparametric() { return {}; }
  static ModelClass moment_restriction(std::function<double(const std::vector<double>&)> g) {
    ModelClass m;
    m.kind = ModelKind::ConditionalMomentRestriction;
    m.g0 = std::move(g);
    return m;
  }
  static ModelClass repeated_measures(int r) {
    ModelClass m;
    m.kind = ModelKind::RepeatedMeasures;
    m.repeats = r;
    return m;
  }
  static ModelClass dag_parents(std::vector<int> pa) {
    ModelClass m;
    m.kind = ModelKind::DAGParents;
    m.parents = std::move(pa);
    return m;
  }
  static ModelClass symmetric_location(std::function<double(const std::vector<double>&)> g) {
    ModelClass m;
    m.kind = ModelKind::SymmetricLocation;
    m.center = std::move(g);
    return m;
  }
  static ModelClass score_family(int dim, std::function<Vec(const std::vector<double>&)> ell) {
    ModelClass m;
    m.kind = ModelKind::ParametricScoreFamily;
    m.score_dim = dim;
    m.score = std::move(ell);
    return m;
  }
};

struct FusionSpec {
  int d = 0;
  int k = 0;
  std::vector<int> relevant;                    // 𝒥, sorted ascending, 1-based
  std::map<int, std::vector<int>> fusion_sets;  // j ∈ 𝒥 → sorted source list
  std::map<int, ModelClass> model_class;        // j ∈ 𝒥 (absent → nonparametric)

  bool is_relevant(int j) const {
    for (int r : relevant)
      if (r == j) return true;
    return false;
  }
  std::vector<int> irrelevant() const {
    std::vector<int> out;
    for (int j = 1; j <= d; ++j)
      if (!is_relevant(j)) out.push_back(j);
    return out;
  }
  bool in_fusion_set(int s, int j) const {
    auto it = fusion_sets.find(j);
    if (it == fusion_sets.end()) return false;
    for (int v : it->second)
      if (v == s) return true;
    return false;
  }
  const ModelClass& class_at(int j) const;
};

struct ColumnMeta {
  std::string name;
  bool categorical = false;
  std::vector<std::string> levels;  // dictionary for categorical codes
};

struct FusedDataset {
  std::vector<ObservationRecord> records;
  FusionSpec spec;
  std::vector<ColumnMeta> columns;
};

struct Violation {
  std::optional<std::size_t> record;  // absent for spec-level violations
  std::string rule;
};

// Structural validation: spec well-formedness plus per-record invariants
// (source range, weight sign, observed history for aligned sources, at least
// one record per source referenced by a fusion set). Pure; violations are
// data, not exceptions.
std::vector<Violation> validate(const FusedDataset& dataset);

// Rows whose source belongs to 𝒮_j, order preserved. Throws if j ∉ 𝒥.
std::vector<std::size_t> pooled_indices(const FusedDataset& dataset, int j);
FusedDataset pooled_rows(const FusedDataset& dataset, int j);

// CSV with header z1..zd,s[,w]; missing cells empty or "NA"; non-numeric
// columns get integer codes with the dictionary kept in column metadata.
FusedDataset read_csv(const std::string& path, const FusionSpec& spec);

// FusionSpec from a JSON config object (keys d, k, J, fusion_sets,
// model_class). Model classes that need function parameters are referenced
// by built-in names.
FusionSpec spec_from_json(const std::string& json_text);

}  // namespace fusion
