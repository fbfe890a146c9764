#include "fusion/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fusion {

namespace {
const ModelClass kNonparametric{};
}

const ModelClass& FusionSpec::class_at(int j) const {
  auto it = model_class.find(j);
  return it == model_class.end() ? kNonparametric : it->second;
}

std::vector<Violation> validate(const FusedDataset& dataset) {
  std::vector<Violation> out;
  const FusionSpec& spec = dataset.spec;

  if (spec.d <= 0) out.push_back({std::nullopt, "spec: d must be positive"});
  if (spec.k <= 0) out.push_back({std::nullopt, "spec: k must be positive"});
  for (int j : spec.relevant) {
    if (j < 1 || j > spec.d) {
      out.push_back({std::nullopt, "spec: relevant index j=" + std::to_string(j) + " outside 1..d"});
      continue;
    }
    auto it = spec.fusion_sets.find(j);
    if (it == spec.fusion_sets.end() || it->second.empty()) {
      out.push_back({std::nullopt, "spec: empty fusion set at j=" + std::to_string(j)});
      continue;
    }
    for (int s : it->second)
      if (s < 1 || s > spec.k)
        out.push_back({std::nullopt, "spec: fusion set at j=" + std::to_string(j) +
                                         " references source " + std::to_string(s) + " outside 1..k"});
  }
  for (const auto& [j, mc] : spec.model_class) {
    if (!spec.is_relevant(j))
      out.push_back({std::nullopt, "spec: model class given for non-relevant j=" + std::to_string(j)});
    if (mc.kind == ModelKind::DAGParents)
      for (int p : mc.parents)
        if (p < 1 || p >= j)
          out.push_back({std::nullopt, "spec: DAG parent " + std::to_string(p) +
                                           " of j=" + std::to_string(j) + " is not an earlier coordinate"});
    if (mc.kind == ModelKind::RepeatedMeasures && mc.repeats < 2)
      out.push_back({std::nullopt, "spec: repeated-measures count at j=" + std::to_string(j) + " must be >= 2"});
  }

  std::vector<bool> seen(static_cast<size_t>(std::max(spec.k, 0)) + 1, false);
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    const ObservationRecord& rec = dataset.records[i];
    if (static_cast<int>(rec.z.size()) != spec.d)
      out.push_back({i, "record has " + std::to_string(rec.z.size()) + " slots, expected d=" +
                            std::to_string(spec.d)});
    if (rec.s < 1 || rec.s > spec.k) {
      out.push_back({i, "source label s=" + std::to_string(rec.s) + " outside 1..k"});
      continue;
    }
    seen[rec.s] = true;
    if (!(rec.w >= 0.0)) out.push_back({i, "negative or non-finite weight"});
    for (int j : spec.relevant) {
      if (!spec.in_fusion_set(rec.s, j)) continue;
      for (int m = 1; m <= j && m <= static_cast<int>(rec.z.size()); ++m)
        if (!rec.z[m - 1].has_value()) {
          out.push_back({i, "history missing at j=" + std::to_string(m) +
                                " for source aligned at coordinate " + std::to_string(j)});
          break;
        }
    }
  }
  for (const auto& [j, set] : spec.fusion_sets)
    for (int s : set)
      if (s >= 1 && s <= spec.k && !seen[s] && !dataset.records.empty())
        out.push_back({std::nullopt, "no records from source " + std::to_string(s) +
                                         " referenced by fusion set at j=" + std::to_string(j)});
  return out;
}

std::vector<std::size_t> pooled_indices(const FusedDataset& dataset, int j) {
  if (!dataset.spec.is_relevant(j))
    throw std::invalid_argument("pooled_indices: j=" + std::to_string(j) + " is not a relevant index");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < dataset.records.size(); ++i)
    if (dataset.spec.in_fusion_set(dataset.records[i].s, j)) idx.push_back(i);
  return idx;
}

FusedDataset pooled_rows(const FusedDataset& dataset, int j) {
  FusedDataset out;
  out.spec = dataset.spec;
  out.columns = dataset.columns;
  for (std::size_t i : pooled_indices(dataset, j)) out.records.push_back(dataset.records[i]);
  return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  cells.push_back(cur);
  return cells;
}

bool is_missing_cell(const std::string& cell) {
  return cell.empty() || cell == "NA" || cell == "nan" || cell == "NaN";
}

bool parse_number(const std::string& cell, double& out) {
  try {
    size_t pos = 0;
    out = std::stod(cell, &pos);
    while (pos < cell.size() && std::isspace(static_cast<unsigned char>(cell[pos]))) ++pos;
    if (pos != cell.size()) return false;
    if (std::isnan(out)) return false;  // NaN normalizes to MISSING upstream
    return true;
  } catch (...) {
    return false;
  }
}

}  // namespace

FusedDataset read_csv(const std::string& path, const FusionSpec& spec) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open data file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty data file: " + path);
  std::vector<std::string> header = split_csv_line(line);

  int s_col = -1, w_col = -1;
  std::vector<int> z_col(spec.d, -1);
  for (size_t c = 0; c < header.size(); ++c) {
    const std::string& name = header[c];
    if (name == "s") s_col = static_cast<int>(c);
    else if (name == "w") w_col = static_cast<int>(c);
    else if (name.size() >= 2 && name[0] == 'z') {
      int j = std::atoi(name.c_str() + 1);
      if (j >= 1 && j <= spec.d) z_col[j - 1] = static_cast<int>(c);
    }
  }
  if (s_col < 0) throw std::runtime_error("data file lacks required column 's'");
  for (int j = 1; j <= spec.d; ++j)
    if (z_col[j - 1] < 0) throw std::runtime_error("data file lacks column z" + std::to_string(j));

  std::vector<std::vector<std::string>> raw;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    raw.push_back(split_csv_line(line));
  }

  FusedDataset out;
  out.spec = spec;
  out.columns.resize(spec.d);
  for (int j = 0; j < spec.d; ++j) out.columns[j].name = "z" + std::to_string(j + 1);

  // Numeric/categorical detection per z-column.
  std::vector<bool> numeric(spec.d, true);
  for (const auto& row : raw)
    for (int j = 0; j < spec.d; ++j) {
      if (static_cast<size_t>(z_col[j]) >= row.size()) continue;
      const std::string& cell = row[z_col[j]];
      double v;
      if (!is_missing_cell(cell) && !parse_number(cell, v)) numeric[j] = false;
    }
  std::vector<std::map<std::string, int>> dict(spec.d);

  for (std::size_t r = 0; r < raw.size(); ++r) {
    const auto& row = raw[r];
    ObservationRecord rec;
    rec.z.resize(spec.d);
    for (int j = 0; j < spec.d; ++j) {
      if (static_cast<size_t>(z_col[j]) >= row.size()) continue;
      const std::string& cell = row[z_col[j]];
      if (is_missing_cell(cell)) continue;
      if (numeric[j]) {
        double v;
        if (!parse_number(cell, v))
          throw std::runtime_error("row " + std::to_string(r + 2) + ": bad numeric cell '" + cell + "'");
        rec.z[j] = v;
      } else {
        auto [it, inserted] = dict[j].emplace(cell, static_cast<int>(dict[j].size()));
        if (inserted) out.columns[j].levels.push_back(cell);
        out.columns[j].categorical = true;
        rec.z[j] = static_cast<double>(it->second);
      }
    }
    if (static_cast<size_t>(s_col) >= row.size() || is_missing_cell(row[s_col]))
      throw std::runtime_error("row " + std::to_string(r + 2) + ": missing source label");
    double sv;
    if (!parse_number(row[s_col], sv))
      throw std::runtime_error("row " + std::to_string(r + 2) + ": bad source label");
    rec.s = static_cast<int>(std::lround(sv));
    if (w_col >= 0 && static_cast<size_t>(w_col) < row.size() && !is_missing_cell(row[w_col])) {
      double wv;
      if (!parse_number(row[w_col], wv))
        throw std::runtime_error("row " + std::to_string(r + 2) + ": bad weight");
      rec.w = wv;
    }
    out.records.push_back(std::move(rec));
  }
  return out;
}

FusionSpec spec_from_json(const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  FusionSpec spec;
  spec.d = j.at("d").get<int>();
  spec.k = j.at("k").get<int>();
  spec.relevant = j.at("J").get<std::vector<int>>();
  std::sort(spec.relevant.begin(), spec.relevant.end());
  for (auto& [key, val] : j.at("fusion_sets").items()) {
    int idx = std::stoi(key);
    auto set = val.get<std::vector<int>>();
    std::sort(set.begin(), set.end());
    spec.fusion_sets[idx] = set;
  }
  if (j.contains("model_class")) {
    for (auto& [key, val] : j["model_class"].items()) {
      int idx = std::stoi(key);
      std::string kind = val.is_string() ? val.get<std::string>() : val.at("kind").get<std::string>();
      if (kind == "locally_nonparametric") {
        spec.model_class[idx] = ModelClass::nonparametric();
      } else if (kind == "repeated_measures") {
        spec.model_class[idx] = ModelClass::repeated_measures(val.at("r").get<int>());
      } else if (kind == "dag_parents") {
        spec.model_class[idx] = ModelClass::dag_parents(val.at("parents").get<std::vector<int>>());
      } else if (kind == "symmetric_location") {
        spec.model_class[idx] = ModelClass::symmetric_location(nullptr);
      } else {
        throw std::runtime_error("unknown model class kind in config: " + kind);
      }
    }
  }
  return spec;
}

}  // namespace fusion
