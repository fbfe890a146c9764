#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>

#include "fusion/data.hpp"

using namespace fusion;

namespace {

FusedDataset single_source(int n) {
  FusedDataset d;
  d.spec.d = 1;
  d.spec.k = 1;
  d.spec.relevant = {1};
  d.spec.fusion_sets = {{1, {1}}};
  for (int i = 0; i < n; ++i) {
    ObservationRecord r;
    r.z = {double(i)};
    r.s = 1;
    d.records.push_back(r);
  }
  return d;
}

std::string write_temp(const std::string& name, const std::string& text) {
  std::string path = "./" + name;
  std::ofstream out(path);
  out << text;
  return path;
}

}  // namespace

TEST_CASE("observed_through walks leading slots") {
  ObservationRecord r;
  r.z = {1.0, std::nullopt, 3.0};
  CHECK(r.observed_through(1));
  CHECK_FALSE(r.observed_through(2));
  CHECK_FALSE(r.observed_through(4));  // beyond d
  r.z[1] = 2.0;
  CHECK(r.observed_through(3));
}

TEST_CASE("validate flags a missing aligned history") {
  FusedDataset d;
  d.spec.d = 2;
  d.spec.k = 3;
  d.spec.relevant = {2};
  d.spec.fusion_sets = {{2, {3}}};
  ObservationRecord r;
  r.z = {1.0, std::nullopt};
  r.s = 3;
  d.records.push_back(r);
  auto v = validate(d);
  REQUIRE(v.size() == 1);
  CHECK(v[0].record == std::size_t{0});
  CHECK(v[0].rule.find("j=2") != std::string::npos);
}

TEST_CASE("validate passes a well-formed single-source dataset") {
  CHECK(validate(single_source(5)).empty());
}

TEST_CASE("validate reports an empty fusion set as a spec violation") {
  FusedDataset d = single_source(3);
  d.spec.fusion_sets[1] = {};
  auto v = validate(d);
  REQUIRE(!v.empty());
  CHECK_FALSE(v[0].record.has_value());
  CHECK(v[0].rule.find("empty fusion set") != std::string::npos);
}

TEST_CASE("validate catches out-of-range source labels and bad weights") {
  FusedDataset d = single_source(2);
  d.records[0].s = 7;
  d.records[1].w = -1.0;
  auto v = validate(d);
  bool saw_source = false, saw_weight = false;
  for (const auto& x : v) {
    if (x.rule.find("source label") != std::string::npos) saw_source = true;
    if (x.rule.find("weight") != std::string::npos) saw_weight = true;
  }
  CHECK(saw_source);
  CHECK(saw_weight);
}

TEST_CASE("validate is idempotent") {
  FusedDataset d = single_source(4);
  d.records[2].s = 9;
  auto a = validate(d);
  auto b = validate(d);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].rule == b[i].rule);
}

TEST_CASE("pooled rows select exactly the fusion-set sources") {
  FusedDataset d;
  d.spec.d = 3;
  d.spec.k = 2;
  d.spec.relevant = {1, 3};
  d.spec.fusion_sets = {{1, {1, 2}}, {3, {1}}};
  for (int i = 0; i < 6; ++i) {
    ObservationRecord r;
    r.z = {double(i), 0.0, 1.0};
    r.s = 1 + i % 2;
    d.records.push_back(r);
  }
  CHECK(pooled_indices(d, 1).size() == 6);
  auto idx = pooled_indices(d, 3);
  REQUIRE(idx.size() == 3);
  for (std::size_t i : idx) CHECK(d.records[i].s == 1);
  // partition property: selected plus complement cover every row once
  std::vector<bool> hit(d.records.size(), false);
  for (std::size_t i : idx) hit[i] = true;
  std::size_t rest = 0;
  for (std::size_t i = 0; i < d.records.size(); ++i)
    if (!hit[i]) ++rest;
  CHECK(idx.size() + rest == d.records.size());
  CHECK(pooled_rows(d, 3).records.size() == 3);
  CHECK_THROWS_AS((void)pooled_indices(d, 2), std::invalid_argument);
}

TEST_CASE("csv ingest: missing cells, weights, order") {
  FusionSpec spec;
  spec.d = 2;
  spec.k = 2;
  spec.relevant = {1};
  spec.fusion_sets = {{1, {1, 2}}};
  std::string path = write_temp("t_data_basic.csv",
                                "z1,z2,s,w\n"
                                "1.5,2.0,1,1.0\n"
                                ",NA,2,2.5\n"
                                "3.25,nan,1,\n");
  FusedDataset d = read_csv(path, spec);
  std::remove(path.c_str());
  REQUIRE(d.records.size() == 3);
  CHECK(*d.records[0].z[0] == doctest::Approx(1.5));
  CHECK(*d.records[0].z[1] == doctest::Approx(2.0));
  CHECK_FALSE(d.records[1].z[0].has_value());
  CHECK_FALSE(d.records[1].z[1].has_value());
  CHECK(d.records[1].w == doctest::Approx(2.5));
  CHECK_FALSE(d.records[2].z[1].has_value());  // nan normalizes to missing
  CHECK(d.records[2].w == doctest::Approx(1.0));
  CHECK(d.records[1].s == 2);
}

TEST_CASE("csv ingest: categorical column gets integer codes with a dictionary") {
  FusionSpec spec;
  spec.d = 2;
  spec.k = 1;
  spec.relevant = {2};
  spec.fusion_sets = {{2, {1}}};
  std::string path = write_temp("t_data_cat.csv",
                                "z1,z2,s\n"
                                "red,0,1\n"
                                "blue,1,1\n"
                                "red,0,1\n");
  FusedDataset d = read_csv(path, spec);
  std::remove(path.c_str());
  REQUIRE(d.records.size() == 3);
  CHECK(d.columns[0].categorical);
  CHECK_FALSE(d.columns[1].categorical);
  REQUIRE(d.columns[0].levels.size() == 2);
  CHECK(d.columns[0].levels[0] == "red");
  CHECK(*d.records[0].z[0] == doctest::Approx(0.0));
  CHECK(*d.records[1].z[0] == doctest::Approx(1.0));
  CHECK(*d.records[2].z[0] == doctest::Approx(0.0));
}

TEST_CASE("csv ingest rejects structural problems") {
  FusionSpec spec;
  spec.d = 1;
  spec.k = 1;
  spec.relevant = {1};
  spec.fusion_sets = {{1, {1}}};
  CHECK_THROWS(read_csv("./no_such_file_xyz.csv", spec));
  std::string path = write_temp("t_data_nos.csv", "z1\n1.0\n");
  CHECK_THROWS(read_csv(path, spec));  // no source column
  std::remove(path.c_str());
}

TEST_CASE("spec from json") {
  FusionSpec spec = spec_from_json(R"({
    "d": 3, "k": 2, "J": [3, 1],
    "fusion_sets": {"1": [2, 1], "3": [2]},
    "model_class": {"3": {"kind": "dag_parents", "parents": [1]}}
  })");
  CHECK(spec.d == 3);
  CHECK(spec.k == 2);
  REQUIRE(spec.relevant.size() == 2);
  CHECK(spec.relevant[0] == 1);  // sorted
  CHECK(spec.relevant[1] == 3);
  CHECK(spec.fusion_sets.at(1) == std::vector<int>{1, 2});
  CHECK(spec.in_fusion_set(2, 3));
  CHECK_FALSE(spec.in_fusion_set(1, 3));
  CHECK(spec.class_at(3).kind == ModelKind::DAGParents);
  CHECK(spec.class_at(1).kind == ModelKind::LocallyNonparametric);  // default
  CHECK(spec.irrelevant() == std::vector<int>{2});
  CHECK_THROWS(spec_from_json(R"({"d":1,"k":1,"J":[1],"fusion_sets":{"1":[1]},
    "model_class":{"1":"no_such_class"}})"));
}

TEST_CASE("model class factories carry their parameters") {
  auto rm = ModelClass::repeated_measures(3);
  CHECK(rm.kind == ModelKind::RepeatedMeasures);
  CHECK(rm.repeats == 3);
  auto dp = ModelClass::dag_parents({1, 2});
  CHECK(dp.parents == std::vector<int>{1, 2});
  auto sf = ModelClass::score_family(2, [](const std::vector<double>&) { return Vec::Zero(2); });
  CHECK(sf.score_dim == 2);
  CHECK(static_cast<bool>(sf.score));
}
