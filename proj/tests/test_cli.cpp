#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#ifndef FUSIONEST_BIN
#error "FUSIONEST_BIN must point at the command-line binary"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run_cli(const std::string& args) {
  std::string cmd = std::string(FUSIONEST_BIN) + " " + args + " > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WEXITSTATUS(status);
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) : path(fs::path("cli_tmp_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

fs::path find_suffix(const fs::path& dir, const std::string& suffix) {
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      return e.path();
  }
  return {};
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(bool(in));
  json j;
  in >> j;
  return j;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json scalar_mean_config(const fs::path& dir, const std::string& data_name) {
  json cfg;
  cfg["mode"] = "estimate";
  cfg["seed"] = 11;
  cfg["spec"] = {{"d", 1}, {"k", 1}, {"J", {1}}, {"fusion_sets", {{"1", {1}}}}};
  cfg["data"] = (dir / data_name).string();
  cfg["estimand"] = {{"kind", "mean"}};
  cfg["options"] = {{"folds", 1}};
  cfg["out"] = dir.string();
  return cfg;
}

}  // namespace

TEST_CASE("estimate mode: report carries the exact sample mean") {
  TempDir dir("estimate");
  write_file(dir.path / "d.csv", "z1,s\n1,1\n2,1\n3,1\n4,1\n5,1\n6,1\n");
  json cfg = scalar_mean_config(dir.path, "d.csv");
  write_file(dir.path / "cfg.json", cfg.dump());
  CHECK(run_cli("--config " + (dir.path / "cfg.json").string()) == 0);
  fs::path report = find_suffix(dir.path, ".report.json");
  REQUIRE(!report.empty());
  json rep = read_json(report);
  CHECK(rep.at("estimate").at(0).get<double>() == doctest::Approx(3.5).epsilon(1e-12));
  CHECK(rep.at("n").get<int>() == 6);
  CHECK(rep.contains("diagnostics"));
  fs::path manifest = find_suffix(dir.path, ".manifest.json");
  REQUIRE(!manifest.empty());
  json man = read_json(manifest);
  CHECK(man.at("mode") == "estimate");
  CHECK(man.at("seed").get<int>() == 11);
  CHECK(man.contains("config_hash"));
  CHECK(man.at("versions").contains("fusionest"));
}

TEST_CASE("estimate mode: seed flag overrides the config seed") {
  TempDir dir("seedflag");
  write_file(dir.path / "d.csv", "z1,s\n1,1\n2,1\n");
  json cfg = scalar_mean_config(dir.path, "d.csv");
  write_file(dir.path / "cfg.json", cfg.dump());
  CHECK(run_cli("--config " + (dir.path / "cfg.json").string() + " --seed 99") == 0);
  json man = read_json(find_suffix(dir.path, ".manifest.json"));
  CHECK(man.at("seed").get<int>() == 99);
}

TEST_CASE("config problems exit with code 2") {
  TempDir dir("cfgerr");
  CHECK(run_cli("--config " + (dir.path / "missing.json").string()) == 2);
  write_file(dir.path / "bad.json", "{ not json");
  CHECK(run_cli("--config " + (dir.path / "bad.json").string()) == 2);
  // an empty fusion set is a spec-level problem
  write_file(dir.path / "d.csv", "z1,s\n1,1\n");
  json cfg = scalar_mean_config(dir.path, "d.csv");
  cfg["spec"]["fusion_sets"]["1"] = json::array();
  write_file(dir.path / "cfg.json", cfg.dump());
  CHECK(run_cli("--config " + (dir.path / "cfg.json").string()) == 2);
  // unknown mode
  json cfg2 = scalar_mean_config(dir.path, "d.csv");
  cfg2["mode"] = "frobnicate";
  write_file(dir.path / "cfg2.json", cfg2.dump());
  CHECK(run_cli("--config " + (dir.path / "cfg2.json").string()) == 2);
}

TEST_CASE("data problems exit with code 3") {
  TempDir dir("dataerr");
  json cfg = scalar_mean_config(dir.path, "nonexistent.csv");
  write_file(dir.path / "cfg.json", cfg.dump());
  CHECK(run_cli("--config " + (dir.path / "cfg.json").string()) == 3);
  // record-level violation: an aligned source with a missing history slot
  json cfg2;
  cfg2["mode"] = "estimate";
  cfg2["spec"] = {{"d", 2}, {"k", 2}, {"J", {2}}, {"fusion_sets", {{"2", {2}}}}};
  cfg2["data"] = (dir.path / "d.csv").string();
  cfg2["out"] = dir.path.string();
  write_file(dir.path / "d.csv", "z1,z2,s\n,1.0,2\n0.5,2.0,2\n");
  write_file(dir.path / "cfg2.json", cfg2.dump());
  CHECK(run_cli("--config " + (dir.path / "cfg2.json").string()) == 3);
}

TEST_CASE("oracle mode verifies every shipped toy") {
  TempDir dir("oracle");
  json cfg;
  cfg["mode"] = "oracle";
  cfg["seed"] = 4;
  cfg["toys"] = "all";
  cfg["scores_per_toy"] = 5;
  cfg["out"] = dir.path.string();
  write_file(dir.path / "cfg.json", cfg.dump());
  CHECK(run_cli("--config " + (dir.path / "cfg.json").string()) == 0);
  json rep = read_json(find_suffix(dir.path, ".report.json"));
  REQUIRE(rep.is_array());
  CHECK(rep.size() == 5);
  for (const auto& row : rep) {
    CHECK(row.at("pass").get<bool>());
    CHECK(row.at("max_mismatch").get<double>() < 1e-6);
    CHECK(row.at("negative_control_gap").get<double>() > 1e-3);
  }
  // empty toy selection is a configuration error
  cfg["toys"] = json::array();
  write_file(dir.path / "cfg2.json", cfg.dump());
  CHECK(run_cli("--config " + (dir.path / "cfg2.json").string()) == 2);
}

TEST_CASE("simulate mode: deterministic tables and the variance assertion") {
  TempDir a("sim_a"), b("sim_b");
  json cfg;
  cfg["mode"] = "simulate";
  cfg["seed"] = 17;
  cfg["reps"] = 2;
  cfg["preset"] = "table1";
  cfg["dgp"] = {{"sizes", {240, 48, 240, 48, 240, 480, 240, 480, 240}}};
  cfg["options"] = {{"folds", 2}, {"kde_cap", 64}, {"ratio_draws", 200}};
  cfg["format"] = "both";
  write_file(a.path / "cfg.json", cfg.dump());
  CHECK(run_cli("--config " + (a.path / "cfg.json").string() + " --out " + a.path.string()) == 0);
  CHECK(run_cli("--config " + (a.path / "cfg.json").string() + " --out " + b.path.string() +
                " --threads 3") == 0);
  fs::path ta = find_suffix(a.path, ".table.csv"), tb = find_suffix(b.path, ".table.csv");
  REQUIRE(!ta.empty());
  REQUIRE(!tb.empty());
  CHECK(read_text(ta) == read_text(tb));
  fs::path ja = find_suffix(a.path, ".table.json");
  REQUIRE(!ja.empty());
  // an impossible variance-ratio threshold trips the assertion exit code
  cfg["assert_variance_ratio"] = 1e-9;
  write_file(a.path / "cfg2.json", cfg.dump());
  CHECK(run_cli("--config " + (a.path / "cfg2.json").string() + " --out " + a.path.string()) == 5);
}
