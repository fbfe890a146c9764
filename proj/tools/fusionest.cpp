// Command-line front end: estimation on CSV data, Monte Carlo tables, and
// enumeration-oracle verification, all driven by a JSON config file.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "fusion/engine.hpp"
#include "fusion/simulate.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fusion;

namespace {

constexpr int kOk = 0, kConfigError = 2, kDataError = 3, kNumericalError = 4, kAssertError = 5;

struct CliError {
  int code;
  std::string what;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CliError{kDataError, "cannot open " + path};
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

json vec_json(const Vec& v) {
  json a = json::array();
  for (long i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw CliError{kDataError, "cannot write " + path.string()};
  out << text;
}

// Files only ever get added to the output directory, never edited in place.
void write_manifest(const fs::path& out_dir, const std::string& run_id, const json& cfg,
                    std::uint64_t seed, const std::string& mode) {
  json m;
  m["mode"] = mode;
  m["seed"] = seed;
  m["config_hash"] = fnv1a(cfg.dump());
  m["versions"] = {{"fusionest", "1.0.0"},
                   {"compiler", __VERSION__},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                 std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)}};
  write_text(out_dir / (run_id + ".manifest.json"), m.dump(2) + "\n");
}

NuisanceOptions options_from(const json& cfg, const NuisanceOptions& base) {
  NuisanceOptions o = base;
  if (!cfg.contains("options")) return o;
  const json& j = cfg.at("options");
  if (j.contains("folds")) o.folds = j.at("folds").get<int>();
  if (j.contains("clip_c")) o.clip_c = j.at("clip_c").get<double>();
  if (j.contains("trim_eps")) o.trim_eps = j.at("trim_eps").get<double>();
  if (j.contains("kde_cap")) o.kde_cap = j.at("kde_cap").get<std::size_t>();
  if (j.contains("ratio_draws")) o.ratio_draws = j.at("ratio_draws").get<std::size_t>();
  if (j.contains("interactions")) o.interactions = j.at("interactions").get<bool>();
  if (j.contains("learner")) o.learner = j.at("learner").get<std::string>();
  return o;
}

EstimandSpec estimand_from(const json& cfg) {
  if (!cfg.contains("estimand")) return EstimandSpec::mean();
  const json& j = cfg.at("estimand");
  std::string kind = j.value("kind", "mean");
  EstimandSpec e;
  if (kind == "mean") {
    e = EstimandSpec::mean();
  } else if (kind == "longitudinal") {
    std::string model = j.value("model", "nonparametric");
    LongitudinalModel m = LongitudinalModel::Nonparametric;
    if (model == "symmetric")
      m = LongitudinalModel::SymmetricError;
    else if (model == "linear")
      m = LongitudinalModel::LinearError;
    else if (model != "nonparametric")
      throw CliError{kConfigError, "unknown longitudinal model: " + model};
    e = EstimandSpec::longitudinal(j.value("stages", 2), m);
  } else if (kind == "treatment_effect") {
    e = EstimandSpec::treatment_effect();
  } else if (kind == "treatment_effect_ratio") {
    e = EstimandSpec::treatment_effect_ratio();
  } else if (kind == "policy_value") {
    double hi = j.value("p_hi", 0.8), lo = j.value("p_lo", 0.2), cut = j.value("cut", 0.5);
    e = EstimandSpec::policy_value([hi, lo, cut](double a, double z1) {
      double p1 = z1 > cut ? hi : lo;
      return a > 0.5 ? p1 : 1.0 - p1;
    });
  } else if (kind == "quantile_contrast") {
    e = EstimandSpec::quantile_contrast(j.value("tau", 0.5));
  } else if (kind == "logistic_projection") {
    e = EstimandSpec::logistic_projection();
  } else {
    throw CliError{kConfigError, "unknown estimand kind: " + kind};
  }
  if (j.contains("error_scale")) {
    std::string es = j.at("error_scale").get<std::string>();
    if (es.size() >= 2 && es[0] == 'u') {
      int idx = std::stoi(es.substr(1)) - 1;
      if (idx < 0) throw CliError{kConfigError, "error_scale index must be positive"};
      e.error_scale = [idx](const std::vector<double>& u) {
        return idx < static_cast<int>(u.size()) ? u[static_cast<std::size_t>(idx)] : 1.0;
      };
    } else if (es != "unit") {
      throw CliError{kConfigError, "error_scale must be \"unit\" or \"u<index>\""};
    }
  }
  return e;
}

int cmd_estimate(const json& cfg, std::uint64_t seed, const fs::path& out_dir,
                 const std::string& format) {
  std::string spec_text;
  if (cfg.contains("spec"))
    spec_text = cfg.at("spec").dump();
  else if (cfg.contains("spec_path"))
    spec_text = read_file(cfg.at("spec_path").get<std::string>());
  else
    throw CliError{kConfigError, "estimate mode needs \"spec\" or \"spec_path\""};

  FusionSpec spec;
  try {
    spec = spec_from_json(spec_text);
  } catch (const std::exception& e) {
    throw CliError{kConfigError, std::string("spec: ") + e.what()};
  }
  if (!cfg.contains("data")) throw CliError{kConfigError, "estimate mode needs \"data\""};
  std::string data_path = cfg.at("data").get<std::string>();
  if (!fs::exists(data_path)) throw CliError{kDataError, "no such data file: " + data_path};
  FusedDataset data;
  try {
    data = read_csv(data_path, spec);
  } catch (const std::exception& e) {
    throw CliError{kDataError, std::string("data: ") + e.what()};
  }
  for (const Violation& v : validate(data)) {
    if (!v.record.has_value()) throw CliError{kConfigError, "spec violation: " + v.rule};
    throw CliError{kDataError, "record " + std::to_string(*v.record) + ": " + v.rule};
  }

  EstimandSpec est = estimand_from(cfg);
  NuisanceOptions opts = options_from(cfg, NuisanceOptions{});
  EstimateReport rep;
  try {
    rep = one_step(data, est, opts, seed);
  } catch (const std::exception& e) {
    throw CliError{kNumericalError, std::string("estimation: ") + e.what()};
  }

  for (long i = 0; i < rep.estimate.size(); ++i)
    std::printf("component %ld: %.6f +/- %.6f  [%.6f, %.6f]\n", i + 1, rep.estimate[i],
                rep.std_error[i], rep.ci_lower[i], rep.ci_upper[i]);

  std::string run_id = "estimate-" + std::to_string(fnv1a(cfg.dump() + std::to_string(seed)));
  json out;
  out["estimate"] = vec_json(rep.estimate);
  out["std_error"] = vec_json(rep.std_error);
  out["ci_lower"] = vec_json(rep.ci_lower);
  out["ci_upper"] = vec_json(rep.ci_upper);
  out["level"] = rep.level;
  out["plug_in"] = vec_json(rep.plug_in);
  out["correction"] = vec_json(rep.correction);
  out["n"] = rep.n;
  out["folds"] = rep.folds;
  out["seed"] = seed;
  json diag;
  diag["influence"] = {{"if_mean", vec_json(rep.if_mean)},
                       {"if_rows", rep.if_values.rows()}};
  diag["clipping"] = {{"clip_rate", rep.clip_rate}};
  diag["folds"] = {{"fold_spread", vec_json(rep.fold_spread)},
                   {"ridge_fallback", rep.ridge_fallback}};
  out["diagnostics"] = diag;
  write_text(out_dir / (run_id + ".report.json"), out.dump(2) + "\n");

  if (cfg.value("if_csv", false) || format == "csv") {
    std::ostringstream csv;
    csv.precision(17);
    for (long i = 0; i < rep.if_values.rows(); ++i) {
      for (long c = 0; c < rep.if_values.cols(); ++c) csv << (c ? "," : "") << rep.if_values(i, c);
      csv << "\n";
    }
    write_text(out_dir / (run_id + ".if.csv"), csv.str());
  }
  write_manifest(out_dir, run_id, cfg, seed, "estimate");
  return kOk;
}

int cmd_simulate(const json& cfg, std::uint64_t seed, int reps, int threads,
                 const fs::path& out_dir, const std::string& format) {
  std::string preset = cfg.value("preset", "table1");
  if (preset != "table1") throw CliError{kConfigError, "unknown preset: " + preset};
  LongitudinalDGP dgp;
  if (cfg.contains("dgp")) {
    const json& j = cfg.at("dgp");
    if (j.contains("sizes")) dgp.sizes = j.at("sizes").get<std::vector<int>>();
    if (j.contains("alpha")) dgp.alpha = j.at("alpha").get<double>();
    if (dgp.sizes.size() != static_cast<std::size_t>(dgp.k))
      throw CliError{kConfigError, "dgp.sizes must list all sources"};
  }
  NuisanceOptions opts = options_from(cfg, monte_carlo_options());

  MetricTable table;
  try {
    table = run_monte_carlo(dgp, reps, seed, threads, opts);
  } catch (const std::exception& e) {
    throw CliError{kNumericalError, std::string("simulation: ") + e.what()};
  }
  std::printf("truth %.4f (mc se %.4f), %d replications\n", table.truth, table.truth_se, table.reps);
  for (const MetricCell& c : table.cells)
    std::printf("%-14s %-10s bias %+7.4f var %8.4f cov %5.1f%%%s\n", c.model.c_str(),
                c.scenario.c_str(), c.bias, c.var, c.cov_pct,
                c.failures ? (" (" + std::to_string(c.failures) + " failed)").c_str() : "");

  std::string run_id = "simulate-" + std::to_string(fnv1a(cfg.dump() + std::to_string(seed) +
                                                          std::to_string(reps)));
  if (format == "csv" || format == "both")
    write_text(out_dir / (run_id + ".table.csv"), table.to_csv());
  if (format == "json" || format == "both")
    write_text(out_dir / (run_id + ".table.json"), table.to_json());
  write_manifest(out_dir, run_id, cfg, seed, "simulate");

  if (!table.valid) throw CliError{kNumericalError, "too many failed replications"};
  if (cfg.contains("assert_variance_ratio")) {
    double thr = cfg.at("assert_variance_ratio").get<double>();
    double ratio = table.cell("nonparametric", "complete").var /
                   table.cell("nonparametric", "no_fusion").var;
    std::printf("variance ratio complete/no-fusion: %.4f (threshold %.4f)\n", ratio, thr);
    if (!(ratio <= thr))
      throw CliError{kAssertError, "variance ratio " + std::to_string(ratio) + " exceeds " +
                                       std::to_string(thr)};
  }
  return kOk;
}

int cmd_oracle(const json& cfg, std::uint64_t seed, const fs::path& out_dir) {
  std::vector<std::string> toys;
  if (!cfg.contains("toys") || (cfg.at("toys").is_string() && cfg.at("toys") == "all"))
    toys = toy_catalog();
  else
    toys = cfg.at("toys").get<std::vector<std::string>>();
  if (toys.empty()) throw CliError{kConfigError, "empty toy selection"};

  int scores_per_toy = cfg.value("scores_per_toy", 20);
  bool negative = cfg.value("negative_control", true);
  json report = json::array();
  bool all_ok = true;

  for (const std::string& id : toys) {
    DiscreteModel m = make_discrete_toy(id);
    EstimandSpec est = toy_estimand(id);
    auto phi = [&est](const DiscreteModel& mm) { return phi_observed(est, mm)(0); };
    GradientComponents comps = decompose(m, dq_gradient(est, m)[0]);
    XTable grad = canonical(m, comps);

    double worst = 0.0, best_deriv = 0.0;
    Rng rng(seed, fnv1a(id));
    for (int r = 0; r < scores_per_toy; ++r) {
      TangentScore h = random_tangent_score(m, rng);
      PathwiseResult res = pathwise_oracle(m, phi, grad, h);
      worst = std::max(worst, res.mismatch);
      best_deriv = std::max(best_deriv, std::abs(res.derivative));
    }
    bool ok = worst < 1e-6;
    double neg_gap = 0.0;
    if (negative) {
      // a wrong gradient must be flagged: scaling the right one misstates
      // every nonzero derivative by half its size
      neg_gap = 0.5 * best_deriv;
      ok = ok && neg_gap > 1e-3;
    }
    double nested_dev = -1.0;
    if (id == "nested") {
      nested_dev = nested_fusion_identity_max_dev(m, comps);
      ok = ok && nested_dev < 1e-10;
    }
    std::printf("%-8s %s  max mismatch %.3e%s%s\n", id.c_str(), ok ? "pass" : "FAIL", worst,
                negative ? ("  negative-control gap " + std::to_string(neg_gap)).c_str() : "",
                nested_dev >= 0.0 ? ("  nested identity dev " + std::to_string(nested_dev)).c_str()
                                  : "");
    json row = {{"toy", id}, {"max_mismatch", worst}, {"pass", ok}};
    if (negative) row["negative_control_gap"] = neg_gap;
    if (nested_dev >= 0.0) row["nested_identity_dev"] = nested_dev;
    report.push_back(row);
    all_ok = all_ok && ok;
  }

  std::string run_id = "oracle-" + std::to_string(fnv1a(cfg.dump() + std::to_string(seed)));
  write_text(out_dir / (run_id + ".report.json"), report.dump(2) + "\n");
  write_manifest(out_dir, run_id, cfg, seed, "oracle");
  if (!all_ok) throw CliError{kAssertError, "oracle verification failed"};
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"one-step estimation across fused data sources"};
  std::string config_path, out_override, format_override;
  std::int64_t seed_override = -1;
  int reps_override = 0, threads_override = 0;
  app.add_option("--config", config_path, "JSON run configuration")->required();
  app.add_option("--seed", seed_override, "override the config seed");
  app.add_option("--reps", reps_override, "override the replication count");
  app.add_option("--threads", threads_override, "cap the worker pool");
  app.add_option("--out", out_override, "output directory");
  app.add_option("--format", format_override, "table format: csv or json")
      ->check(CLI::IsMember({"csv", "json", "both"}));
  CLI11_PARSE(app, argc, argv);

  try {
    if (!fs::exists(config_path)) throw CliError{kConfigError, "no such config: " + config_path};
    json cfg;
    try {
      cfg = json::parse(read_file(config_path));
    } catch (const json::exception& e) {
      throw CliError{kConfigError, std::string("config parse: ") + e.what()};
    }
    std::string mode = cfg.value("mode", "");
    std::uint64_t seed = seed_override >= 0 ? static_cast<std::uint64_t>(seed_override)
                                            : cfg.value("seed", std::uint64_t{1});
    int reps = reps_override > 0 ? reps_override : cfg.value("reps", 200);
    int threads = resolve_threads(threads_override > 0 ? threads_override
                                                       : cfg.value("threads", 0));
    std::string out_dir_s = !out_override.empty() ? out_override : cfg.value("out", ".");
    std::string format = !format_override.empty() ? format_override : cfg.value("format", "both");
    fs::path out_dir(out_dir_s);
    fs::create_directories(out_dir);

    if (mode == "estimate") return cmd_estimate(cfg, seed, out_dir, format);
    if (mode == "simulate") return cmd_simulate(cfg, seed, reps, threads, out_dir, format);
    if (mode == "oracle") return cmd_oracle(cfg, seed, out_dir);
    throw CliError{kConfigError, "mode must be estimate, simulate, or oracle"};
  } catch (const CliError& e) {
    std::fprintf(stderr, "error (%d): %s\n", e.code, e.what.c_str());
    return e.code;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error (%d): %s\n", kNumericalError, e.what());
    return kNumericalError;
  }
}
