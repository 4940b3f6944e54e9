#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "cirm/harness.hpp"
#include "cirm/runner.hpp"
#include "cirm/validation.hpp"

namespace fs = std::filesystem;
using namespace cirm;

namespace {

runner::RunConfig resolve(const std::string& path, std::optional<std::uint64_t> seed,
                          const std::string& out) {
  auto cfg = runner::load_config(path);
  if (seed) {
    cfg.plan.seeds = {*seed};
    cfg.plan.repetitions = 1;
  }
  if (!out.empty()) cfg.output_dir = out;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cmd_run(const std::string& config, std::optional<std::uint64_t> seed, std::size_t jobs, const std::string& out) {
  const auto cfg = resolve(config, seed, out);
  const harness::Experiment exp(cfg.plan);
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  {
    std::ofstream m(dir / "manifest.json", std::ios::trunc);
    m << runner::manifest_json(cfg, slurp(config), exp.uses_fallback()) << '\n';
  }
  if (exp.uses_fallback() && cfg.plan.dataset.kind == harness::DatasetKind::Colored) {
    std::cerr << "[cirm] IDX files not found, using the synthetic-pattern fallback\n";
  }
  runner::ResultsWriter writer(dir / "results.csv");
  std::vector<harness::MetricsRecord> all;
  const auto start = std::chrono::steady_clock::now();
  harness::run_plan(exp, jobs, [&](const std::vector<harness::MetricsRecord>& r) {
    writer.append(r);
    all.insert(all.end(), r.begin(), r.end());
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cerr << "[cirm] " << r.front().method << " seed " << r.front().seed << " done (" << s << " s)\n";
  });
  runner::write_summary_csv(dir / "summary.csv", harness::aggregate(all));
  std::cerr << "[cirm] wrote " << (dir / "results.csv").string() << '\n';
  return 0;
}

int cmd_gen_data(const std::string& config, std::optional<std::uint64_t> seed, const std::string& out) {
  const auto cfg = resolve(config, seed, out);
  const harness::Experiment exp(cfg.plan);
  const fs::path dir = fs::path(cfg.output_dir) / "data";
  fs::create_directories(dir);
  env::write_cache(dir / "test", exp.test_env());
  for (auto s : cfg.plan.run_seeds()) {
    for (std::size_t i = 0; i < cfg.plan.n_envs; ++i) {
      const std::string stem = "train_s" + std::to_string(s) + "_e" + std::to_string(i);
      env::write_cache(dir / stem, exp.train_env(i, s));
      std::cerr << "[cirm] " << (dir / stem).string() << '\n';
    }
  }
  return 0;
}

int cmd_validate() {
  bool ok = true;
  for (const auto& c : validation::oracle_suite()) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
    ok = ok && c.passed;
  }
  return ok ? 0 : 1;
}

int cmd_report(const std::string& results, const std::string& group_by, const std::string& out) {
  const auto rep = runner::make_report(runner::read_results_csv(results), runner::group_by_from_string(group_by));
  std::cout << rep.to_text();
  if (!out.empty()) {
    std::ofstream f(out, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + out);
    f << rep.to_csv();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  runner::tune_allocator();
  CLI::App app{"continual invariant risk minimization experiments"};
  app.require_subcommand(1);

  std::string config;
  std::uint64_t seed_value = 0;
  std::size_t jobs = 1;
  std::string out;

  auto* run = app.add_subcommand("run", "run an experiment config");
  run->add_option("--config", config, "experiment or manifest JSON")->required()->check(CLI::ExistingFile);
  auto* run_seed = run->add_option("--seed", seed_value, "run a single seed");
  run->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  run->add_option("--out", out, "output directory (overrides output_dir)");

  auto* gen = app.add_subcommand("gen-data", "write environment caches");
  gen->add_option("--config", config, "experiment JSON")->required()->check(CLI::ExistingFile);
  auto* gen_seed = gen->add_option("--seed", seed_value, "single seed");
  gen->add_option("--out", out, "output directory");

  app.add_subcommand("validate", "run the oracle checks");

  std::string results;
  std::string group_by = "method";
  auto* report = app.add_subcommand("report", "render a summary table from results.csv");
  report->add_option("results", results, "results.csv")->required()->check(CLI::ExistingFile);
  report->add_option("--group-by", group_by, "method or experiment")
      ->check(CLI::IsMember({"method", "experiment"}));
  report->add_option("--out", out, "also write the table as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const auto seed_of = [&](CLI::Option* o) {
    return o->count() ? std::optional<std::uint64_t>(seed_value) : std::nullopt;
  };
  try {
    if (*run) return cmd_run(config, seed_of(run_seed), jobs, out);
    if (*gen) return cmd_gen_data(config, seed_of(gen_seed), out);
    if (app.got_subcommand("validate")) return cmd_validate();
    if (*report) return cmd_report(results, group_by, out);
  } catch (const methods::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
