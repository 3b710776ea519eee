// Reproducible experiment runner: hyper-gradient estimation benchmark,
// solver comparisons on the quadratic and data-cleaning problems, and an
// oracle self-check. Every run is deterministic for a fixed config and seed;
// wall times are emitted only with --timing so CSV output stays byte-stable.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "bilevel/experiments.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_override;
  bool has_seed = false;
  std::uint64_t seed = 0;
  bool dump_config = false;
  bool timing = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file");
  cmd->add_option("--seed", args.seed, "override config seed")
      ->each([&args](const std::string&) { args.has_seed = true; });
  cmd->add_option("--out", args.out_override, "override output CSV path");
  cmd->add_flag("--dump-config", args.dump_config,
                "print the parsed config as canonical JSON and exit");
  cmd->add_flag("--timing", args.timing, "record wall-clock nanoseconds in the CSV");
}

bilevel::ExperimentConfig load_config(const std::string& experiment, const CommonArgs& args) {
  bilevel::ExperimentConfig cfg;
  if (args.config_path.empty()) {
    cfg = bilevel::default_config(experiment);
  } else {
    std::ifstream in(args.config_path);
    if (!in) throw bilevel::InvalidConfig("cannot open config file: " + args.config_path);
    bilevel::json j;
    try {
      j = bilevel::json::parse(in);
    } catch (const bilevel::json::parse_error& e) {
      throw bilevel::InvalidConfig(std::string("config parse error: ") + e.what());
    }
    cfg = bilevel::parse_config(j);
    if (cfg.experiment != experiment)
      throw bilevel::InvalidConfig("config experiment '" + cfg.experiment +
                                   "' does not match subcommand '" + experiment + "'");
  }
  if (args.has_seed) cfg.seed = args.seed;
  if (!args.out_override.empty()) cfg.out = args.out_override;
  if (args.timing) cfg.timing = true;
  return cfg;
}

void write_output(const bilevel::ExperimentConfig& cfg, const std::string& payload) {
  if (cfg.out.empty()) {
    std::cout << payload;
    return;
  }
  std::ofstream out(cfg.out, std::ios::binary);
  if (!out) throw bilevel::InvalidConfig("cannot open output file: " + cfg.out);
  out << payload;
  std::fprintf(stderr, "wrote %s\n", cfg.out.c_str());
}

int run(const std::string& experiment, const CommonArgs& args) {
  const bilevel::ExperimentConfig cfg = load_config(experiment, args);
  if (args.dump_config) {
    std::cout << bilevel::dump_config(cfg).dump(2) << "\n";
    return 0;
  }
  if (experiment == "hypergrad-bench") {
    write_output(cfg, bilevel::run_hypergrad_bench(cfg).to_string());
  } else if (experiment == "fsla-run" || experiment == "clean-bench") {
    write_output(cfg, bilevel::run_solver_bench(cfg).to_string());
  } else {
    const bilevel::OracleCheckReport report = bilevel::run_oracle_check(cfg);
    std::cout << report.text;
    if (report.failures > 0)
      std::fprintf(stderr, "%d consistency check(s) failed\n", report.failures);
    return std::min(report.failures, 255);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bilevel optimization benchmark runner"};
  app.require_subcommand(1);

  CommonArgs args[4];
  const char* names[4] = {"hypergrad-bench", "fsla-run", "clean-bench", "oracle-check"};
  const char* descs[4] = {
      "hyper-gradient estimation error vs budget on the quadratic problem",
      "solver comparison on the quadratic problem",
      "solver comparison on the data-cleaning task",
      "finite-difference consistency check of the built-in oracles"};
  CLI::App* cmds[4];
  for (int i = 0; i < 4; ++i) {
    cmds[i] = app.add_subcommand(names[i], descs[i]);
    add_common(cmds[i], args[i]);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    for (int i = 0; i < 4; ++i)
      if (cmds[i]->parsed()) return run(names[i], args[i]);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 64;
  }
  return 1;
}
