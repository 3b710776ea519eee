#pragma once

#include <algorithm>
#include <cstdio>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "bilevel/common.hpp"
#include "bilevel/hypergrad.hpp"
#include "bilevel/problems.hpp"
#include "bilevel/solvers.hpp"

namespace bilevel {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Experiment configuration. Parsed strictly: unknown keys are rejected with
// their JSON path so typos never silently change a run.
// ---------------------------------------------------------------------------

struct MethodConfig {
  std::string name;  // FSLA | BP | NS | CG
  int T = 1;
  int K = 1;
  bool warm_start = true;
  double inner_lr = 0.0;
  double ns_beta = 0.0;
  double cg_tol = 1e-12;
  Schedule sched{0.4, 1.7, 0.9, 2.5};

  std::string label() const {
    if (name == "FSLA") return name;
    return name + "-" + std::to_string(T) + "-" + std::to_string(K);
  }
};

struct ProblemConfig {
  std::string kind = "quadratic";  // quadratic | cleaning
  // quadratic
  Index n = 5, m = 5, N = 10000;
  double noise_std = std::sqrt(0.1);
  // cleaning
  Index train_size = 500, val_size = 500, dim = 10;
  double gamma = 0.4, separation = 3.0, ridge_mu = 0.1;
};

struct HypergradBenchConfig {
  std::vector<int> k_grid = {16, 32, 64, 128, 256, 512, 1024, 2048, 4096};
  double beta = 0.2;
  std::vector<double> alphas = {2.0, 1.0, 0.5, 0.25};
};

struct ExperimentConfig {
  std::string experiment;  // hypergrad-bench | fsla-run | clean-bench | oracle-check
  std::uint64_t seed = 1234;
  std::string out;
  long steps = 2000;
  int batch = 256;
  bool timing = false;
  ProblemConfig problem;
  std::vector<MethodConfig> methods;
  HypergradBenchConfig bench;
  std::vector<std::string> check_problems = {"quadratic", "cleaning"};
};

namespace detail {

inline void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                                const std::string& where) {
  for (const auto& item : j.items())
    if (!allowed.count(item.key()))
      throw InvalidConfig("config: unknown key '" + item.key() + "' in " + where);
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline Schedule parse_schedule(const json& j, const std::string& where) {
  reject_unknown_keys(j, {"delta", "c_tau", "c_beta", "c_eta"}, where);
  Schedule s;
  maybe(j, "delta", s.delta);
  maybe(j, "c_tau", s.c_tau);
  maybe(j, "c_beta", s.c_beta);
  maybe(j, "c_eta", s.c_eta);
  s.validate();
  return s;
}

inline MethodConfig parse_method(const json& j, const std::string& where) {
  reject_unknown_keys(
      j, {"name", "T", "K", "warm_start", "inner_lr", "ns_beta", "cg_tol", "schedule"}, where);
  MethodConfig m;
  if (!j.contains("name")) throw InvalidConfig("config: method without name in " + where);
  m.name = j.at("name").get<std::string>();
  if (m.name != "FSLA" && m.name != "BP" && m.name != "NS" && m.name != "CG")
    throw InvalidConfig("config: unknown method '" + m.name + "' in " + where);
  maybe(j, "T", m.T);
  maybe(j, "K", m.K);
  maybe(j, "warm_start", m.warm_start);
  maybe(j, "inner_lr", m.inner_lr);
  maybe(j, "ns_beta", m.ns_beta);
  maybe(j, "cg_tol", m.cg_tol);
  if (j.contains("schedule")) m.sched = parse_schedule(j.at("schedule"), where + ".schedule");
  if (m.T < 1 || m.K < 1) throw InvalidConfig("config: method T and K must be >= 1 in " + where);
  return m;
}

inline ProblemConfig parse_problem(const json& j) {
  reject_unknown_keys(j,
                      {"kind", "n", "m", "N", "noise_std", "train_size", "val_size", "dim",
                       "gamma", "separation", "ridge_mu"},
                      "problem");
  ProblemConfig p;
  maybe(j, "kind", p.kind);
  if (p.kind != "quadratic" && p.kind != "cleaning")
    throw InvalidConfig("config: problem.kind must be quadratic or cleaning");
  maybe(j, "n", p.n);
  maybe(j, "m", p.m);
  maybe(j, "N", p.N);
  maybe(j, "noise_std", p.noise_std);
  maybe(j, "train_size", p.train_size);
  maybe(j, "val_size", p.val_size);
  maybe(j, "dim", p.dim);
  maybe(j, "gamma", p.gamma);
  maybe(j, "separation", p.separation);
  maybe(j, "ridge_mu", p.ridge_mu);
  return p;
}

inline char* format_double(char* buf, std::size_t cap, double v) {
  std::snprintf(buf, cap, "%.17g", v);
  return buf;
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
  detail::reject_unknown_keys(j,
                              {"experiment", "seed", "out", "steps", "batch", "timing",
                               "problem", "methods", "bench", "check_problems"},
                              "top level");
  ExperimentConfig cfg;
  if (!j.contains("experiment")) throw InvalidConfig("config: missing 'experiment'");
  cfg.experiment = j.at("experiment").get<std::string>();
  const std::set<std::string> known = {"hypergrad-bench", "fsla-run", "clean-bench",
                                       "oracle-check"};
  if (!known.count(cfg.experiment))
    throw InvalidConfig("config: unknown experiment '" + cfg.experiment + "'");
  detail::maybe(j, "seed", cfg.seed);
  detail::maybe(j, "out", cfg.out);
  detail::maybe(j, "steps", cfg.steps);
  detail::maybe(j, "batch", cfg.batch);
  detail::maybe(j, "timing", cfg.timing);
  if (cfg.steps < 1) throw InvalidConfig("config: steps must be >= 1");
  if (j.contains("problem")) cfg.problem = detail::parse_problem(j.at("problem"));
  if (cfg.experiment == "clean-bench") cfg.problem.kind = "cleaning";
  if (j.contains("methods")) {
    cfg.methods.clear();
    int idx = 0;
    for (const auto& m : j.at("methods"))
      cfg.methods.push_back(detail::parse_method(m, "methods[" + std::to_string(idx++) + "]"));
  }
  if (j.contains("bench")) {
    const json& b = j.at("bench");
    detail::reject_unknown_keys(b, {"k_grid", "beta", "alphas"}, "bench");
    detail::maybe(b, "k_grid", cfg.bench.k_grid);
    detail::maybe(b, "beta", cfg.bench.beta);
    detail::maybe(b, "alphas", cfg.bench.alphas);
    if (cfg.bench.k_grid.empty()) throw InvalidConfig("config: bench.k_grid must be non-empty");
    for (int k : cfg.bench.k_grid)
      if (k < 1) throw InvalidConfig("config: bench.k_grid entries must be >= 1");
    if (cfg.bench.beta <= 0.0) throw InvalidConfig("config: bench.beta must be > 0");
  }
  if (j.contains("check_problems"))
    cfg.check_problems = j.at("check_problems").get<std::vector<std::string>>();
  for (const auto& p : cfg.check_problems)
    if (p != "quadratic" && p != "cleaning")
      throw InvalidConfig("config: unknown check problem '" + p + "'");
  return cfg;
}

inline json dump_config(const ExperimentConfig& cfg) {
  json j;
  j["experiment"] = cfg.experiment;
  j["seed"] = cfg.seed;
  j["out"] = cfg.out;
  j["steps"] = cfg.steps;
  j["batch"] = cfg.batch;
  j["timing"] = cfg.timing;
  j["problem"] = {{"kind", cfg.problem.kind},
                  {"n", cfg.problem.n},
                  {"m", cfg.problem.m},
                  {"N", cfg.problem.N},
                  {"noise_std", cfg.problem.noise_std},
                  {"train_size", cfg.problem.train_size},
                  {"val_size", cfg.problem.val_size},
                  {"dim", cfg.problem.dim},
                  {"gamma", cfg.problem.gamma},
                  {"separation", cfg.problem.separation},
                  {"ridge_mu", cfg.problem.ridge_mu}};
  j["methods"] = json::array();
  for (const auto& m : cfg.methods)
    j["methods"].push_back({{"name", m.name},
                            {"T", m.T},
                            {"K", m.K},
                            {"warm_start", m.warm_start},
                            {"inner_lr", m.inner_lr},
                            {"ns_beta", m.ns_beta},
                            {"cg_tol", m.cg_tol},
                            {"schedule",
                             {{"delta", m.sched.delta},
                              {"c_tau", m.sched.c_tau},
                              {"c_beta", m.sched.c_beta},
                              {"c_eta", m.sched.c_eta}}}});
  j["bench"] = {{"k_grid", cfg.bench.k_grid},
                {"beta", cfg.bench.beta},
                {"alphas", cfg.bench.alphas}};
  j["check_problems"] = cfg.check_problems;
  return j;
}

// ---------------------------------------------------------------------------
// CSV assembly. UTF-8, comma separated, '.' decimal separator, no locale
// formatting; %.17g keeps doubles round-trippable and byte-stable.
// ---------------------------------------------------------------------------

struct CsvReport {
  std::string header;
  std::vector<std::string> rows;

  std::string to_string() const {
    std::string out = header + "\n";
    for (const auto& r : rows) out += r + "\n";
    return out;
  }
};

namespace detail {

struct BenchRow {
  std::string method;
  long k;
  double metric;  // squared estimation error or loss
  double extra;   // true gradient norm or outer value, nan when absent
  long long hvp;
  long long cross;
  long long wall_ns;
};

inline CsvReport assemble(const std::string& header, std::vector<BenchRow> rows) {
  std::sort(rows.begin(), rows.end(), [](const BenchRow& a, const BenchRow& b) {
    return a.method != b.method ? a.method < b.method : a.k < b.k;
  });
  CsvReport report;
  report.header = header;
  char num[64];
  for (const auto& r : rows) {
    std::string line = r.method + "," + std::to_string(r.k);
    line += ",";
    line += format_double(num, sizeof(num), r.metric);
    line += ",";
    line += format_double(num, sizeof(num), r.extra);
    line += "," + std::to_string(r.hvp) + "," + std::to_string(r.cross) + "," +
            std::to_string(r.wall_ns);
    report.rows.push_back(std::move(line));
  }
  return report;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// hypergrad-bench: fixed outer state, estimation error of every method over
// a grid of budgets K, against the dense closed-form ground truth, plus the
// synthetic power-law state-sequence curves.
// ---------------------------------------------------------------------------

inline CsvReport run_hypergrad_bench(const ExperimentConfig& cfg) {
  if (cfg.experiment != "hypergrad-bench")
    throw InvalidConfig("run_hypergrad_bench: wrong experiment kind");
  const ProblemConfig& pc = cfg.problem;
  const QuadraticBilevel q = gen_quadratic(cfg.seed, pc.n, pc.m, pc.N, pc.noise_std);
  const QuadraticOracle oracle(q);
  const double beta = cfg.bench.beta;

  std::mt19937_64 rng(mix64(cfg.seed ^ 0xabcdefULL));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const Vector lambda = Vector::NullaryExpr(pc.m, [&]() { return unif(rng); });
  const Vector truth = quadratic_exact_hypergrad(q, lambda);
  const Vector w_opt = quadratic_inner_solve(q, lambda);
  Vector tilde = Vector::NullaryExpr(pc.n, [&]() { return unif(rng) - 0.5; });
  tilde.normalize();

  std::vector<detail::BenchRow> rows;
  const SampleKey fb = SampleKey::full_batch();

  for (const int K : cfg.bench.k_grid) {
    // Shared descent trajectory for the estimator comparison.
    std::vector<Vector> traj{Vector::Zero(pc.n)};
    for (int k = 0; k < K; ++k)
      traj.push_back(traj.back() - beta * oracle.grad_inner_omega(lambda, traj.back(), fb));

    const auto record = [&](const std::string& method, const Vector& est,
                            const CountingOracle& counting, long long wall) {
      rows.push_back({method, K, (est - truth).squaredNorm(),
                      std::numeric_limits<double>::quiet_NaN(), counting.hvp_calls,
                      counting.cross_jvp_calls, cfg.timing ? wall : 0});
    };
    const auto timed = [&](const std::string& method, auto&& fn) {
      CountingOracle counting(oracle);
      const auto t0 = std::chrono::steady_clock::now();
      const Vector est = fn(counting);
      const long long wall = std::chrono::duration_cast<std::chrono::nanoseconds>(
                                 std::chrono::steady_clock::now() - t0)
                                 .count();
      record(method, est, counting, wall);
    };

    timed("BP", [&](const CountingOracle& c) {
      return bp_hypergrad(c, lambda, traj.front(), K, std::vector<double>(K, beta)).first;
    });
    timed("NS", [&](const CountingOracle& c) {
      return ns_hypergrad(c, lambda, traj.back(), K, beta);
    });
    timed("CG", [&](const CountingOracle& c) {
      return cg_hypergrad(c, lambda, traj.back(), K, 1e-14);
    });
    timed("FSLA", [&](const CountingOracle& c) {
      // v-recursion run along the descent trajectory.
      HyperGradSequenceSpec spec;
      spec.mode = Mode::Forward;
      spec.K = K;
      spec.omegas = traj;
      spec.betas.assign(K, beta);
      for (int k = 0; k < K; ++k)
        spec.ps.push_back(c.grad_outer_omega(lambda, traj[k], fb));
      return general_hypergrad_recursive(c, lambda, spec);
    });

    // Synthetic power-law sequences, held constant at their terminal state.
    for (const double alpha : cfg.bench.alphas) {
      char label[32];
      std::snprintf(label, sizeof(label), "alpha-%g", alpha);
      const Vector omega_hat = w_opt + tilde / std::pow(static_cast<double>(K), alpha);
      timed(label, [&](const CountingOracle& c) {
        return ns_hypergrad(c, lambda, omega_hat, K - 1, beta);
      });
    }
  }
  return detail::assemble("method,k,sq_error,unused,hvp_calls,cross_jvp_calls,wall_ns",
                          std::move(rows));
}

// ---------------------------------------------------------------------------
// fsla-run / clean-bench: the solver comparison. One trace per configured
// method; rows carry losses and cumulative oracle-call counters.
// ---------------------------------------------------------------------------

struct SolverBenchResult {
  CsvReport csv;
  // Final outer state per method label, for downstream inspection
  // (e.g. ranking sample weights on the cleaning task).
  std::vector<std::pair<std::string, Vector>> final_lambdas;
};

inline SolverBenchResult run_solver_bench_full(const ExperimentConfig& cfg) {
  if (cfg.experiment != "fsla-run" && cfg.experiment != "clean-bench")
    throw InvalidConfig("run_solver_bench: wrong experiment kind");
  if (cfg.methods.empty()) throw InvalidConfig("run_solver_bench: no methods configured");

  const ProblemConfig& pc = cfg.problem;
  QuadraticBilevel q;
  CleaningProblem cl;
  std::unique_ptr<BilevelOracle> oracle;
  RunMonitor monitor;
  Vector lambda0, omega0;

  if (pc.kind == "quadratic") {
    q = gen_quadratic(cfg.seed, pc.n, pc.m, pc.N, pc.noise_std);
    oracle = std::make_unique<QuadraticOracle>(q);
    monitor.true_hypergrad = [&q](const Vector& l) { return quadratic_exact_hypergrad(q, l); };
    monitor.true_outer_value = [&q](const Vector& l) {
      return QuadraticOracle(q).outer_value(l, quadratic_inner_solve(q, l),
                                            SampleKey::full_batch());
    };
    std::mt19937_64 rng(mix64(cfg.seed ^ 0x5151ULL));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    lambda0 = Vector::NullaryExpr(pc.m, [&]() { return unif(rng); });
    omega0 = Vector::NullaryExpr(pc.n, [&]() { return unif(rng); });
  } else {
    cl = gen_cleaning(cfg.seed, pc.train_size, pc.val_size, pc.dim, pc.gamma, pc.separation,
                      pc.ridge_mu);
    oracle = std::make_unique<CleaningOracle>(cl);
    lambda0 = Vector::Zero(pc.train_size);  // sigma = 0.5, uniform sample weights
    omega0 = Vector::Zero(pc.dim);
  }

  SolverBenchResult result;
  std::vector<detail::BenchRow> rows;
  for (const MethodConfig& mc : cfg.methods) {
    RunTrace trace;
    if (mc.name == "FSLA") {
      trace = fsla_run(*oracle, mc.sched, lambda0, omega0, cfg.steps, cfg.batch, cfg.seed,
                       monitor);
    } else {
      BaselineConfig bc;
      bc.estimator = mc.name == "BP"   ? Estimator::BP
                     : mc.name == "NS" ? Estimator::NS
                                       : Estimator::CG;
      bc.T = mc.T;
      bc.K = mc.K;
      bc.warm_start = mc.warm_start;
      bc.inner_lr = mc.inner_lr;
      bc.ns_beta = mc.ns_beta;
      bc.cg_tol = mc.cg_tol;
      bc.sched = mc.sched;
      trace = baseline_run(*oracle, bc, lambda0, omega0, cfg.steps, cfg.batch, cfg.seed,
                           monitor);
    }
    for (const TraceRow& r : trace.rows)
      rows.push_back({mc.label(), r.k, r.val_loss, r.true_grad_norm, r.hvp_calls,
                      r.cross_jvp_calls, cfg.timing ? r.wall_ns : 0});
    result.final_lambdas.emplace_back(mc.label(), trace.final_lambda);
  }
  result.csv = detail::assemble(
      "method,k,val_loss,true_grad_norm,hvp_calls,cross_jvp_calls,wall_ns", std::move(rows));
  return result;
}

inline CsvReport run_solver_bench(const ExperimentConfig& cfg) {
  return run_solver_bench_full(cfg).csv;
}

// ---------------------------------------------------------------------------
// oracle-check: derivative consistency of every built-in problem at seeded
// points. The failure count becomes the process exit status.
// ---------------------------------------------------------------------------

struct OracleCheckReport {
  int failures = 0;
  std::string text;
};

inline OracleCheckReport run_oracle_check(const ExperimentConfig& cfg) {
  OracleCheckReport report;
  if (cfg.check_problems.empty()) {
    report.text = "warning: no problems configured, nothing checked\n";
    return report;
  }
  std::mt19937_64 rng(mix64(cfg.seed ^ 0xc0ffeeULL));
  std::normal_distribution<double> gauss(0.0, 0.5);
  const auto run_checks = [&](const std::string& name, const BilevelOracle& oracle) {
    for (int point = 0; point < 10; ++point) {
      const Vector lambda =
          Vector::NullaryExpr(oracle.outer_dim(), [&]() { return gauss(rng); });
      const Vector omega = Vector::NullaryExpr(oracle.inner_dim(), [&]() { return gauss(rng); });
      const ConsistencyReport r = check_oracle_consistency(oracle, lambda, omega, 1e-5, 1e-4);
      for (const auto& c : r.checks) {
        char line[160];
        std::snprintf(line, sizeof(line), "%s point %d %s: %s (rel err %.3e)\n", name.c_str(),
                      point, c.name.c_str(), c.passed ? "ok" : "FAIL", c.max_rel_error);
        report.text += line;
        if (!c.passed) ++report.failures;
      }
    }
  };
  for (const std::string& name : cfg.check_problems) {
    if (name == "quadratic") {
      const QuadraticBilevel q = gen_quadratic(cfg.seed, 5, 5, 300, 0.3);
      run_checks("quadratic", QuadraticOracle(q));
    } else {
      const CleaningProblem p = gen_cleaning(cfg.seed, 60, 50, 5, 0.3, 3.0, 0.15);
      run_checks("cleaning", CleaningOracle(p));
    }
  }
  return report;
}

// Built-in defaults per experiment, used by the CLI when no config file is
// given; also the documented reference configs.
inline ExperimentConfig default_config(const std::string& experiment) {
  ExperimentConfig cfg;
  cfg.experiment = experiment;
  if (experiment == "hypergrad-bench") {
    cfg.out = "hypergrad_bench.csv";
    cfg.batch = 0;
  } else if (experiment == "fsla-run") {
    cfg.out = "fsla_run.csv";
    cfg.batch = 256;
    MethodConfig fsla;
    fsla.name = "FSLA";
    fsla.sched = Schedule{0.4, 1.7, 0.9, 2.5};
    MethodConfig ns;
    ns.name = "NS";
    ns.T = 1;
    ns.K = 10;
    ns.sched = fsla.sched;
    cfg.methods = {fsla, ns};
  } else if (experiment == "clean-bench") {
    cfg.out = "clean_bench.csv";
    cfg.problem.kind = "cleaning";
    cfg.batch = 256;
    MethodConfig fsla;
    fsla.name = "FSLA";
    fsla.sched = Schedule{100.0, 0.002, 0.002, 0.008};
    MethodConfig ns;
    ns.name = "NS";
    ns.T = 1;
    ns.K = 10;
    ns.sched = fsla.sched;
    MethodConfig cg;
    cg.name = "CG";
    cg.T = 1;
    cg.K = 10;
    cg.sched = fsla.sched;
    cfg.methods = {fsla, ns, cg};
  } else if (experiment == "oracle-check") {
    cfg.out = "";
  } else {
    throw InvalidConfig("default_config: unknown experiment '" + experiment + "'");
  }
  return cfg;
}

}  // namespace bilevel
