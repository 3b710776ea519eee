#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "bilevel/common.hpp"
#include "bilevel/hypergrad.hpp"
#include "bilevel/oracle.hpp"

namespace bilevel {

// Decaying-rate schedule: alpha_k = delta / sqrt(k+1) drives the outer step,
// and the inner, recursion and momentum rates follow as c_tau * alpha_k,
// c_beta * alpha_k and min(c_eta * alpha_k, 1). The k+1 shift keeps the k=0
// rate finite; the momentum rate is clamped so the correction term never
// overshoots.
struct Schedule {
  double delta = 1.0;
  double c_tau = 1.0;
  double c_beta = 1.0;
  double c_eta = 1.0;

  double alpha(long k) const { return delta / std::sqrt(static_cast<double>(k) + 1.0); }
  double tau(long k) const { return c_tau * alpha(k); }
  double beta(long k) const { return c_beta * alpha(k); }
  double eta(long k) const { return std::min(c_eta * alpha(k), 1.0); }

  void validate() const {
    if (delta <= 0.0 || c_tau <= 0.0 || c_beta <= 0.0 || c_eta <= 0.0)
      throw InvalidSchedule("schedule: all coefficients must be strictly positive");
  }
  // The recursion rate peaks at k=0; beta <= 1/L there protects the
  // v-norm bound for the whole run.
  void validate_against(double L) const {
    validate();
    if (c_beta * delta > 1.0 / L + 1e-12)
      throw InvalidSchedule("schedule: beta_1 = c_beta*delta exceeds 1/L");
  }
};

// Joint solver state. prev_* always hold the point that produced the current
// (lambda, omega, v); the momentum correction re-evaluates the hyper-gradient
// there with the new iteration's sample keys.
struct FslaState {
  long k = 0;
  Vector lambda;
  Vector omega;
  Vector v;
  Vector d;
  Vector prev_lambda;
  Vector prev_omega;
  Vector prev_v;
};

// The v refresh reads the inner state from before the current inner step
// (the pseudo-code ordering); CurrentInner couples it to the freshly updated
// inner state instead (the main-text ordering).
enum class VUpdatePoint { PreviousInner, CurrentInner };

struct FslaOptions {
  VUpdatePoint v_point = VUpdatePoint::PreviousInner;
};

struct TraceRow {
  long k = 0;
  double true_grad_norm = std::numeric_limits<double>::quiet_NaN();
  double outer_value = std::numeric_limits<double>::quiet_NaN();
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  long long hvp_calls = 0;
  long long cross_jvp_calls = 0;
  long long wall_ns = 0;
};

struct RunTrace {
  std::vector<TraceRow> rows;  // one per hyper-iteration, recorded at entry
  long long total_hvp_calls = 0;  // cumulative over the whole run
  long long total_cross_jvp_calls = 0;
  Vector final_lambda;
  Vector final_omega;
};

// Optional ground-truth probes recorded alongside each iteration. They are
// evaluated outside the counting wrapper so the cost model stays honest.
struct RunMonitor {
  std::function<Vector(const Vector& lambda)> true_hypergrad;
  std::function<double(const Vector& lambda)> true_outer_value;
};

namespace detail {

inline SampleKey step_key(std::uint64_t seed, std::uint64_t iteration, std::uint64_t slot,
                          int batch) {
  return batch <= 0 ? SampleKey::full_batch()
                    : SampleKey::mini_batch(derive_seed(seed, iteration, slot), batch);
}

inline void guard_state_norms(const FslaState& s) {
  if (s.lambda.norm() > 1e12 || s.omega.norm() > 1e12 || s.v.norm() > 1e12 ||
      s.d.norm() > 1e12)
    throw Diverged("fsla: a state norm exceeded 1e12");
}

}  // namespace detail

// One hyper-iteration: outer step from the momentum, rate refresh, five
// fresh sample keys, inner step, v refresh, hyper-gradient at the new point,
// and the variance-reduction correction re-using keys 4 and 5 at the old
// point. Exactly one hvp and two cross products per step.
inline FslaState fsla_step(const FslaState& state, const Schedule& sched,
                           const BilevelOracle& oracle, int batch, std::uint64_t seed_base,
                           const FslaOptions& opts = {}) {
  const long k = state.k;
  const double alpha = sched.alpha(k);
  const double tau = sched.tau(k);
  const double beta = sched.beta(k);
  const double eta = sched.eta(k);
  if (beta > 1.0 / oracle.smoothness_L() + 1e-12)
    throw InvalidSchedule("fsla_step: recursion rate beta exceeds 1/L");

  const auto key = [&](std::uint64_t slot) {
    return detail::step_key(seed_base, static_cast<std::uint64_t>(k) + 1, slot, batch);
  };

  FslaState next;
  next.k = k + 1;
  next.lambda = state.lambda - alpha * state.d;
  next.omega =
      state.omega - tau * oracle.grad_inner_omega(next.lambda, state.omega, key(1));
  const Vector& v_point =
      (opts.v_point == VUpdatePoint::PreviousInner) ? state.omega : next.omega;
  next.v = v_update(oracle, next.lambda, v_point, state.v, beta, key(2), key(3));

  const SampleKey key4 = key(4);
  const SampleKey key5 = key(5);
  const Vector grad_new = hypergrad_from_v(oracle, next.lambda, next.omega, next.v, key4, key5);
  const Vector grad_old =
      hypergrad_from_v(oracle, state.lambda, state.omega, state.v, key4, key5);
  next.d = grad_new + (1.0 - eta) * (state.d - grad_old);

  next.prev_lambda = state.lambda;
  next.prev_omega = state.omega;
  next.prev_v = state.v;
  detail::guard_state_norms(next);
  return next;
}

// Full solver loop. v starts at zero and the momentum starts from a fresh
// stochastic hyper-gradient at the initial point. The returned trace has one
// row per hyper-iteration, recorded at iteration entry, with cumulative call
// counters from the internal counting wrapper.
inline RunTrace fsla_run(const BilevelOracle& oracle, const Schedule& sched,
                         const Vector& lambda0, const Vector& omega0, long steps, int batch,
                         std::uint64_t seed, const RunMonitor& monitor = {},
                         const FslaOptions& opts = {}) {
  if (steps < 1) throw InvalidConfig("fsla_run: steps must be >= 1");
  sched.validate_against(oracle.smoothness_L());
  const CountingOracle counting(oracle);

  FslaState state;
  state.k = 0;
  state.lambda = lambda0;
  state.omega = omega0;
  state.v = Vector::Zero(oracle.inner_dim());
  state.d = hypergrad_from_v(counting, lambda0, omega0, state.v,
                             detail::step_key(seed, 0, 4, batch),
                             detail::step_key(seed, 0, 5, batch));
  state.prev_lambda = lambda0;
  state.prev_omega = omega0;
  state.prev_v = state.v;

  RunTrace trace;
  trace.rows.reserve(steps);
  const auto start = std::chrono::steady_clock::now();
  for (long k = 0; k < steps; ++k) {
    TraceRow row;
    row.k = k;
    if (monitor.true_hypergrad) row.true_grad_norm = monitor.true_hypergrad(state.lambda).norm();
    if (monitor.true_outer_value) row.outer_value = monitor.true_outer_value(state.lambda);
    row.val_loss = oracle.outer_value(state.lambda, state.omega, SampleKey::full_batch());
    row.hvp_calls = counting.hvp_calls;
    row.cross_jvp_calls = counting.cross_jvp_calls;
    row.wall_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(
                      std::chrono::steady_clock::now() - start)
                      .count();
    trace.rows.push_back(row);
    try {
      state = fsla_step(state, sched, counting, batch, seed, opts);
    } catch (const Diverged& e) {
      throw Diverged(std::string(e.what()) + " at hyper-iteration k=" + std::to_string(k));
    }
  }
  trace.total_hvp_calls = counting.hvp_calls;
  trace.total_cross_jvp_calls = counting.cross_jvp_calls;
  trace.final_lambda = state.lambda;
  trace.final_omega = state.omega;
  return trace;
}

enum class Estimator { BP, NS, CG };

inline const char* estimator_name(Estimator e) {
  switch (e) {
    case Estimator::BP: return "BP";
    case Estimator::NS: return "NS";
    default: return "CG";
  }
}

// A double-loop or warm-start single-loop baseline: T inner stochastic
// gradient steps per hyper-iteration followed by a K-step hyper-gradient
// estimator, with the same outer momentum rule as the single-loop solver so
// comparisons isolate estimation cost.
struct BaselineConfig {
  Estimator estimator = Estimator::NS;
  int T = 1;
  int K = 1;
  bool warm_start = true;
  double inner_lr = 0.0;  // 0: use the schedule's tau rate
  double ns_beta = 0.0;   // 0: use 2/(mu+L)
  double cg_tol = 1e-12;
  Schedule sched;

  void validate() const {
    if (T < 1) throw InvalidConfig("baseline: T must be >= 1");
    if (K < 1) throw InvalidConfig("baseline: K must be >= 1");
    sched.validate();
  }
  std::string name() const {
    return std::string(estimator_name(estimator)) + "-" + std::to_string(T) + "-" +
           std::to_string(K);
  }
};

inline RunTrace baseline_run(const BilevelOracle& oracle, const BaselineConfig& cfg,
                             const Vector& lambda0, const Vector& omega0, long steps, int batch,
                             std::uint64_t seed, const RunMonitor& monitor = {}) {
  if (steps < 1) throw InvalidConfig("baseline_run: steps must be >= 1");
  cfg.validate();
  const CountingOracle counting(oracle);
  const double ns_beta = cfg.ns_beta > 0.0 ? cfg.ns_beta : default_recursion_beta(oracle);

  Vector lambda = lambda0;
  Vector omega = omega0;
  Vector d;
  Vector grad_prev;  // estimator value from the previous hyper-iteration

  RunTrace trace;
  trace.rows.reserve(steps);
  const auto start = std::chrono::steady_clock::now();
  for (long k = 0; k < steps; ++k) {
    TraceRow row;
    row.k = k;
    if (monitor.true_hypergrad) row.true_grad_norm = monitor.true_hypergrad(lambda).norm();
    if (monitor.true_outer_value) row.outer_value = monitor.true_outer_value(lambda);
    row.val_loss = oracle.outer_value(lambda, omega, SampleKey::full_batch());
    row.hvp_calls = counting.hvp_calls;
    row.cross_jvp_calls = counting.cross_jvp_calls;
    row.wall_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(
                      std::chrono::steady_clock::now() - start)
                      .count();
    trace.rows.push_back(row);

    const double alpha = cfg.sched.alpha(k);
    const double tau = cfg.inner_lr > 0.0 ? cfg.inner_lr : cfg.sched.tau(k);
    const double eta = cfg.sched.eta(k);

    if (!cfg.warm_start) omega = omega0;
    for (int t = 0; t < cfg.T; ++t) {
      const SampleKey kt = detail::step_key(seed, static_cast<std::uint64_t>(k) + 1,
                                            8 + static_cast<std::uint64_t>(t), batch);
      omega -= tau * counting.grad_inner_omega(lambda, omega, kt);
      if (omega.norm() > 1e12)
        throw Diverged("baseline_run: inner iterate exceeded 1e12 at k=" + std::to_string(k));
    }

    Vector grad;
    switch (cfg.estimator) {
      case Estimator::BP: {
        const std::vector<double> lrs(cfg.K, tau);
        grad = bp_hypergrad(counting, lambda, omega, cfg.K, lrs).first;
        break;
      }
      case Estimator::NS:
        grad = ns_hypergrad(counting, lambda, omega, cfg.K, ns_beta);
        break;
      case Estimator::CG:
        grad = cg_hypergrad(counting, lambda, omega, cfg.K, cfg.cg_tol);
        break;
    }

    // The estimators are full-batch functions of (lambda, omega), so the
    // correction term's re-evaluation at the previous point with fresh keys
    // equals the cached previous value.
    if (k == 0) {
      d = grad;
    } else {
      d = grad + (1.0 - eta) * (d - grad_prev);
    }
    grad_prev = grad;

    lambda -= alpha * d;
    if (lambda.norm() > 1e12 || d.norm() > 1e12)
      throw Diverged("baseline_run: outer state exceeded 1e12 at k=" + std::to_string(k));
  }
  trace.total_hvp_calls = counting.hvp_calls;
  trace.total_cross_jvp_calls = counting.cross_jvp_calls;
  trace.final_lambda = lambda;
  trace.final_omega = omega;
  return trace;
}

}  // namespace bilevel
