#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bilevel/common.hpp"
#include "bilevel/linalg.hpp"

namespace bilevel {

// Selects the sample subset an oracle call is evaluated on. A given key
// always selects the same subset, so runs are replayable bit-exactly.
// Mini-batches are contiguous blocks of the (already shuffled-at-generation)
// dataset: indices {(seed mod N) + t mod N : t < batch_size}. Averaging over
// uniformly random seeds is unbiased for the full-batch mean.
struct SampleKey {
  bool full = true;
  std::uint64_t seed = 0;
  int batch_size = 0;

  static SampleKey full_batch() { return SampleKey{}; }
  static SampleKey mini_batch(std::uint64_t seed, int batch_size) {
    if (batch_size < 1) throw InvalidConfig("SampleKey: batch_size must be >= 1");
    return SampleKey{false, seed, batch_size};
  }

  // Resolves the key against a dataset of n samples: [offset, offset+count),
  // wrapping modulo n. FullBatch resolves to the whole range.
  struct Block {
    Index offset;
    Index count;
    Index total;
  };
  Block resolve(Index n) const {
    if (full) return Block{0, n, n};
    if (batch_size > n)
      throw InvalidConfig("SampleKey: batch_size exceeds dataset size");
    return Block{static_cast<Index>(seed % static_cast<std::uint64_t>(n)),
                 static_cast<Index>(batch_size), n};
  }
};

// The contract every bilevel problem supplies: first-order oracles for the
// outer and inner objectives plus Hessian-vector and cross-derivative-vector
// products of the inner objective. Only products are ever exposed, never
// dense second derivatives, so one call is one matrix-vector query.
//
// Requirements on implementations:
//  - FullBatch calls are deterministic.
//  - hvp_inner and cross_jvp_inner are linear in v.
//  - <v, hvp_inner(lambda, omega, v, FullBatch)> >= mu * ||v||^2.
//  - Mini-batch oracles are unbiased over uniformly random key seeds.
//  - Calls are safe for concurrent read-only invocation.
class BilevelOracle {
 public:
  virtual ~BilevelOracle() = default;

  virtual Index outer_dim() const = 0;  // dimension of lambda
  virtual Index inner_dim() const = 0;  // dimension of omega

  virtual double outer_value(const Vector& lambda, const Vector& omega,
                             const SampleKey& key) const = 0;
  virtual Vector grad_outer_lambda(const Vector& lambda, const Vector& omega,
                                   const SampleKey& key) const = 0;
  virtual Vector grad_outer_omega(const Vector& lambda, const Vector& omega,
                                  const SampleKey& key) const = 0;
  virtual Vector grad_inner_omega(const Vector& lambda, const Vector& omega,
                                  const SampleKey& key) const = 0;
  virtual Vector hvp_inner(const Vector& lambda, const Vector& omega, const Vector& v,
                           const SampleKey& key) const = 0;
  virtual Vector cross_jvp_inner(const Vector& lambda, const Vector& omega, const Vector& v,
                                 const SampleKey& key) const = 0;

  virtual double strong_convexity_mu() const = 0;
  virtual double smoothness_L() const = 0;

  // Inner objective value, when the problem can supply one; enables the
  // gradient check of the consistency report.
  virtual std::optional<double> inner_value(const Vector& /*lambda*/, const Vector& /*omega*/,
                                            const SampleKey& /*key*/) const {
    return std::nullopt;
  }

  // True when the inner second derivatives are state-independent, in which
  // case the product-sum hyper-gradient is invariant to the inner-state
  // sequence.
  virtual bool constant_curvature() const { return false; }
};

// Decorator counting oracle calls. Counters are atomic so concurrent
// read-only invocation of the wrapped oracle stays safe.
class CountingOracle final : public BilevelOracle {
 public:
  explicit CountingOracle(const BilevelOracle& inner) : inner_(inner) {}

  Index outer_dim() const override { return inner_.outer_dim(); }
  Index inner_dim() const override { return inner_.inner_dim(); }

  double outer_value(const Vector& l, const Vector& w, const SampleKey& k) const override {
    ++outer_value_calls;
    return inner_.outer_value(l, w, k);
  }
  Vector grad_outer_lambda(const Vector& l, const Vector& w, const SampleKey& k) const override {
    ++grad_outer_lambda_calls;
    return inner_.grad_outer_lambda(l, w, k);
  }
  Vector grad_outer_omega(const Vector& l, const Vector& w, const SampleKey& k) const override {
    ++grad_outer_omega_calls;
    return inner_.grad_outer_omega(l, w, k);
  }
  Vector grad_inner_omega(const Vector& l, const Vector& w, const SampleKey& k) const override {
    ++grad_inner_omega_calls;
    return inner_.grad_inner_omega(l, w, k);
  }
  Vector hvp_inner(const Vector& l, const Vector& w, const Vector& v,
                   const SampleKey& k) const override {
    ++hvp_calls;
    return inner_.hvp_inner(l, w, v, k);
  }
  Vector cross_jvp_inner(const Vector& l, const Vector& w, const Vector& v,
                         const SampleKey& k) const override {
    ++cross_jvp_calls;
    return inner_.cross_jvp_inner(l, w, v, k);
  }
  double strong_convexity_mu() const override { return inner_.strong_convexity_mu(); }
  double smoothness_L() const override { return inner_.smoothness_L(); }
  std::optional<double> inner_value(const Vector& l, const Vector& w,
                                    const SampleKey& k) const override {
    return inner_.inner_value(l, w, k);
  }
  bool constant_curvature() const override { return inner_.constant_curvature(); }

  long long hvp_class_calls() const { return hvp_calls + cross_jvp_calls; }

  mutable std::atomic<long long> outer_value_calls{0};
  mutable std::atomic<long long> grad_outer_lambda_calls{0};
  mutable std::atomic<long long> grad_outer_omega_calls{0};
  mutable std::atomic<long long> grad_inner_omega_calls{0};
  mutable std::atomic<long long> hvp_calls{0};
  mutable std::atomic<long long> cross_jvp_calls{0};

 private:
  const BilevelOracle& inner_;
};

struct InnerSolution {
  Vector omega_star;
  double residual = 0.0;  // ||grad_inner_omega|| at omega_star
};

// Full-batch gradient descent on the inner problem until the gradient norm
// drops below tol or max_iter steps elapse.
inline InnerSolution solve_inner(const BilevelOracle& oracle, const Vector& lambda,
                                 const Vector& omega0, double lr, double tol, int max_iter) {
  if (lr <= 0.0 || lr >= 2.0 / oracle.smoothness_L())
    throw InvalidConfig("solve_inner: lr must lie in (0, 2/L)");
  if (tol <= 0.0) throw InvalidConfig("solve_inner: tol must be > 0");
  Vector omega = omega0;
  Vector g = oracle.grad_inner_omega(lambda, omega, SampleKey::full_batch());
  double res = g.norm();
  for (int it = 0; it < max_iter && res > tol; ++it) {
    omega -= lr * g;
    if (omega.norm() > 1e12)
      throw Diverged("solve_inner: ||omega|| exceeded 1e12 (lr too large or non-convex inner)");
    g = oracle.grad_inner_omega(lambda, omega, SampleKey::full_batch());
    res = g.norm();
  }
  return InnerSolution{std::move(omega), res};
}

struct ConsistencyCheck {
  std::string name;
  bool passed = false;
  double max_rel_error = 0.0;
};

struct ConsistencyReport {
  std::vector<ConsistencyCheck> checks;
  bool all_passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return true;
  }
};

// Validates the analytic derivatives of an oracle against central finite
// differences at (lambda, omega), full batch. Failures are reported, not
// thrown. Probe directions are seeded so the report is reproducible.
inline ConsistencyReport check_oracle_consistency(const BilevelOracle& oracle,
                                                  const Vector& lambda, const Vector& omega,
                                                  double h, double tol) {
  const SampleKey fb = SampleKey::full_batch();
  ConsistencyReport report;
  auto record = [&](const std::string& name, const Vector& analytic, const Vector& numeric) {
    const double err = relative_error(analytic, numeric);
    report.checks.push_back({name, err <= tol, err});
  };

  std::mt19937_64 rng(0x5eedULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto random_vec = [&](Index n) {
    Vector v(n);
    for (Index i = 0; i < n; ++i) v[i] = gauss(rng);
    return v;
  };

  // Outer gradients against finite differences of outer_value.
  record("grad_outer_lambda",
         oracle.grad_outer_lambda(lambda, omega, fb),
         finite_diff_grad([&](const Vector& l) { return oracle.outer_value(l, omega, fb); },
                          lambda, h));
  record("grad_outer_omega",
         oracle.grad_outer_omega(lambda, omega, fb),
         finite_diff_grad([&](const Vector& w) { return oracle.outer_value(lambda, w, fb); },
                          omega, h));

  // Inner gradient, when the problem exposes the inner objective value.
  if (oracle.inner_value(lambda, omega, fb).has_value()) {
    record("grad_inner_omega",
           oracle.grad_inner_omega(lambda, omega, fb),
           finite_diff_grad(
               [&](const Vector& w) { return *oracle.inner_value(lambda, w, fb); }, omega, h));
  }

  // Hessian-vector product against a directional difference of the inner gradient.
  const Vector v = random_vec(oracle.inner_dim());
  const Vector hvp_fd = (oracle.grad_inner_omega(lambda, omega + h * v, fb) -
                         oracle.grad_inner_omega(lambda, omega - h * v, fb)) /
                        (2.0 * h);
  record("hvp_inner", oracle.hvp_inner(lambda, omega, v, fb), hvp_fd);

  // Cross product: component j of cross_jvp is d/d lambda_j <grad_inner_omega, v>.
  Vector cross_fd(oracle.outer_dim());
  Vector probe = lambda;
  for (Index j = 0; j < oracle.outer_dim(); ++j) {
    const double lj = lambda[j];
    probe[j] = lj + h;
    const double up = oracle.grad_inner_omega(probe, omega, fb).dot(v);
    probe[j] = lj - h;
    const double dn = oracle.grad_inner_omega(probe, omega, fb).dot(v);
    probe[j] = lj;
    cross_fd[j] = (up - dn) / (2.0 * h);
  }
  record("cross_jvp_inner", oracle.cross_jvp_inner(lambda, omega, v, fb), cross_fd);

  return report;
}

}  // namespace bilevel
