#pragma once

#include <utility>
#include <vector>

#include "bilevel/common.hpp"
#include "bilevel/linalg.hpp"
#include "bilevel/oracle.hpp"

namespace bilevel {

// The two factorizations of the product-sum hyper-gradient formulation:
// Backward accumulates against a single terminal vector p_K, Forward
// propagates a running state through per-step vectors p_k.
enum class Mode { Backward, Forward };

// Inputs of the general hyper-gradient formulation: K damped-Hessian factors
// over inner states omega_0..omega_K with coefficients beta_0..beta_{K-1}.
// ps holds {p_K} in Backward mode and {p_0..p_{K-1}} in Forward mode.
//
// Ordering convention: each mode is defined by its recursion. Backward
// applies the factor at omega_s to the running vector in the order
// s = K-1, ..., k+1 (matching the unrolled-descent chain rule); Forward
// applies them in the order s = k+1, ..., K-1 (matching the v-recursion).
// The two orderings coincide whenever the inner Hessian is constant along
// the sequence, which covers every named instantiation.
struct HyperGradSequenceSpec {
  Mode mode = Mode::Backward;
  int K = 0;
  std::vector<Vector> omegas;  // K+1 states, omegas[K] is the terminal one
  std::vector<double> betas;   // K coefficients
  std::vector<Vector> ps;

  void validate() const {
    if (K < 0) throw InvalidConfig("spec: K must be >= 0");
    if (static_cast<int>(omegas.size()) != K + 1)
      throw InvalidConfig("spec: omegas must hold K+1 states");
    if (static_cast<int>(betas.size()) != K)
      throw InvalidConfig("spec: betas must hold K coefficients");
    for (double b : betas)
      if (b < 0.0) throw InvalidConfig("spec: betas must be non-negative");
    const auto want = (mode == Mode::Backward) ? std::size_t{1} : static_cast<std::size_t>(K);
    if (ps.size() != want && !(K == 0 && ps.empty()))
      throw InvalidConfig("spec: ps length inconsistent with mode");
  }
};

// Persistent state of the forward recursion
//   v <- (I - beta * H(lambda, omega)) v + beta * p.
// With beta <= 1/L and ||v|| <= C/mu for a bound C on ||p||, the update is a
// contraction and every iterate stays within ||v|| <= C/mu.
struct RecursiveVState {
  Vector v;
  double beta_last = 0.0;
};

// Optimal fixed damping for an SPD inner Hessian with spectrum in [mu, L].
inline double default_recursion_beta(const BilevelOracle& oracle) {
  return 2.0 / (oracle.strong_convexity_mu() + oracle.smoothness_L());
}

// Hyper-gradient at the (approximately) exact inner minimizer: solves
// H x = grad_outer_omega with matrix-free CG, then forms
// grad_outer_lambda - cross_jvp(x). Works for any oracle; dense problems
// additionally expose closed-form routes used as independent checks.
inline Vector exact_hypergrad(const BilevelOracle& oracle, const Vector& lambda,
                              const Vector& omega_star, double tol, int max_iter = 0) {
  const SampleKey fb = SampleKey::full_batch();
  const double inner_res = oracle.grad_inner_omega(lambda, omega_star, fb).norm();
  if (inner_res > 10.0 * tol)
    throw InnerNotConverged("exact_hypergrad: inner residual " + std::to_string(inner_res) +
                            " exceeds 10*tol");
  LinearOperator op{oracle.inner_dim(), [&](const Vector& v) {
                      return oracle.hvp_inner(lambda, omega_star, v, fb);
                    }};
  const Vector b = oracle.grad_outer_omega(lambda, omega_star, fb);
  if (max_iter <= 0) max_iter = 20 * static_cast<int>(oracle.inner_dim()) + 100;
  const CgResult sol = cg_solve(op, b, tol, max_iter);
  return oracle.grad_outer_lambda(lambda, omega_star, fb) -
         oracle.cross_jvp_inner(lambda, omega_star, sol.x, fb);
}

// Literal O(K^2) evaluation of the product-sum, every damped-Hessian factor
// realized as one hvp call. Test oracle for the recursive evaluator; not for
// production use.
inline Vector general_hypergrad_naive(const BilevelOracle& oracle, const Vector& lambda,
                                      const HyperGradSequenceSpec& spec) {
  spec.validate();
  const SampleKey fb = SampleKey::full_batch();
  Vector g = oracle.grad_outer_lambda(lambda, spec.omegas[spec.K], fb);
  for (int k = 0; k < spec.K; ++k) {
    Vector w;
    if (spec.mode == Mode::Backward) {
      w = spec.ps[0];
      for (int s = spec.K - 1; s >= k + 1; --s)
        w -= spec.betas[s] * oracle.hvp_inner(lambda, spec.omegas[s], w, fb);
      g -= spec.betas[k] * oracle.cross_jvp_inner(lambda, spec.omegas[k], w, fb);
    } else {
      w = spec.ps[k];
      for (int s = k + 1; s <= spec.K - 1; ++s)
        w -= spec.betas[s] * oracle.hvp_inner(lambda, spec.omegas[s], w, fb);
      g -= spec.betas[k] * oracle.cross_jvp_inner(lambda, spec.omegas[spec.K], w, fb);
    }
  }
  return g;
}

// O(K) evaluation of the same quantity. Forward mode runs the v-recursion
// and finishes with a single cross product at the terminal state; Backward
// mode sweeps one running vector down the chain (the inner Hessian is
// symmetric, so the transposed factors are again hvp calls), accumulating a
// cross product per step. Neither path materializes an m-by-n matrix.
inline Vector general_hypergrad_recursive(const BilevelOracle& oracle, const Vector& lambda,
                                          const HyperGradSequenceSpec& spec) {
  spec.validate();
  const SampleKey fb = SampleKey::full_batch();
  Vector g = oracle.grad_outer_lambda(lambda, spec.omegas[spec.K], fb);
  if (spec.K == 0) return g;

  if (spec.mode == Mode::Forward) {
    RecursiveVState st{Vector::Zero(oracle.inner_dim()), 0.0};
    for (int k = 0; k < spec.K; ++k) {
      st.v += spec.betas[k] * (spec.ps[k] - oracle.hvp_inner(lambda, spec.omegas[k], st.v, fb));
      st.beta_last = spec.betas[k];
    }
    return g - oracle.cross_jvp_inner(lambda, spec.omegas[spec.K], st.v, fb);
  }

  Vector u = spec.ps[0];  // p_K
  for (int k = spec.K - 1; k >= 0; --k) {
    g -= spec.betas[k] * oracle.cross_jvp_inner(lambda, spec.omegas[k], u, fb);
    if (k > 0) u -= spec.betas[k] * oracle.hvp_inner(lambda, spec.omegas[k], u, fb);
  }
  return g;
}

enum class BpOuterGrad {
  Terminal,  // single outer gradient at the last unrolled state
  PerStep,   // one outer gradient per unrolled state (forward-mode variant)
};

// Hyper-gradient of a K-step unrolled full-batch gradient-descent inner
// solve. Returns the estimate together with the recorded trajectory
// omega_0..omega_K.
inline std::pair<Vector, std::vector<Vector>> bp_hypergrad(
    const BilevelOracle& oracle, const Vector& lambda, const Vector& omega0, int K,
    const std::vector<double>& lrs, BpOuterGrad variant = BpOuterGrad::Terminal) {
  if (K < 0) throw InvalidConfig("bp_hypergrad: K must be >= 0");
  if (static_cast<int>(lrs.size()) != K)
    throw InvalidConfig("bp_hypergrad: lrs must hold K learning rates");
  const double lmax = 2.0 / oracle.smoothness_L();
  for (double lr : lrs)
    if (lr <= 0.0 || lr >= lmax) throw InvalidConfig("bp_hypergrad: lr outside (0, 2/L)");

  const SampleKey fb = SampleKey::full_batch();
  std::vector<Vector> trajectory;
  trajectory.reserve(K + 1);
  trajectory.push_back(omega0);
  for (int k = 0; k < K; ++k) {
    Vector next =
        trajectory.back() - lrs[k] * oracle.grad_inner_omega(lambda, trajectory.back(), fb);
    if (next.norm() > 1e12) throw Diverged("bp_hypergrad: unrolled iterate exceeded 1e12");
    trajectory.push_back(std::move(next));
  }

  HyperGradSequenceSpec spec;
  spec.K = K;
  spec.omegas = trajectory;
  spec.betas = lrs;
  if (variant == BpOuterGrad::Terminal) {
    spec.mode = Mode::Backward;
    spec.ps = {oracle.grad_outer_omega(lambda, trajectory.back(), fb)};
  } else {
    spec.mode = Mode::Forward;
    for (int k = 0; k < K; ++k)
      spec.ps.push_back(oracle.grad_outer_omega(lambda, trajectory[k], fb));
  }
  return {general_hypergrad_recursive(oracle, lambda, spec), std::move(trajectory)};
}

// Truncated-geometric-series approximation of the inverse inner Hessian at a
// single state omega_hat: K+1 series terms accumulated by the v-recursion,
// costing exactly K+1 hvp calls and one cross product.
inline Vector ns_hypergrad(const BilevelOracle& oracle, const Vector& lambda,
                           const Vector& omega_hat, int K, double beta) {
  if (K < 0) throw InvalidConfig("ns_hypergrad: K must be >= 0");
  if (beta <= 0.0) throw InvalidConfig("ns_hypergrad: beta must be > 0");
  const SampleKey fb = SampleKey::full_batch();
  const Vector p = oracle.grad_outer_omega(lambda, omega_hat, fb);
  Vector v = Vector::Zero(oracle.inner_dim());
  for (int k = 0; k <= K; ++k)
    v += beta * (p - oracle.hvp_inner(lambda, omega_hat, v, fb));
  return oracle.grad_outer_lambda(lambda, omega_hat, fb) -
         oracle.cross_jvp_inner(lambda, omega_hat, v, fb);
}

// Conjugate-gradient solve of H x = grad_outer_omega at a single state,
// truncated at K iterations.
inline Vector cg_hypergrad(const BilevelOracle& oracle, const Vector& lambda,
                           const Vector& omega_hat, int K, double tol) {
  if (K < 1) throw InvalidConfig("cg_hypergrad: K must be >= 1");
  const SampleKey fb = SampleKey::full_batch();
  LinearOperator op{oracle.inner_dim(), [&](const Vector& v) {
                      return oracle.hvp_inner(lambda, omega_hat, v, fb);
                    }};
  const Vector b = oracle.grad_outer_omega(lambda, omega_hat, fb);
  const CgResult sol = cg_solve(op, b, tol, K);
  return oracle.grad_outer_lambda(lambda, omega_hat, fb) -
         oracle.cross_jvp_inner(lambda, omega_hat, sol.x, fb);
}

// One step of the stochastic v-recursion:
//   beta * grad_outer_omega(lambda, omega; key_grad) + (I - beta * H(; key_hvp)) v.
// Exactly one hvp call.
inline Vector v_update(const BilevelOracle& oracle, const Vector& lambda, const Vector& omega,
                       const Vector& v, double beta, const SampleKey& key_grad,
                       const SampleKey& key_hvp) {
  if (beta < 0.0) throw InvalidConfig("v_update: beta must be >= 0");
  return beta * oracle.grad_outer_omega(lambda, omega, key_grad) + v -
         beta * oracle.hvp_inner(lambda, omega, v, key_hvp);
}

// Stochastic hyper-gradient given the tracked v state:
//   grad_outer_lambda(; key_grad) - cross_jvp(v; key_cross).
inline Vector hypergrad_from_v(const BilevelOracle& oracle, const Vector& lambda,
                               const Vector& omega, const Vector& v, const SampleKey& key_grad,
                               const SampleKey& key_cross) {
  return oracle.grad_outer_lambda(lambda, omega, key_grad) -
         oracle.cross_jvp_inner(lambda, omega, v, key_cross);
}

}  // namespace bilevel
