#pragma once

#include <functional>
#include <vector>

#include "bilevel/common.hpp"

namespace bilevel {

// Matrix-free symmetric positive-definite operator. The caller asserts
// symmetry and positive-definiteness; apply must be deterministic for a
// fixed instance.
struct LinearOperator {
  Index dim = 0;
  std::function<Vector(const Vector&)> apply;
};

struct CgResult {
  Vector x;
  int iters = 0;          // apply calls beyond the initial residual evaluation
  double residual = 0.0;  // ||op(x) - b|| of the returned iterate
  std::vector<double> residual_trace;  // ||r|| after each iteration, starting at ||b||
};

// Linear conjugate gradient for SPD systems, textbook residual recurrences.
// Returns once ||op(x) - b|| <= tol or after max_iter iterations, whichever
// first; on iteration-budget exhaustion the best (lowest-residual) iterate
// seen is returned. Restarts with the steepest-descent direction if
// <p, Ap> <= 0; a second non-positive curvature value means the operator is
// not SPD and raises NonFiniteValue.
inline CgResult cg_solve(const LinearOperator& op, const Vector& b, double tol, int max_iter) {
  if (tol <= 0.0) throw InvalidConfig("cg_solve: tol must be > 0");
  if (max_iter < 1) throw InvalidConfig("cg_solve: max_iter must be >= 1");
  if (b.size() != op.dim) throw InvalidConfig("cg_solve: rhs dimension mismatch");

  CgResult out;
  Vector x = Vector::Zero(op.dim);
  Vector r = b;  // r = b - A*0
  double rnorm = r.norm();
  out.residual_trace.push_back(rnorm);

  Vector best_x = x;
  double best_rnorm = rnorm;

  if (rnorm <= tol) {
    out.x = std::move(x);
    out.residual = rnorm;
    return out;
  }

  Vector p = r;
  double rs = rnorm * rnorm;
  bool restarted = false;
  int applies = 0;  // reported as iters: apply calls beyond the initial residual
  int it = 0;
  while (it < max_iter) {
    Vector ap = op.apply(p);
    ++applies;
    if (!all_finite(ap)) throw NonFiniteValue("cg_solve: operator produced NaN/Inf");
    const double pap = p.dot(ap);
    if (pap <= 0.0) {
      if (restarted) throw NonFiniteValue("cg_solve: non-positive curvature, operator not SPD");
      restarted = true;
      p = r;
      continue;
    }
    restarted = false;
    ++it;
    const double alpha = rs / pap;
    x += alpha * p;
    r -= alpha * ap;
    if (!all_finite(x) || !all_finite(r)) throw NonFiniteValue("cg_solve: iterate became NaN/Inf");
    const double rs_new = r.squaredNorm();
    rnorm = std::sqrt(rs_new);
    out.residual_trace.push_back(rnorm);
    if (rnorm < best_rnorm) {
      best_rnorm = rnorm;
      best_x = x;
    }
    if (rnorm <= tol) {
      out.x = std::move(x);
      out.iters = applies;
      out.residual = rnorm;
      return out;
    }
    p = r + (rs_new / rs) * p;
    rs = rs_new;
  }
  out.x = std::move(best_x);
  out.iters = applies;
  out.residual = best_rnorm;
  return out;
}

// Central-difference gradient, component i = (f(x + h e_i) - f(x - h e_i)) / 2h.
// Used throughout the tests as the model-free oracle for analytic gradients.
inline Vector finite_diff_grad(const std::function<double(const Vector&)>& f, const Vector& x,
                               double h) {
  if (h <= 0.0) throw InvalidConfig("finite_diff_grad: h must be > 0");
  Vector g(x.size());
  Vector probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    probe[i] = xi + h;
    const double fp = f(probe);
    probe[i] = xi - h;
    const double fm = f(probe);
    probe[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NonFiniteValue("finite_diff_grad: objective returned NaN/Inf at probe point");
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double relative_error(const Vector& a, const Vector& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-300});
  return (a - b).norm() / scale;
}

// Ordinary-least-squares slope of y against x.
inline double ols_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2)
    throw InvalidConfig("ols_slope: need two or more paired points");
  const double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace bilevel
