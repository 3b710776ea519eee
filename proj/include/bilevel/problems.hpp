#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "bilevel/common.hpp"
#include "bilevel/oracle.hpp"

namespace bilevel {

namespace detail {

// Visits the (at most two) contiguous row segments of a wrapped sample block.
template <typename Fn>
void for_segments(const SampleKey::Block& blk, Fn&& fn) {
  if (blk.offset + blk.count <= blk.total) {
    fn(blk.offset, blk.count);
  } else {
    const Index head = blk.total - blk.offset;
    fn(blk.offset, head);
    fn(Index{0}, blk.count - head);
  }
}

inline double log1pexp(double z) {
  // log(1 + e^z) without overflow
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace detail

// Least-squares bilevel family: outer value ||A_o w - b_o||^2 over the inner
// minimizer of ||A_il lambda + A_iw w - b_i||^2. Objectives are per-sample
// means so the curvature constants do not scale with N. The inner problem
// admits a closed-form minimizer through the cached normal-equation factor.
struct QuadraticBilevel {
  Matrix A_o;   // N x n
  Vector b_o;   // N
  Matrix A_il;  // N x m
  Matrix A_iw;  // N x n
  Vector b_i;   // N
  Index num_samples = 0;

  // Cached at construction.
  Eigen::LLT<Eigen::MatrixXd> gram_llt;  // of A_iw^T A_iw
  Eigen::MatrixXd hess_mean;             // (2/N) A_iw^T A_iw
  Eigen::MatrixXd cross_mean;            // (2/N) A_il^T A_iw
  double mu = 0.0;
  double L = 0.0;

  Index inner_dim() const { return A_iw.cols(); }
  Index outer_dim() const { return A_il.cols(); }

  void finalize() {
    num_samples = A_iw.rows();
    const Eigen::MatrixXd gram = A_iw.transpose() * A_iw;
    gram_llt.compute(gram);
    hess_mean = (2.0 / static_cast<double>(num_samples)) * gram;
    cross_mean = (2.0 / static_cast<double>(num_samples)) * (A_il.transpose() * A_iw);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(hess_mean);
    mu = eig.eigenvalues().minCoeff();
    L = eig.eigenvalues().maxCoeff();
  }
};

// Samples a problem instance: design matrices and planted states uniform on
// [0,1), targets from the planted states plus Gaussian noise of the given
// standard deviation. Resamples internally (up to 16 times) if the inner
// Gram matrix is near-singular.
inline QuadraticBilevel gen_quadratic(std::uint64_t seed, Index n, Index m, Index N,
                                      double noise_std) {
  if (n < 1 || m < 1) throw InvalidConfig("gen_quadratic: dimensions must be >= 1");
  if (N < n + m) throw InvalidConfig("gen_quadratic: need N >= n + m samples");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  for (int attempt = 0; attempt < 16; ++attempt) {
    QuadraticBilevel q;
    q.A_o = Matrix::NullaryExpr(N, n, [&]() { return unif(rng); });
    q.A_il = Matrix::NullaryExpr(N, m, [&]() { return unif(rng); });
    q.A_iw = Matrix::NullaryExpr(N, n, [&]() { return unif(rng); });
    const Vector planted_lambda = Vector::NullaryExpr(m, [&]() { return unif(rng); });
    const Vector planted_omega = Vector::NullaryExpr(n, [&]() { return unif(rng); });
    const Vector planted_omega_opt = Vector::NullaryExpr(n, [&]() { return unif(rng); });
    q.b_o = q.A_o * planted_omega_opt +
            noise_std * Vector::NullaryExpr(N, [&]() { return gauss(rng); });
    q.b_i = q.A_il * planted_lambda + q.A_iw * planted_omega +
            noise_std * Vector::NullaryExpr(N, [&]() { return gauss(rng); });

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(q.A_iw.transpose() * q.A_iw);
    if (eig.eigenvalues().minCoeff() < 1e-8) continue;
    q.finalize();
    return q;
  }
  throw DegenerateInstance("gen_quadratic: inner Gram matrix near-singular after 16 attempts");
}

// Closed-form inner minimizer via the cached normal-equation factor.
inline Vector quadratic_inner_solve(const QuadraticBilevel& q, const Vector& lambda) {
  return q.gram_llt.solve(q.A_iw.transpose() * (q.b_i - q.A_il * lambda));
}

// Fully dense closed-form hyper-gradient; the ground truth every estimator
// is measured against. Shares no code with the matrix-free estimators.
inline Vector quadratic_exact_hypergrad(const QuadraticBilevel& q, const Vector& lambda) {
  const Vector w = quadratic_inner_solve(q, lambda);
  const Vector grad_outer_w =
      (2.0 / static_cast<double>(q.num_samples)) * (q.A_o.transpose() * (q.A_o * w - q.b_o));
  const Eigen::VectorXd x = q.hess_mean.ldlt().solve(grad_outer_w);
  return -(q.cross_mean * x);
}

class QuadraticOracle final : public BilevelOracle {
 public:
  explicit QuadraticOracle(const QuadraticBilevel& q) : q_(q) {}

  Index outer_dim() const override { return q_.outer_dim(); }
  Index inner_dim() const override { return q_.inner_dim(); }

  double outer_value(const Vector& /*lambda*/, const Vector& omega,
                     const SampleKey& key) const override {
    const auto blk = key.resolve(q_.num_samples);
    double acc = 0.0;
    detail::for_segments(blk, [&](Index off, Index cnt) {
      acc += (q_.A_o.middleRows(off, cnt) * omega - q_.b_o.segment(off, cnt)).squaredNorm();
    });
    return acc / static_cast<double>(blk.count);
  }

  Vector grad_outer_lambda(const Vector& /*l*/, const Vector& /*w*/,
                           const SampleKey& /*key*/) const override {
    return Vector::Zero(q_.outer_dim());  // outer objective has no direct lambda term
  }

  Vector grad_outer_omega(const Vector& /*l*/, const Vector& omega,
                          const SampleKey& key) const override {
    const auto blk = key.resolve(q_.num_samples);
    Vector acc = Vector::Zero(q_.inner_dim());
    detail::for_segments(blk, [&](Index off, Index cnt) {
      acc += q_.A_o.middleRows(off, cnt).transpose() *
             (q_.A_o.middleRows(off, cnt) * omega - q_.b_o.segment(off, cnt));
    });
    return (2.0 / static_cast<double>(blk.count)) * acc;
  }

  Vector grad_inner_omega(const Vector& lambda, const Vector& omega,
                          const SampleKey& key) const override {
    const auto blk = key.resolve(q_.num_samples);
    Vector acc = Vector::Zero(q_.inner_dim());
    detail::for_segments(blk, [&](Index off, Index cnt) {
      acc += q_.A_iw.middleRows(off, cnt).transpose() *
             (q_.A_il.middleRows(off, cnt) * lambda + q_.A_iw.middleRows(off, cnt) * omega -
              q_.b_i.segment(off, cnt));
    });
    return (2.0 / static_cast<double>(blk.count)) * acc;
  }

  Vector hvp_inner(const Vector& /*l*/, const Vector& /*w*/, const Vector& v,
                   const SampleKey& key) const override {
    const auto blk = key.resolve(q_.num_samples);
    Vector acc = Vector::Zero(q_.inner_dim());
    detail::for_segments(blk, [&](Index off, Index cnt) {
      acc += q_.A_iw.middleRows(off, cnt).transpose() * (q_.A_iw.middleRows(off, cnt) * v);
    });
    return (2.0 / static_cast<double>(blk.count)) * acc;
  }

  Vector cross_jvp_inner(const Vector& /*l*/, const Vector& /*w*/, const Vector& v,
                         const SampleKey& key) const override {
    const auto blk = key.resolve(q_.num_samples);
    Vector acc = Vector::Zero(q_.outer_dim());
    detail::for_segments(blk, [&](Index off, Index cnt) {
      acc += q_.A_il.middleRows(off, cnt).transpose() * (q_.A_iw.middleRows(off, cnt) * v);
    });
    return (2.0 / static_cast<double>(blk.count)) * acc;
  }

  double strong_convexity_mu() const override { return q_.mu; }
  double smoothness_L() const override { return q_.L; }
  bool constant_curvature() const override { return true; }

  std::optional<double> inner_value(const Vector& lambda, const Vector& omega,
                                    const SampleKey& key) const override {
    const auto blk = key.resolve(q_.num_samples);
    double acc = 0.0;
    detail::for_segments(blk, [&](Index off, Index cnt) {
      acc += (q_.A_il.middleRows(off, cnt) * lambda + q_.A_iw.middleRows(off, cnt) * omega -
              q_.b_i.segment(off, cnt))
                 .squaredNorm();
    });
    return acc / static_cast<double>(blk.count);
  }

 private:
  const QuadraticBilevel& q_;
};

// Label-noise cleaning task: the outer variable carries one logit per
// training sample; sigmoid(lambda_j) weights sample j in a ridge-regularized
// logistic regression. The outer objective is the unweighted logistic loss
// on a clean validation set.
struct CleaningProblem {
  Matrix train_x;  // N_i x d
  Vector train_y;  // entries in {0,1}
  std::vector<char> corrupted_mask;
  Matrix val_x;  // N_v x d
  Vector val_y;
  double ridge_mu = 0.0;

  Index train_size() const { return train_x.rows(); }
  Index val_size() const { return val_x.rows(); }
  Index feature_dim() const { return train_x.cols(); }
};

// Two Gaussian blobs separated along a seeded random direction; exactly
// floor(gamma * N_i) training labels flipped, mask recorded; validation
// clean.
inline CleaningProblem gen_cleaning(std::uint64_t seed, Index N_i, Index N_v, Index d,
                                    double gamma, double blob_separation, double ridge_mu) {
  if (gamma < 0.0 || gamma >= 1.0) throw InvalidConfig("gen_cleaning: gamma must be in [0,1)");
  if (d < 2) throw InvalidConfig("gen_cleaning: need d >= 2");
  if (N_i < 1 || N_v < 1) throw InvalidConfig("gen_cleaning: need at least one sample per set");
  if (ridge_mu <= 0.0) throw InvalidConfig("gen_cleaning: ridge_mu must be > 0");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);

  Vector direction = Vector::NullaryExpr(d, [&]() { return gauss(rng); });
  direction.normalize();

  auto fill_set = [&](Index count, Matrix& x, Vector& y) {
    x.resize(count, d);
    y.resize(count);
    for (Index i = 0; i < count; ++i) {
      const double label = coin(rng) ? 1.0 : 0.0;
      const double side = label > 0.5 ? 0.5 : -0.5;
      for (Index j = 0; j < d; ++j)
        x(i, j) = side * blob_separation * direction[j] + gauss(rng);
      y[i] = label;
    }
  };

  CleaningProblem p;
  p.ridge_mu = ridge_mu;
  fill_set(N_i, p.train_x, p.train_y);
  fill_set(N_v, p.val_x, p.val_y);

  p.corrupted_mask.assign(N_i, 0);
  const Index flips = static_cast<Index>(gamma * static_cast<double>(N_i));
  std::vector<Index> order(N_i);
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  for (Index i = 0; i < flips; ++i) {
    const Index j = order[i];
    p.train_y[j] = 1.0 - p.train_y[j];
    p.corrupted_mask[j] = 1;
  }
  return p;
}

class CleaningOracle final : public BilevelOracle {
 public:
  explicit CleaningOracle(const CleaningProblem& p) : p_(p) {
    double sumsq = 0.0;
    for (Index j = 0; j < p_.train_size(); ++j) sumsq += p_.train_x.row(j).squaredNorm();
    // sigma(lambda_j) <= 1 and s(1-s) <= 1/4 bound the Hessian norm
    // independently of the state.
    L_ = p_.ridge_mu + sumsq / (4.0 * static_cast<double>(p_.train_size()));
  }

  Index outer_dim() const override { return p_.train_size(); }
  Index inner_dim() const override { return p_.feature_dim(); }

  double outer_value(const Vector& /*lambda*/, const Vector& omega,
                     const SampleKey& key) const override {
    const auto blk = key.resolve(p_.val_size());
    double acc = 0.0;
    detail::for_segments(blk, [&](Index off, Index cnt) {
      for (Index i = off; i < off + cnt; ++i) {
        const double z = p_.val_x.row(i).dot(omega);
        acc += detail::log1pexp(z) - p_.val_y[i] * z;
      }
    });
    return acc / static_cast<double>(blk.count);
  }

  Vector grad_outer_lambda(const Vector& /*l*/, const Vector& /*w*/,
                           const SampleKey& /*key*/) const override {
    return Vector::Zero(outer_dim());  // validation loss has no direct lambda term
  }

  Vector grad_outer_omega(const Vector& /*l*/, const Vector& omega,
                          const SampleKey& key) const override {
    const auto blk = key.resolve(p_.val_size());
    Vector acc = Vector::Zero(inner_dim());
    detail::for_segments(blk, [&](Index off, Index cnt) {
      for (Index i = off; i < off + cnt; ++i) {
        const double s = detail::sigmoid(p_.val_x.row(i).dot(omega));
        acc += (s - p_.val_y[i]) * p_.val_x.row(i).transpose();
      }
    });
    return acc / static_cast<double>(blk.count);
  }

  Vector grad_inner_omega(const Vector& lambda, const Vector& omega,
                          const SampleKey& key) const override {
    const auto blk = key.resolve(p_.train_size());
    Vector acc = Vector::Zero(inner_dim());
    detail::for_segments(blk, [&](Index off, Index cnt) {
      for (Index j = off; j < off + cnt; ++j) {
        const double s = detail::sigmoid(p_.train_x.row(j).dot(omega));
        acc += detail::sigmoid(lambda[j]) * (s - p_.train_y[j]) * p_.train_x.row(j).transpose();
      }
    });
    return acc / static_cast<double>(blk.count) + p_.ridge_mu * omega;
  }

  Vector hvp_inner(const Vector& lambda, const Vector& omega, const Vector& v,
                   const SampleKey& key) const override {
    const auto blk = key.resolve(p_.train_size());
    Vector acc = Vector::Zero(inner_dim());
    detail::for_segments(blk, [&](Index off, Index cnt) {
      for (Index j = off; j < off + cnt; ++j) {
        const double s = detail::sigmoid(p_.train_x.row(j).dot(omega));
        acc += detail::sigmoid(lambda[j]) * s * (1.0 - s) * p_.train_x.row(j).dot(v) *
               p_.train_x.row(j).transpose();
      }
    });
    return acc / static_cast<double>(blk.count) + p_.ridge_mu * v;
  }

  Vector cross_jvp_inner(const Vector& lambda, const Vector& omega, const Vector& v,
                         const SampleKey& key) const override {
    // Each lambda_j couples only to its own sample, so the product is sparse
    // over the sampled block.
    const auto blk = key.resolve(p_.train_size());
    Vector out = Vector::Zero(outer_dim());
    detail::for_segments(blk, [&](Index off, Index cnt) {
      for (Index j = off; j < off + cnt; ++j) {
        const double sig = detail::sigmoid(lambda[j]);
        const double s = detail::sigmoid(p_.train_x.row(j).dot(omega));
        out[j] = sig * (1.0 - sig) * (s - p_.train_y[j]) * p_.train_x.row(j).dot(v) /
                 static_cast<double>(blk.count);
      }
    });
    return out;
  }

  double strong_convexity_mu() const override { return p_.ridge_mu; }
  double smoothness_L() const override { return L_; }

  std::optional<double> inner_value(const Vector& lambda, const Vector& omega,
                                    const SampleKey& key) const override {
    const auto blk = key.resolve(p_.train_size());
    double acc = 0.0;
    detail::for_segments(blk, [&](Index off, Index cnt) {
      for (Index j = off; j < off + cnt; ++j) {
        const double z = p_.train_x.row(j).dot(omega);
        acc += detail::sigmoid(lambda[j]) * (detail::log1pexp(z) - p_.train_y[j] * z);
      }
    });
    return acc / static_cast<double>(blk.count) + 0.5 * p_.ridge_mu * omega.squaredNorm();
  }

 private:
  const CleaningProblem& p_;
  double L_;
};

inline CleaningOracle cleaning_oracle(const CleaningProblem& p) { return CleaningOracle(p); }

// Power-law sequence omega_k = omega_star + omega_tilde / k^alpha, k >= 1,
// so the distance to omega_star is exactly ||omega_tilde|| * k^-alpha.
struct SyntheticOmegaSeq {
  Vector omega_star;
  Vector omega_tilde;
  double alpha = 1.0;
};

inline std::vector<Vector> gen_omega_seq(const SyntheticOmegaSeq& s, int K) {
  if (K < 1) throw InvalidConfig("gen_omega_seq: K must be >= 1");
  if (s.alpha <= 0.0) throw InvalidConfig("gen_omega_seq: alpha must be > 0");
  std::vector<Vector> seq;
  seq.reserve(K);
  for (int k = 1; k <= K; ++k)
    seq.push_back(s.omega_star + s.omega_tilde / std::pow(static_cast<double>(k), s.alpha));
  return seq;
}

// Dataset export for external inspection. Column order:
//   set,label,corrupted,f0,...,f{d-1}
// with set in {train,val}; corrupted is always 0 for validation rows.
inline std::string cleaning_to_csv(const CleaningProblem& p) {
  std::string out = "set,label,corrupted";
  for (Index j = 0; j < p.feature_dim(); ++j) out += ",f" + std::to_string(j);
  out += "\n";
  char buf[64];
  auto emit_row = [&](const char* set, double label, int corrupted, const auto& row) {
    out += set;
    std::snprintf(buf, sizeof(buf), ",%d,%d", static_cast<int>(label), corrupted);
    out += buf;
    for (Index j = 0; j < row.size(); ++j) {
      std::snprintf(buf, sizeof(buf), ",%.17g", row[j]);
      out += buf;
    }
    out += "\n";
  };
  for (Index i = 0; i < p.train_size(); ++i)
    emit_row("train", p.train_y[i], p.corrupted_mask[i], p.train_x.row(i));
  for (Index i = 0; i < p.val_size(); ++i) emit_row("val", p.val_y[i], 0, p.val_x.row(i));
  return out;
}

inline CleaningProblem cleaning_from_csv(const std::string& csv, double ridge_mu) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line)) throw InvalidConfig("cleaning_from_csv: empty input");
  Index d = -2;  // header has 3 fixed columns
  for (char c : line)
    if (c == ',') ++d;

  std::vector<std::vector<double>> train_rows, val_rows;
  std::vector<double> train_y, val_y;
  std::vector<char> mask;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    const bool is_train = cell == "train";
    if (!is_train && cell != "val") throw InvalidConfig("cleaning_from_csv: bad set column");
    std::getline(ls, cell, ',');
    const double label = std::stod(cell);
    std::getline(ls, cell, ',');
    const int corrupted = std::stoi(cell);
    std::vector<double> feats;
    while (std::getline(ls, cell, ',')) feats.push_back(std::stod(cell));
    if (static_cast<Index>(feats.size()) != d)
      throw InvalidConfig("cleaning_from_csv: ragged feature row");
    if (is_train) {
      train_rows.push_back(std::move(feats));
      train_y.push_back(label);
      mask.push_back(static_cast<char>(corrupted));
    } else {
      val_rows.push_back(std::move(feats));
      val_y.push_back(label);
    }
  }

  auto to_matrix = [d](const std::vector<std::vector<double>>& rows) {
    Matrix m(static_cast<Index>(rows.size()), d);
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < d; ++j) m(i, j) = rows[i][j];
    return m;
  };
  CleaningProblem p;
  p.train_x = to_matrix(train_rows);
  p.val_x = to_matrix(val_rows);
  p.train_y = Eigen::Map<const Vector>(train_y.data(), static_cast<Index>(train_y.size()));
  p.val_y = Eigen::Map<const Vector>(val_y.data(), static_cast<Index>(val_y.size()));
  p.corrupted_mask = std::move(mask);
  p.ridge_mu = ridge_mu;
  return p;
}

}  // namespace bilevel
