#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Core>
#include <Eigen/Dense>

namespace bilevel {

using Vector = Eigen::VectorXd;
// Row-major by convention; only index semantics are part of any contract.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

// An iterate or operator output contained NaN/Inf.
struct NonFiniteValue : std::runtime_error {
  explicit NonFiniteValue(const std::string& what) : std::runtime_error(what) {}
};

// A solver state norm blew past the divergence guard.
struct Diverged : std::runtime_error {
  explicit Diverged(const std::string& what) : std::runtime_error(what) {}
};

// exact_hypergrad was handed an inner point that is not converged enough.
struct InnerNotConverged : std::runtime_error {
  explicit InnerNotConverged(const std::string& what) : std::runtime_error(what) {}
};

// Learning-rate schedule violates a validity condition (e.g. beta > 1/L).
struct InvalidSchedule : std::invalid_argument {
  explicit InvalidSchedule(const std::string& what) : std::invalid_argument(what) {}
};

struct InvalidConfig : std::invalid_argument {
  explicit InvalidConfig(const std::string& what) : std::invalid_argument(what) {}
};

// Randomly generated problem instance failed a well-posedness check.
struct DegenerateInstance : std::runtime_error {
  explicit DegenerateInstance(const std::string& what) : std::runtime_error(what) {}
};

inline bool all_finite(const Vector& v) { return v.allFinite(); }

// splitmix64 finalizer; used to derive independent sample-key seeds from a
// base seed and (iteration, slot) coordinates so traces replay bit-exactly.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t iteration, std::uint64_t slot) {
  return mix64(base ^ mix64(iteration * 8 + slot));
}

}  // namespace bilevel
