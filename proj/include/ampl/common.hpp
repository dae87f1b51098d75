#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>

namespace ampl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;  // batches are stored column-wise: dim x n
using Rng = std::mt19937_64;

/// Raised when a loss or network output stops being finite.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

/// Derives an independent stream from a parent seed (splitmix64 finaliser).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline Matrix normal_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = stddev * dist(rng);
  return m;
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

/// Number of worker threads for parallel sections; AMPL_THREADS caps it.
int thread_budget();

/// Runs fn(0..n-1) on up to thread_budget() threads. Callers must make
/// each index independent of the others.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace ampl
