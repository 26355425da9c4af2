#pragma once

#include "rankprobe/linalg.hpp"

#include <cstdint>
#include <random>

namespace rankprobe {

// Seeded source for every random draw in the project. Draw order is fixed by
// the callers, so a seed fully determines the output on one toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // stddev * N(0, 1); stddev = 0 is allowed.
  double normal(double stddev = 1.0) { return stddev * standard_(engine_); }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }

  // Uniform integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }

  Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
    Matrix m(rows, cols);
    // Row-major fill, matching the serialised layout.
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(stddev);
    return m;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> standard_{0.0, 1.0};
};

}  // namespace rankprobe
