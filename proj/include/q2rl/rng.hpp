#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>

#include "q2rl/errors.hpp"

namespace q2rl {

// Deterministically derives an independent stream seed from (seed, salt).
// splitmix64 finalizer; identical output on every platform.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

// Hashes a short tag string into a salt usable with mix_seed (FNV-1a).
std::uint64_t tag_salt(const char* tag);

// Random stream with explicitly implemented distributions so that sequences
// are reproducible across standard libraries (std::normal_distribution is
// implementation defined; Box-Muller below is not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n); rejection sampling keeps it unbiased.
  int uniform_int(int n) {
    if (n <= 0) throw InputError("uniform_int: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return static_cast<int>(x % un);
  }

  // Standard normal via Box-Muller; caches the second variate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    constexpr double two_pi = 6.283185307179586476925286766559;
    spare_ = r * std::sin(two_pi * u2);
    has_spare_ = true;
    return r * std::cos(two_pi * u2);
  }

  Eigen::VectorXd normal_vector(int n) {
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  Eigen::MatrixXd normal_matrix(int rows, int cols) {
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) m(r, c) = normal();
    return m;
  }

  // k distinct indices from [0, n), in draw order (partial Fisher-Yates).
  std::vector<int> distinct_indices(int k, int n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace q2rl
