#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "mabn/hash.hpp"

namespace mabn {

/// Seeded random stream. All stochastic choices in the library go through
/// this wrapper so that a (config, seed) pair pins every output byte.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(eng_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (stddev <= 0.0) return mean;  // normal_distribution needs sigma > 0
    std::normal_distribution<double> d(mean, stddev);
    return d(eng_);
  }

  /// Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    std::uniform_int_distribution<int64_t> d(lo, hi);
    return d(eng_);
  }

  bool bernoulli(double p) { return uniform(0.0, 1.0) < p; }

  /// Fisher-Yates; pinned here rather than std::shuffle so the draw sequence
  /// is part of this library's contract.
  template <typename T>
  void shuffle(std::vector<T>& xs) {
    for (int64_t i = static_cast<int64_t>(xs.size()) - 1; i > 0; --i) {
      int64_t j = uniform_int(0, i);
      std::swap(xs[static_cast<size_t>(i)], xs[static_cast<size_t>(j)]);
    }
  }

  /// k distinct indices drawn from [0, n), in draw order.
  std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k);

  /// Child stream independent of this one.
  Rng fork(std::string_view tag) { return Rng(derive_seed(eng_(), tag)); }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace mabn
