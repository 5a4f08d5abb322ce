#include "mabn/rng.hpp"

#include "mabn/errors.hpp"

namespace mabn {

std::vector<int64_t> Rng::sample_without_replacement(int64_t n, int64_t k) {
  if (k > n || k < 0) {
    throw DataError("InsufficientSamples: cannot draw " + std::to_string(k) + " of " +
                    std::to_string(n));
  }
  // Partial Fisher-Yates over an index vector.
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  for (int64_t i = 0; i < k; ++i) {
    int64_t j = uniform_int(i, n - 1);
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  idx.resize(static_cast<size_t>(k));
  return idx;
}

}  // namespace mabn
