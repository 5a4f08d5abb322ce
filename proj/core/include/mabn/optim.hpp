#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mabn/tensor.hpp"

namespace mabn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter first/second moment buffers plus step counter for Adam
/// with bias correction. Buffers are laid out to match the parameter list
/// passed at construction; every step must use the same list.
class AdamState {
 public:
  explicit AdamState(const std::vector<Tensor>& params, AdamConfig cfg = {});

  /// One Adam update using explicit gradients (outer vector parallel to
  /// params). Deterministic; lr > 0 not required (lr = 0 is a no-op).
  void step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads, double lr);

  /// Convenience overload pulling gradients accumulated on the params.
  /// Parameters without a populated grad are treated as zero-gradient.
  void step(std::vector<Tensor>& params, double lr);

  int64_t step_count() const { return t_; }

 private:
  void apply(std::vector<Tensor>& params, const std::vector<std::span<const double>>& grads,
             double lr);

  std::vector<std::vector<double>> m_, v_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

/// p <- p - lr * g with explicit gradients.
void sgd_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
              double lr);

/// p <- p - lr * grad(p); params without a populated grad are skipped.
void sgd_step(std::vector<Tensor>& params, double lr);

}  // namespace mabn
