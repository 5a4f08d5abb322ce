#pragma once

#include <span>
#include <string>
#include <vector>

#include "mabn/ops.hpp"
#include "mabn/tensor.hpp"

namespace mabn {

/// Statistics behavior of a BN layer.
///  - Train:  normalize with batch statistics, update running statistics,
///            affine parameters learnable.
///  - Frozen: normalize with running statistics, statistics never written,
///            affine parameters learnable (the adaptation mode).
///  - Eval:   like Frozen but affine parameters fixed (inference).
enum class BNMode : uint8_t { Train = 0, Frozen = 1, Eval = 2 };

const char* bn_mode_name(BNMode mode);

/// Per-channel scale/shift plus running first/second moments. The affine
/// pair (gamma, beta) is the only state test-time adaptation touches.
struct BNLayer {
  Tensor gamma;                      // [C]
  Tensor beta;                       // [C]
  std::vector<double> running_mean;  // mu'
  std::vector<double> running_var;   // sigma'^2, componentwise >= 0
  double retention = 0.9;            // m: fraction of the old estimate kept per update
  double eps = 1e-5;
  BNMode mode = BNMode::Train;
  std::string name;

  static BNLayer make(int64_t channels, std::string name, double retention = 0.9,
                      double eps = 1e-5);

  int64_t channels() const { return gamma.numel(); }
  void set_mode(BNMode m);
};

/// Normalize-and-affine per channel of a [N,C] or [N,C,H,W] input.
/// Train mode requires batch >= 2 and folds the batch statistics into the
/// running estimates; Frozen/Eval normalize with the stored statistics and
/// never write them.
Tensor bn_forward(const Tensor& x, BNLayer& state);

/// mu' <- m*mu' + (1-m)*mu_batch and likewise for the variance.
/// ModeViolation outside Train mode.
void bn_update_running(BNLayer& state, std::span<const double> batch_mean,
                       std::span<const double> batch_var);

}  // namespace mabn
