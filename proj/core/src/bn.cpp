#include "mabn/bn.hpp"

namespace mabn {

const char* bn_mode_name(BNMode mode) {
  switch (mode) {
    case BNMode::Train: return "Train";
    case BNMode::Frozen: return "Frozen";
    case BNMode::Eval: return "Eval";
  }
  return "?";
}

BNLayer BNLayer::make(int64_t channels, std::string name, double retention, double eps) {
  if (channels <= 0) throw ShapeError("ChannelMismatch: BN layer needs channels > 0");
  if (retention < 0.0 || retention > 1.0) {
    throw ConfigError("BN retention must be in [0,1], got " + std::to_string(retention));
  }
  if (eps < 0.0) throw ConfigError("BN eps must be >= 0");
  BNLayer bn;
  bn.gamma = Tensor::full({channels}, 1.0, /*requires_grad=*/true);
  bn.beta = Tensor::zeros({channels}, /*requires_grad=*/true);
  bn.running_mean.assign(static_cast<size_t>(channels), 0.0);
  bn.running_var.assign(static_cast<size_t>(channels), 1.0);
  bn.retention = retention;
  bn.eps = eps;
  bn.name = std::move(name);
  return bn;
}

void BNLayer::set_mode(BNMode m) {
  mode = m;
  const bool learnable = (m != BNMode::Eval);
  gamma.set_requires_grad(learnable);
  beta.set_requires_grad(learnable);
}

Tensor bn_forward(const Tensor& x, BNLayer& state) {
  if (x.dim() != 2 && x.dim() != 4) {
    throw ShapeError("ShapeMismatch: bn_forward needs [N,C] or [N,C,H,W], got " +
                     shape_str(x.shape()));
  }
  if (x.shape()[1] != state.channels()) {
    throw ShapeError("ChannelMismatch: input has " + std::to_string(x.shape()[1]) +
                     " channels, BN layer '" + state.name + "' has " +
                     std::to_string(state.channels()));
  }

  Tensor mean, var;
  if (state.mode == BNMode::Train) {
    if (x.shape()[0] < 2) {
      throw ModeError("BatchTooSmall: Train-mode BN needs batch >= 2, got " +
                      std::to_string(x.shape()[0]));
    }
    std::vector<int64_t> axes = x.dim() == 4 ? std::vector<int64_t>{0, 2, 3}
                                             : std::vector<int64_t>{0};
    mean = ops::mean_axis(x, axes);
    var = ops::var_axis(x, axes);
    bn_update_running(state, mean.values(), var.values());
  } else {
    mean = Tensor::create({state.channels()}, state.running_mean);
    var = Tensor::create({state.channels()}, state.running_var);
  }

  Tensor centered = ops::add_channel(x, ops::neg(mean));
  Tensor inv_std = ops::rsqrt(ops::add_scalar(var, state.eps));
  Tensor normalized = ops::mul_channel(centered, inv_std);
  return ops::add_channel(ops::mul_channel(normalized, state.gamma), state.beta);
}

void bn_update_running(BNLayer& state, std::span<const double> batch_mean,
                       std::span<const double> batch_var) {
  if (state.mode != BNMode::Train) {
    throw ModeError(std::string("ModeViolation: running statistics update in ") +
                    bn_mode_name(state.mode) + " mode");
  }
  if (batch_mean.size() != state.running_mean.size() ||
      batch_var.size() != state.running_var.size()) {
    throw ShapeError("ChannelMismatch: running statistics update size");
  }
  const double m = state.retention;
  for (size_t c = 0; c < state.running_mean.size(); ++c) {
    state.running_mean[c] = m * state.running_mean[c] + (1.0 - m) * batch_mean[c];
    state.running_var[c] = m * state.running_var[c] + (1.0 - m) * batch_var[c];
  }
}

}  // namespace mabn
