#pragma once

#include <vector>

#include "mabn/tensor.hpp"

namespace mabn::ops {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);

// Elementwise with a scalar attribute.
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

/// 1/sqrt(x) elementwise; inputs must be positive.
Tensor rsqrt(const Tensor& a);

// Per-channel broadcast over axis 1 of a rank-2 [N,C] or rank-4 [N,C,H,W]
// tensor; v has shape [C]. This is the only broadcasting in the engine.
Tensor add_channel(const Tensor& x, const Tensor& v);
Tensor mul_channel(const Tensor& x, const Tensor& v);

/// [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// max(x, 0); subgradient at 0 is 0.
Tensor relu(const Tensor& x);

/// 3x3 convolution, stride 1, zero padding 1. x: [N,Ci,H,W], w: [Co,Ci,3,3],
/// bias: [Co] (pass an empty tensor to skip). Output [N,Co,H,W].
Tensor conv2d_3x3(const Tensor& x, const Tensor& w, const Tensor& bias);

/// Mean over the given axes; reduced axes are removed from the shape
/// (reducing all axes yields a scalar [1]).
Tensor mean_axis(const Tensor& x, std::vector<int64_t> axes);

/// Population (1/N) variance over the given axes.
Tensor var_axis(const Tensor& x, std::vector<int64_t> axes);

/// Mean softmax cross-entropy over the batch. logits: [N,K]; labels in [0,K).
Tensor softmax_ce(const Tensor& logits, const std::vector<int>& labels);

/// Mean squared error over all elements; shapes must match.
Tensor mse(const Tensor& a, const Tensor& b);

/// Row-wise L2 normalization of [N,D] (or a single [D] vector). Rows with
/// norm below `eps` are scaled by 1/eps instead of exploding.
Tensor l2_normalize(const Tensor& x, double eps = 1e-12);

/// Row-wise cosine similarity of two [N,D] tensors -> [N].
Tensor cosine_sim(const Tensor& a, const Tensor& b, double eps = 1e-12);

/// Mean over the batch of the softmax prediction entropy -sum p*log p.
Tensor softmax_entropy(const Tensor& logits);

/// Rotate the spatial dims of [N,C,H,W] counter-clockwise by k*90 degrees.
/// Requires H == W (NonSquare otherwise).
Tensor rotate90k(const Tensor& x, int k);

/// Concatenate along `axis`; all other dims must match.
Tensor concat(const std::vector<Tensor>& xs, int64_t axis);

/// Same data, new shape; numel must match.
Tensor reshape(const Tensor& x, Shape new_shape);

}  // namespace mabn::ops
