#pragma once

#include <utility>
#include <vector>

#include "mabn/model.hpp"
#include "mabn/rng.hpp"
#include "mabn/tensor.hpp"

namespace mabn {

/// Expands [B,C,H,W] into [4B,C,H,W] with each input rotated by
/// 0/90/180/270 degrees in consecutive positions; labels cycle 0..3.
/// NonSquare if H != W. The output is a fresh data batch (a graph leaf).
std::pair<Tensor, std::vector<int>> make_rotation_batch(const Tensor& x);

/// One augmented view of a data batch: crop jitter and horizontal flip for
/// images, Gaussian noise for everything. Returns a fresh leaf tensor.
Tensor augment_view(const Tensor& x, const AugmentConfig& cfg, Rng& rng);

/// Cross-entropy of the rotation classifier on make_rotation_batch(x).
Tensor ssl_loss_rotation(Model& model, const Tensor& x);

/// Symmetrized BYOL loss: mean over the batch of
///   ((2 - 2 cos(pred(online(v1)), target(v2))) +
///    (2 - 2 cos(pred(online(v2)), target(v1)))) / 2,
/// in [0,4]. Projections are L2-normalized before the cosine. Gradients
/// flow only into online parameters; the target path is constant.
Tensor ssl_loss_byol(Model& model, const Tensor& x, Rng& rng);

/// Dispatch on the model's SSL task.
Tensor ssl_loss(Model& model, const Tensor& x, Rng& rng);

/// ce + lambda * ssl on the same graph.
Tensor joint_loss(const Tensor& ce, const Tensor& ssl, double lambda);

}  // namespace mabn
