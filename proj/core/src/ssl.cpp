#include "mabn/ssl.hpp"

#include <cmath>

#include "mabn/ops.hpp"

namespace mabn {

namespace {

// Rotation mapping shared with ops::rotate90k, applied per sample here so
// the batch comes out input-major (sample 0 at 0/90/180/270, sample 1 ...).
void rotate_plane(const double* src, double* dst, int64_t h, int k) {
  for (int64_t i = 0; i < h; ++i) {
    for (int64_t j = 0; j < h; ++j) {
      int64_t si, sj;
      switch (k) {
        case 1: si = j; sj = h - 1 - i; break;
        case 2: si = h - 1 - i; sj = h - 1 - j; break;
        case 3: si = h - 1 - j; sj = i; break;
        default: si = i; sj = j; break;
      }
      dst[i * h + j] = src[si * h + sj];
    }
  }
}

}  // namespace

std::pair<Tensor, std::vector<int>> make_rotation_batch(const Tensor& x) {
  if (x.dim() != 4) {
    throw ShapeError("ShapeMismatch: make_rotation_batch needs [N,C,H,W], got " +
                     shape_str(x.shape()));
  }
  if (x.shape()[2] != x.shape()[3]) {
    throw ShapeError("NonSquare: make_rotation_batch needs H == W, got " + shape_str(x.shape()));
  }
  const int64_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2];
  const int64_t sample = c * h * h;
  auto xv = x.values();
  std::vector<double> out(static_cast<size_t>(4 * n * sample));
  std::vector<int> labels(static_cast<size_t>(4 * n));
  for (int64_t i = 0; i < n; ++i) {
    for (int k = 0; k < 4; ++k) {
      const int64_t oi = i * 4 + k;
      labels[static_cast<size_t>(oi)] = k;
      for (int64_t ch = 0; ch < c; ++ch) {
        rotate_plane(xv.data() + (i * c + ch) * h * h, out.data() + (oi * c + ch) * h * h, h, k);
      }
    }
  }
  return {Tensor::create({4 * n, c, h, h}, std::move(out)), std::move(labels)};
}

Tensor augment_view(const Tensor& x, const AugmentConfig& cfg, Rng& rng) {
  std::vector<double> out(x.values().begin(), x.values().end());
  if (x.dim() == 4) {
    const int64_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    for (int64_t i = 0; i < n; ++i) {
      const int64_t dy = cfg.crop_jitter > 0 ? rng.uniform_int(-cfg.crop_jitter, cfg.crop_jitter) : 0;
      const int64_t dx = cfg.crop_jitter > 0 ? rng.uniform_int(-cfg.crop_jitter, cfg.crop_jitter) : 0;
      const bool flip = cfg.flip_prob > 0.0 && rng.bernoulli(cfg.flip_prob);
      if (dy != 0 || dx != 0 || flip) {
        for (int64_t ch = 0; ch < c; ++ch) {
          const double* src = x.values().data() + (i * c + ch) * h * w;
          double* dst = out.data() + (i * c + ch) * h * w;
          for (int64_t y = 0; y < h; ++y) {
            for (int64_t xx = 0; xx < w; ++xx) {
              int64_t sx = flip ? w - 1 - xx : xx;
              const int64_t sy = y + dy;
              sx += dx;
              dst[y * w + xx] =
                  (sy >= 0 && sy < h && sx >= 0 && sx < w) ? src[sy * w + sx] : 0.0;
            }
          }
        }
      }
    }
  } else if (x.dim() != 2) {
    throw ShapeError("ShapeMismatch: augment_view needs rank 2 or 4 input, got " +
                     shape_str(x.shape()));
  }
  if (cfg.noise_std > 0.0) {
    for (double& v : out) v += rng.normal(0.0, cfg.noise_std);
  }
  return Tensor::create(x.shape(), std::move(out));
}

Tensor ssl_loss_rotation(Model& model, const Tensor& x) {
  auto [rot, labels] = make_rotation_batch(x);
  Tensor feats = model.backbone_forward(rot);
  Tensor logits = model.ssl_rotation_logits(feats);
  return ops::softmax_ce(logits, labels);
}

Tensor ssl_loss_byol(Model& model, const Tensor& x, Rng& rng) {
  if (!model.byol_head()) throw ShapeError("HeadMismatch: model has no BYOL head");
  if (!model.has_byol_target()) {
    throw ConfigError("MissingTarget: BYOL loss needs the EMA target network");
  }
  const AugmentConfig& aug = model.ssl_config().augment;
  Tensor v1 = augment_view(x, aug, rng);
  Tensor v2 = augment_view(x, aug, rng);

  Tensor p1 = ops::l2_normalize(model.byol_predict(model.byol_project(model.backbone_forward(v1))));
  Tensor p2 = ops::l2_normalize(model.byol_predict(model.byol_project(model.backbone_forward(v2))));
  Tensor t1 = ops::l2_normalize(model.byol_target_embed(v1));
  Tensor t2 = ops::l2_normalize(model.byol_target_embed(v2));

  Tensor c1 = ops::cosine_sim(p1, t2);
  Tensor c2 = ops::cosine_sim(p2, t1);
  // ((2-2c1)+(2-2c2))/2 = 2 - c1 - c2 per row.
  Tensor per_row = ops::add_scalar(ops::neg(ops::add(c1, c2)), 2.0);
  return ops::mean_axis(per_row, {0});
}

Tensor ssl_loss(Model& model, const Tensor& x, Rng& rng) {
  return model.ssl_kind() == SslKind::Rotation4 ? ssl_loss_rotation(model, x)
                                                : ssl_loss_byol(model, x, rng);
}

Tensor joint_loss(const Tensor& ce, const Tensor& ssl, double lambda) {
  return ops::add(ce, ops::scale(ssl, lambda));
}

}  // namespace mabn
