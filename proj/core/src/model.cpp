#include "mabn/model.hpp"

#include <cmath>

#include "mabn/hash.hpp"

namespace mabn {

const char* scope_name(Scope s) {
  switch (s) {
    case Scope::AffineOnly: return "AffineOnly";
    case Scope::FullBN: return "FullBN";
    case Scope::AllParams: return "AllParams";
    case Scope::ThetaOnly: return "ThetaOnly";
  }
  return "?";
}

void SSLTaskConfig::validate() const {
  if (byol.ema_tau < 0.0 || byol.ema_tau >= 1.0) {
    throw ConfigError("byol.ema_tau must be in [0,1), got " + std::to_string(byol.ema_tau));
  }
  if (byol.projection_dim < 1) throw ConfigError("byol.projection_dim must be >= 1");
  if (byol.predictor_hidden < 1) throw ConfigError("byol.predictor_hidden must be >= 1");
  if (rotation_hidden < 1) throw ConfigError("ssl.rotation_hidden must be >= 1");
  if (augment.noise_std < 0.0) throw ConfigError("augmentation.noise_std must be >= 0");
  if (augment.crop_jitter < 0) throw ConfigError("augmentation.crop_jitter must be >= 0");
  if (augment.flip_prob < 0.0 || augment.flip_prob > 1.0) {
    throw ConfigError("augmentation.flip_prob must be in [0,1]");
  }
}

void BackboneSpec::validate() const {
  if (in_channels < 1) throw ConfigError("backbone.in_channels must be >= 1");
  if (widths.empty()) throw ConfigError("backbone.widths must be non-empty");
  for (int64_t w : widths) {
    if (w < 1) throw ConfigError("backbone.widths entries must be >= 1");
  }
  if (kind == Kind::Conv3 && image_hw < 3) throw ConfigError("backbone.image_hw must be >= 3");
}

LinearLayer LinearLayer::make(int64_t in, int64_t out, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in));
  std::vector<double> w(static_cast<size_t>(in * out));
  for (double& x : w) x = rng.normal(0.0, stddev);
  LinearLayer layer;
  layer.weight = Tensor::create({in, out}, std::move(w), /*requires_grad=*/true);
  layer.bias = Tensor::zeros({out}, /*requires_grad=*/true);
  return layer;
}

ConvLayer ConvLayer::make(int64_t in, int64_t out, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in * 9));
  std::vector<double> w(static_cast<size_t>(out * in * 9));
  for (double& x : w) x = rng.normal(0.0, stddev);
  ConvLayer layer;
  layer.weight = Tensor::create({out, in, 3, 3}, std::move(w), /*requires_grad=*/true);
  layer.bias = Tensor::zeros({out}, /*requires_grad=*/true);
  return layer;
}

namespace {

Tensor linear_forward(const LinearLayer& layer, const Tensor& x) {
  return ops::add_channel(ops::matmul(x, layer.weight), layer.bias);
}

Tensor forward_blocks(std::vector<Block>& blocks, const BackboneSpec& spec, const Tensor& x) {
  if (spec.kind == BackboneSpec::Kind::Conv3) {
    if (x.dim() != 4 || x.shape()[1] != spec.in_channels || x.shape()[2] != spec.image_hw ||
        x.shape()[3] != spec.image_hw) {
      throw ShapeError("ShapeMismatch: backbone expects [N," + std::to_string(spec.in_channels) +
                       "," + std::to_string(spec.image_hw) + "," + std::to_string(spec.image_hw) +
                       "], got " + shape_str(x.shape()));
    }
  } else {
    if (x.dim() != 2 || x.shape()[1] != spec.in_channels) {
      throw ShapeError("ShapeMismatch: backbone expects [N," + std::to_string(spec.in_channels) +
                       "], got " + shape_str(x.shape()));
    }
  }
  Tensor h = x;
  for (auto& block : blocks) {
    h = block.is_conv ? ops::conv2d_3x3(h, block.conv.weight, block.conv.bias)
                      : linear_forward(block.linear, h);
    h = bn_forward(h, block.bn);
    h = ops::relu(h);
  }
  if (spec.kind == BackboneSpec::Kind::Conv3) {
    h = ops::mean_axis(h, {2, 3});  // global average pooling
  }
  return h;
}

LinearLayer clone_linear(const LinearLayer& l) {
  LinearLayer c;
  c.weight = l.weight.detached_copy(l.weight.requires_grad());
  c.bias = l.bias.detached_copy(l.bias.requires_grad());
  return c;
}

ConvLayer clone_conv(const ConvLayer& l) {
  ConvLayer c;
  c.weight = l.weight.detached_copy(l.weight.requires_grad());
  c.bias = l.bias.detached_copy(l.bias.requires_grad());
  return c;
}

BNLayer clone_bn(const BNLayer& bn) {
  BNLayer c;
  c.gamma = bn.gamma.detached_copy(bn.gamma.requires_grad());
  c.beta = bn.beta.detached_copy(bn.beta.requires_grad());
  c.running_mean = bn.running_mean;
  c.running_var = bn.running_var;
  c.retention = bn.retention;
  c.eps = bn.eps;
  c.mode = bn.mode;
  c.name = bn.name;
  return c;
}

Block clone_block(const Block& b) {
  Block c;
  c.is_conv = b.is_conv;
  if (b.is_conv) c.conv = clone_conv(b.conv);
  else c.linear = clone_linear(b.linear);
  c.bn = clone_bn(b.bn);
  return c;
}

void ema_tensor(Tensor& target, const Tensor& online, double tau) {
  auto t = target.values_mut();
  auto o = online.values();
  for (size_t i = 0; i < t.size(); ++i) t[i] = tau * t[i] + (1.0 - tau) * o[i];
}

void ema_vec(std::vector<double>& target, const std::vector<double>& online, double tau) {
  for (size_t i = 0; i < target.size(); ++i) target[i] = tau * target[i] + (1.0 - tau) * online[i];
}

void hash_tensor(uint64_t& h, const Tensor& t) {
  h = fnv1a64(t.values(), h);
}

}  // namespace

Model Model::init(const BackboneSpec& spec, int64_t num_classes, const SSLTaskConfig& ssl,
                  TaskKind task, uint64_t seed) {
  spec.validate();
  ssl.validate();
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");

  Model m;
  m.spec_ = spec;
  m.ssl_cfg_ = ssl;
  m.task_ = task;
  m.num_classes_ = task == TaskKind::Regression ? 1 : num_classes;

  Rng rng(derive_seed(seed, "model_init"));
  int64_t prev = spec.in_channels;
  for (size_t i = 0; i < spec.widths.size(); ++i) {
    Block block;
    block.is_conv = spec.kind == BackboneSpec::Kind::Conv3;
    const int64_t width = spec.widths[i];
    if (block.is_conv) block.conv = ConvLayer::make(prev, width, rng);
    else block.linear = LinearLayer::make(prev, width, rng);
    block.bn = BNLayer::make(width, "block" + std::to_string(i) + ".bn");
    m.blocks_.push_back(std::move(block));
    prev = width;
  }

  const int64_t feat = spec.feature_dim();
  m.classifier_ = LinearLayer::make(feat, m.num_classes_, rng);

  if (ssl.kind == SslKind::Rotation4) {
    RotationHead head;
    head.fc1 = LinearLayer::make(feat, ssl.rotation_hidden, rng);
    head.bn = BNLayer::make(ssl.rotation_hidden, "ssl.bn");
    head.fc2 = LinearLayer::make(ssl.rotation_hidden, 4, rng);
    m.rotation_ = std::move(head);
  } else {
    ByolHead head;
    head.proj1 = LinearLayer::make(feat, ssl.byol.predictor_hidden, rng);
    head.proj_bn = BNLayer::make(ssl.byol.predictor_hidden, "ssl.proj_bn");
    head.proj2 = LinearLayer::make(ssl.byol.predictor_hidden, ssl.byol.projection_dim, rng);
    head.pred1 = LinearLayer::make(ssl.byol.projection_dim, ssl.byol.predictor_hidden, rng);
    head.pred_bn = BNLayer::make(ssl.byol.predictor_hidden, "ssl.pred_bn");
    head.pred2 = LinearLayer::make(ssl.byol.predictor_hidden, ssl.byol.projection_dim, rng);
    m.byol_ = std::move(head);

    ByolTargetState target;
    for (const auto& b : m.blocks_) target.blocks.push_back(clone_block(b));
    target.proj1 = clone_linear(m.byol_->proj1);
    target.proj_bn = clone_bn(m.byol_->proj_bn);
    target.proj2 = clone_linear(m.byol_->proj2);
    for (auto& b : target.blocks) {
      b.bn.set_mode(BNMode::Eval);
      if (b.is_conv) {
        b.conv.weight.set_requires_grad(false);
        b.conv.bias.set_requires_grad(false);
      } else {
        b.linear.weight.set_requires_grad(false);
        b.linear.bias.set_requires_grad(false);
      }
    }
    target.proj1.weight.set_requires_grad(false);
    target.proj1.bias.set_requires_grad(false);
    target.proj_bn.set_mode(BNMode::Eval);
    target.proj2.weight.set_requires_grad(false);
    target.proj2.bias.set_requires_grad(false);
    m.target_ = std::move(target);
  }
  return m;
}

Tensor Model::backbone_forward(const Tensor& x) { return forward_blocks(blocks_, spec_, x); }

Tensor Model::classify(const Tensor& features) {
  if (features.dim() != 2 || features.shape()[1] != spec_.feature_dim()) {
    throw ShapeError("ShapeMismatch: classify expects [N," + std::to_string(spec_.feature_dim()) +
                     "] features, got " + shape_str(features.shape()));
  }
  return linear_forward(classifier_, features);
}

Tensor Model::ssl_rotation_logits(const Tensor& features) {
  if (!rotation_) throw ShapeError("HeadMismatch: model has no 4-way rotation head");
  Tensor h = linear_forward(rotation_->fc1, features);
  h = bn_forward(h, rotation_->bn);
  h = ops::relu(h);
  return linear_forward(rotation_->fc2, h);
}

Tensor Model::byol_project(const Tensor& features) {
  if (!byol_) throw ShapeError("HeadMismatch: model has no BYOL head");
  Tensor h = linear_forward(byol_->proj1, features);
  h = bn_forward(h, byol_->proj_bn);
  h = ops::relu(h);
  return linear_forward(byol_->proj2, h);
}

Tensor Model::byol_predict(const Tensor& projection) {
  if (!byol_) throw ShapeError("HeadMismatch: model has no BYOL head");
  Tensor h = linear_forward(byol_->pred1, projection);
  h = bn_forward(h, byol_->pred_bn);
  h = ops::relu(h);
  return linear_forward(byol_->pred2, h);
}

Tensor Model::byol_target_embed(const Tensor& x) {
  if (!target_) throw ConfigError("MissingTarget: model has no BYOL target network");
  Tensor feats = forward_blocks(target_->blocks, spec_, x);
  Tensor h = linear_forward(target_->proj1, feats);
  h = bn_forward(h, target_->proj_bn);
  h = ops::relu(h);
  // stop-gradient: the target embedding is a constant to the loss
  return linear_forward(target_->proj2, h).detached_copy(false);
}

std::vector<BNLayer*> Model::bn_layers() {
  std::vector<BNLayer*> out;
  for (auto& b : blocks_) out.push_back(&b.bn);
  if (rotation_) out.push_back(&rotation_->bn);
  if (byol_) {
    out.push_back(&byol_->proj_bn);
    out.push_back(&byol_->pred_bn);
  }
  return out;
}

std::vector<BNLayer*> Model::all_bn_layers_including_target() {
  std::vector<BNLayer*> out = bn_layers();
  if (target_) {
    for (auto& b : target_->blocks) out.push_back(&b.bn);
    out.push_back(&target_->proj_bn);
  }
  return out;
}

std::vector<Tensor> Model::affine_params() {
  std::vector<Tensor> out;
  for (BNLayer* bn : bn_layers()) {
    out.push_back(bn->gamma);
    out.push_back(bn->beta);
  }
  return out;
}

std::vector<Tensor> Model::theta_params() {
  std::vector<Tensor> out;
  for (auto& b : blocks_) {
    if (b.is_conv) {
      out.push_back(b.conv.weight);
      out.push_back(b.conv.bias);
    } else {
      out.push_back(b.linear.weight);
      out.push_back(b.linear.bias);
    }
  }
  out.push_back(classifier_.weight);
  out.push_back(classifier_.bias);
  if (rotation_) {
    out.push_back(rotation_->fc1.weight);
    out.push_back(rotation_->fc1.bias);
    out.push_back(rotation_->fc2.weight);
    out.push_back(rotation_->fc2.bias);
  }
  if (byol_) {
    for (LinearLayer* l : {&byol_->proj1, &byol_->proj2, &byol_->pred1, &byol_->pred2}) {
      out.push_back(l->weight);
      out.push_back(l->bias);
    }
  }
  return out;
}

std::vector<Tensor> Model::collect_params(Scope scope) {
  switch (scope) {
    case Scope::AffineOnly:
    case Scope::FullBN:
      return affine_params();
    case Scope::ThetaOnly:
      return theta_params();
    case Scope::AllParams: {
      std::vector<Tensor> out = theta_params();
      for (auto& t : affine_params()) out.push_back(t);
      return out;
    }
  }
  return {};
}

void Model::set_mode(BNMode mode) {
  mode_ = mode;
  for (BNLayer* bn : bn_layers()) bn->set_mode(mode);
}

void Model::set_freeze_theta(bool freeze) {
  freeze_theta_ = freeze;
  for (auto& t : theta_params()) t.set_requires_grad(!freeze);
}

AffineSnapshot Model::snapshot_affine() const {
  AffineSnapshot snap;
  for (const BNLayer* bn : const_cast<Model*>(this)->bn_layers()) {
    snap.gamma.emplace_back(bn->gamma.values().begin(), bn->gamma.values().end());
    snap.beta.emplace_back(bn->beta.values().begin(), bn->beta.values().end());
    snap.channels.push_back(bn->channels());
  }
  return snap;
}

void Model::restore_affine(const AffineSnapshot& snap) {
  auto layers = bn_layers();
  if (snap.channels.size() != layers.size()) {
    throw ShapeError("LayoutMismatch: snapshot has " + std::to_string(snap.channels.size()) +
                     " BN layers, model has " + std::to_string(layers.size()));
  }
  for (size_t i = 0; i < layers.size(); ++i) {
    if (snap.channels[i] != layers[i]->channels()) {
      throw ShapeError("LayoutMismatch: BN layer '" + layers[i]->name + "' has " +
                       std::to_string(layers[i]->channels()) + " channels, snapshot has " +
                       std::to_string(snap.channels[i]));
    }
    std::copy(snap.gamma[i].begin(), snap.gamma[i].end(), layers[i]->gamma.values_mut().begin());
    std::copy(snap.beta[i].begin(), snap.beta[i].end(), layers[i]->beta.values_mut().begin());
  }
}

void Model::reestimate_bn_stats(const Tensor& x) {
  if (x.shape()[0] < 2) {
    throw ModeError("BatchTooSmall: statistic re-estimation needs batch >= 2");
  }
  std::vector<std::pair<BNMode, double>> saved;
  for (BNLayer* bn : bn_layers()) {
    saved.emplace_back(bn->mode, bn->retention);
    bn->set_mode(BNMode::Train);
    bn->retention = 0.0;  // replace, not blend: stats come from this batch alone
  }
  Tensor feats = backbone_forward(x);
  if (rotation_) (void)ssl_rotation_logits(feats);
  if (byol_) (void)byol_predict(byol_project(feats));
  auto layers = bn_layers();
  for (size_t i = 0; i < layers.size(); ++i) {
    layers[i]->mode = saved[i].first;
    layers[i]->retention = saved[i].second;
    layers[i]->set_mode(saved[i].first);
  }
}

Model Model::clone() const {
  Model c;
  c.spec_ = spec_;
  c.ssl_cfg_ = ssl_cfg_;
  c.task_ = task_;
  c.num_classes_ = num_classes_;
  c.freeze_theta_ = freeze_theta_;
  c.mode_ = mode_;
  for (const auto& b : blocks_) c.blocks_.push_back(clone_block(b));
  c.classifier_ = clone_linear(classifier_);
  if (rotation_) {
    RotationHead head;
    head.fc1 = clone_linear(rotation_->fc1);
    head.bn = clone_bn(rotation_->bn);
    head.fc2 = clone_linear(rotation_->fc2);
    c.rotation_ = std::move(head);
  }
  if (byol_) {
    ByolHead head;
    head.proj1 = clone_linear(byol_->proj1);
    head.proj_bn = clone_bn(byol_->proj_bn);
    head.proj2 = clone_linear(byol_->proj2);
    head.pred1 = clone_linear(byol_->pred1);
    head.pred_bn = clone_bn(byol_->pred_bn);
    head.pred2 = clone_linear(byol_->pred2);
    c.byol_ = std::move(head);
  }
  if (target_) {
    ByolTargetState t;
    for (const auto& b : target_->blocks) t.blocks.push_back(clone_block(b));
    t.proj1 = clone_linear(target_->proj1);
    t.proj_bn = clone_bn(target_->proj_bn);
    t.proj2 = clone_linear(target_->proj2);
    c.target_ = std::move(t);
  }
  return c;
}

void Model::drop_ssl_head() {
  rotation_.reset();
  byol_.reset();
  target_.reset();
}

bool Model::has_ssl_head() const { return rotation_.has_value() || byol_.has_value(); }

uint64_t Model::theta_hash() const {
  uint64_t h = kFnvOffset;
  for (const auto& t : const_cast<Model*>(this)->theta_params()) hash_tensor(h, t);
  if (target_) {
    for (const auto& b : target_->blocks) {
      hash_tensor(h, b.is_conv ? b.conv.weight : b.linear.weight);
      hash_tensor(h, b.is_conv ? b.conv.bias : b.linear.bias);
    }
    hash_tensor(h, target_->proj1.weight);
    hash_tensor(h, target_->proj1.bias);
    hash_tensor(h, target_->proj2.weight);
    hash_tensor(h, target_->proj2.bias);
  }
  return h;
}

uint64_t Model::stats_hash() const {
  uint64_t h = kFnvOffset;
  for (BNLayer* bn : const_cast<Model*>(this)->all_bn_layers_including_target()) {
    h = fnv1a64(std::span<const double>(bn->running_mean), h);
    h = fnv1a64(std::span<const double>(bn->running_var), h);
  }
  return h;
}

void ema_update(Model& model, double tau) {
  if (!model.byol_target() || !model.byol_head()) {
    throw ConfigError("MissingTarget: ema_update needs a BYOL head and target");
  }
  if (tau < 0.0 || tau > 1.0) throw ConfigError("ema tau must be in [0,1]");
  auto& target = *model.byol_target();
  auto& blocks = model.blocks();
  if (target.blocks.size() != blocks.size()) {
    throw ShapeError("LayoutMismatch: target/online block count");
  }
  for (size_t i = 0; i < blocks.size(); ++i) {
    auto& o = blocks[i];
    auto& t = target.blocks[i];
    if (o.is_conv) {
      ema_tensor(t.conv.weight, o.conv.weight, tau);
      ema_tensor(t.conv.bias, o.conv.bias, tau);
    } else {
      ema_tensor(t.linear.weight, o.linear.weight, tau);
      ema_tensor(t.linear.bias, o.linear.bias, tau);
    }
    ema_tensor(t.bn.gamma, o.bn.gamma, tau);
    ema_tensor(t.bn.beta, o.bn.beta, tau);
    ema_vec(t.bn.running_mean, o.bn.running_mean, tau);
    ema_vec(t.bn.running_var, o.bn.running_var, tau);
  }
  auto& head = *model.byol_head();
  ema_tensor(target.proj1.weight, head.proj1.weight, tau);
  ema_tensor(target.proj1.bias, head.proj1.bias, tau);
  ema_tensor(target.proj_bn.gamma, head.proj_bn.gamma, tau);
  ema_tensor(target.proj_bn.beta, head.proj_bn.beta, tau);
  ema_vec(target.proj_bn.running_mean, head.proj_bn.running_mean, tau);
  ema_vec(target.proj_bn.running_var, head.proj_bn.running_var, tau);
  ema_tensor(target.proj2.weight, head.proj2.weight, tau);
  ema_tensor(target.proj2.bias, head.proj2.bias, tau);
}

}  // namespace mabn
