#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mabn/bn.hpp"
#include "mabn/rng.hpp"
#include "mabn/tensor.hpp"

namespace mabn {

enum class SslKind : uint8_t { Rotation4 = 0, ByolLite = 1 };
enum class TaskKind : uint8_t { Classification = 0, Regression = 1 };

/// Which parameters an update is allowed to touch.
///  - AffineOnly: every BN (gamma, beta), backbone and SSL head alike.
///  - FullBN:     the affine set plus re-estimation of the normalization
///                statistics from the adaptation batch.
///  - AllParams:  weight matrices and affine parameters.
///  - ThetaOnly:  weight matrices only.
enum class Scope : uint8_t { AffineOnly = 0, FullBN = 1, AllParams = 2, ThetaOnly = 3 };

const char* scope_name(Scope s);

struct AugmentConfig {
  double noise_std = 0.1;
  int crop_jitter = 2;     // max pixel shift, images only
  double flip_prob = 0.5;  // horizontal flip, images only
};

struct ByolConfig {
  int64_t projection_dim = 32;
  int64_t predictor_hidden = 64;
  double ema_tau = 0.99;
};

struct SSLTaskConfig {
  SslKind kind = SslKind::ByolLite;
  ByolConfig byol;
  AugmentConfig augment;
  int64_t rotation_hidden = 32;

  void validate() const;
};

struct BackboneSpec {
  enum class Kind : uint8_t { Conv3 = 0, Mlp = 1 };
  Kind kind = Kind::Conv3;
  int64_t in_channels = 3;  // image channels (Conv3) or input dim (Mlp)
  int64_t image_hw = 12;    // Conv3 only
  std::vector<int64_t> widths = {16, 32, 64};

  int64_t feature_dim() const { return widths.back(); }
  void validate() const;
};

struct LinearLayer {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
  static LinearLayer make(int64_t in, int64_t out, Rng& rng);
};

struct ConvLayer {
  Tensor weight;  // [out, in, 3, 3]
  Tensor bias;    // [out]
  static ConvLayer make(int64_t in, int64_t out, Rng& rng);
};

/// One backbone stage: conv-or-linear, then BN, then relu.
struct Block {
  bool is_conv = true;
  ConvLayer conv;
  LinearLayer linear;
  BNLayer bn;
};

struct RotationHead {
  LinearLayer fc1;
  BNLayer bn;
  LinearLayer fc2;  // -> 4 logits
};

struct ByolHead {
  LinearLayer proj1;
  BNLayer proj_bn;
  LinearLayer proj2;  // -> projection_dim
  LinearLayer pred1;
  BNLayer pred_bn;
  LinearLayer pred2;  // -> projection_dim
};

/// EMA copy of the backbone plus the projection path. Never receives
/// gradients; its BN layers stay in Eval mode.
struct ByolTargetState {
  std::vector<Block> blocks;
  LinearLayer proj1;
  BNLayer proj_bn;
  LinearLayer proj2;
};

/// Deep copy of every (gamma, beta) pair in canonical layer order.
struct AffineSnapshot {
  std::vector<std::vector<double>> gamma;
  std::vector<std::vector<double>> beta;
  std::vector<int64_t> channels;
};

/// Backbone + classifier + SSL head. Copies share parameter storage (like
/// Tensor); use clone() for an independent model.
class Model {
 public:
  Model() = default;

  static Model init(const BackboneSpec& spec, int64_t num_classes, const SSLTaskConfig& ssl,
                    TaskKind task, uint64_t seed);

  // ----- forward -----
  /// conv->BN->relu blocks then global average pooling (Conv3), or
  /// linear->BN->relu blocks (Mlp). Output [N, feature_dim].
  Tensor backbone_forward(const Tensor& x);
  /// Linear head without BN; [N, num_classes] logits ([N,1] for regression).
  Tensor classify(const Tensor& features);
  Tensor ssl_rotation_logits(const Tensor& features);
  Tensor byol_project(const Tensor& features);
  Tensor byol_predict(const Tensor& projection);
  /// Target-network embedding of a raw input batch; constant (no graph).
  Tensor byol_target_embed(const Tensor& x);

  // ----- parameter views -----
  std::vector<Tensor> collect_params(Scope scope);
  std::vector<Tensor> affine_params();
  std::vector<Tensor> theta_params();
  std::vector<BNLayer*> bn_layers();  // online layers, canonical order
  std::vector<BNLayer*> all_bn_layers_including_target();

  // ----- mode & freezing -----
  void set_mode(BNMode mode);
  BNMode mode() const { return mode_; }
  void set_freeze_theta(bool freeze);
  bool freeze_theta() const { return freeze_theta_; }

  // ----- affine snapshots -----
  AffineSnapshot snapshot_affine() const;
  /// Overwrites only gamma/beta; LayoutMismatch if the channel layout
  /// differs. Running statistics and theta are never touched.
  void restore_affine(const AffineSnapshot& snap);

  /// Overwrites every BN layer's running statistics with per-channel
  /// statistics of `x` propagated layer by layer (the FullBN scope's
  /// re-estimation step). Needs batch >= 2.
  void reestimate_bn_stats(const Tensor& x);

  Model clone() const;
  /// Removes the SSL head (and BYOL target). Classifier outputs are
  /// unaffected; SSL losses become unavailable.
  void drop_ssl_head();
  bool has_ssl_head() const;

  uint64_t theta_hash() const;
  uint64_t stats_hash() const;

  // ----- structure accessors -----
  const BackboneSpec& backbone_spec() const { return spec_; }
  int64_t num_classes() const { return num_classes_; }
  TaskKind task_kind() const { return task_; }
  const SSLTaskConfig& ssl_config() const { return ssl_cfg_; }
  SslKind ssl_kind() const { return ssl_cfg_.kind; }
  bool has_byol_target() const { return target_.has_value(); }

  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  LinearLayer& classifier() { return classifier_; }
  std::optional<RotationHead>& rotation_head() { return rotation_; }
  std::optional<ByolHead>& byol_head() { return byol_; }
  std::optional<ByolTargetState>& byol_target() { return target_; }
  const std::optional<ByolTargetState>& byol_target() const { return target_; }

 private:
  BackboneSpec spec_;
  SSLTaskConfig ssl_cfg_;
  TaskKind task_ = TaskKind::Classification;
  int64_t num_classes_ = 0;
  std::vector<Block> blocks_;
  LinearLayer classifier_;
  std::optional<RotationHead> rotation_;
  std::optional<ByolHead> byol_;
  std::optional<ByolTargetState> target_;
  bool freeze_theta_ = false;
  BNMode mode_ = BNMode::Train;
};

/// Per-parameter EMA pull of the BYOL target toward the online network:
/// t <- tau*t + (1-tau)*o, covering weights, affine parameters and running
/// statistics of the mirrored layers. MissingTarget if the model has none.
void ema_update(Model& model, double tau);

}  // namespace mabn
