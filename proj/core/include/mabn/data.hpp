#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mabn/tensor.hpp"

namespace mabn {

enum class GeneratorKind : uint8_t { GaussianBlobs2D = 0, ShiftedShapes = 1 };
enum class TargetShiftMode : uint8_t { Extrapolate = 0, Interpolate = 1 };

/// Low-level statistics of one domain. Classes share the same geometry
/// everywhere; only these parameters move between domains.
struct ShiftRecord {
  double orientation = 0.0;              // radians
  double illumination = 1.0;             // scalar gain shared by all channels
  std::array<double, 3> gain{1, 1, 1};   // per-channel scale
  std::array<double, 3> bias{0, 0, 0};   // per-channel offset
  double background = 0.0;               // off-shape intensity (images)
  double noise_std = 0.0;                // additive Gaussian noise
};

struct DomainSpec {
  GeneratorKind kind = GeneratorKind::ShiftedShapes;
  int64_t num_classes = 4;
  int64_t samples_per_domain = 160;
  double train_fraction = 0.5;

  // image generator
  int64_t channels = 3;
  int64_t image_hw = 12;

  // blob generator
  int64_t blob_dim = 2;
  double blob_radius = 3.0;
  double blob_sigma = 0.6;

  // shift schedule: sources sit inside the envelope, targets extrapolate
  // beyond it (or interpolate inside it).
  double orientation_range = 0.4363;  // ~25 degrees
  double illumination_amp = 0.0;      // scalar gain spread (all channels together)
  double gain_amp = 0.35;
  double bias_amp = 0.30;
  double background_base = 0.10;
  double background_amp = 0.10;
  double noise_base = 0.05;
  double noise_amp = 0.03;
  TargetShiftMode target_mode = TargetShiftMode::Extrapolate;
  double target_scale = 1.3;

  // within-domain nuisance: every sample draws a small exposure jitter,
  // and a few samples are strong outliers. Pooled source statistics absorb
  // this; statistics re-estimated from a dozen images do not.
  double sample_gain_jitter = 0.10;
  double outlier_prob = 0.15;
  double outlier_gain = 2.0;  // outlier exposure multiplier (+-20% spread)

  uint64_t seed = 7;

  void validate() const;
  Shape sample_shape() const;  // [C,H,W] or [D]
};

struct Domain {
  int32_t id = 0;
  ShiftRecord shift;
  Shape sample_shape;
  std::vector<double> data;  // row-major [n, sample...]
  std::vector<int> labels;
  int64_t n_train = 0;  // first n_train samples form the train/adaptation pool

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  int64_t sample_elems() const;
  int64_t n_test() const { return size() - n_train; }

  /// Fresh leaf tensor [k, sample...] gathering the given sample indices.
  Tensor batch(std::span<const int64_t> indices) const;
  std::vector<int> label_subset(std::span<const int64_t> indices) const;
  std::vector<int64_t> train_indices() const;
  std::vector<int64_t> test_indices() const;
};

struct DomainSet {
  DomainSpec spec;
  std::vector<Domain> sources;
  std::vector<Domain> targets;
  /// Set when a loaded file carries no target domains (legal in the file
  /// format, forbidden at generation time).
  bool empty_target_warning = false;
};

/// M source + N target domains, deterministic under spec.seed. Source
/// shift parameters span the configured envelope; target parameters are
/// held out (extrapolated beyond it by default).
DomainSet gen_domains(const DomainSpec& spec, int64_t num_source, int64_t num_target);

/// One meta-learning episode: unlabeled support plus disjoint labeled
/// query, both drawn from the domain's train pool.
struct DomainTask {
  int32_t domain_id = 0;
  Tensor support;
  Tensor query;
  std::vector<int> query_labels;
};

DomainTask sample_support_query(const Domain& domain, int64_t support_size, int64_t query_size,
                                uint64_t seed);

/// Unlabeled support batch alone (the test-time adaptation draw).
Tensor sample_support(const Domain& domain, int64_t support_size, uint64_t seed);

void save_dataset(const DomainSet& set, const std::string& path);
DomainSet load_dataset(const std::string& path);

/// Mean absolute difference between the per-element mean samples of two
/// domains; the measurable inter-domain shift.
double domain_discrepancy(const Domain& a, const Domain& b);

}  // namespace mabn
