#include "mabn/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mabn/hash.hpp"
#include "mabn/rng.hpp"
#include "mabn/serialize.hpp"

namespace mabn {

namespace {

constexpr char kMagic[4] = {'M', 'A', 'B', 'D'};
constexpr uint32_t kVersion = 1;

// ----------------------------------------------------------------------
// Shift schedule
// ----------------------------------------------------------------------

// Draws one domain's shift record. `level` scales how far the parameters
// sit from the identity: sources use level in [0.5, 1], extrapolated
// targets in (1, target_scale].
ShiftRecord draw_shift(const DomainSpec& spec, Rng& rng, double orientation, double level) {
  ShiftRecord s;
  s.orientation = orientation;
  const double illum_dir = rng.bernoulli(0.5) ? 1.0 : -1.0;
  s.illumination = 1.0 + illum_dir * spec.illumination_amp * level * rng.uniform(0.6, 1.0);
  for (int c = 0; c < 3; ++c) {
    const double dir = rng.bernoulli(0.5) ? 1.0 : -1.0;
    s.gain[static_cast<size_t>(c)] = 1.0 + dir * spec.gain_amp * level * rng.uniform(0.6, 1.0);
    const double dir2 = rng.bernoulli(0.5) ? 1.0 : -1.0;
    s.bias[static_cast<size_t>(c)] = dir2 * spec.bias_amp * level * rng.uniform(0.6, 1.0);
  }
  const double dir3 = rng.bernoulli(0.5) ? 1.0 : -1.0;
  s.background = spec.background_base + dir3 * spec.background_amp * level * rng.uniform(0.0, 1.0);
  s.noise_std = std::max(0.0, spec.noise_base + spec.noise_amp * level * rng.uniform(-1.0, 1.0));
  return s;
}

// ----------------------------------------------------------------------
// Sample synthesis
// ----------------------------------------------------------------------

void render_shape(std::span<double> out, const DomainSpec& spec, const ShiftRecord& shift,
                  int label, Rng& rng) {
  const int64_t hw = spec.image_hw;
  const int64_t c = spec.channels;
  const double cx = (hw - 1) / 2.0 + rng.uniform(-2.0, 2.0);
  const double cy = (hw - 1) / 2.0 + rng.uniform(-2.0, 2.0);
  const double extent = rng.uniform(0.22, 0.30) * static_cast<double>(hw);
  const double theta = shift.orientation + rng.uniform(-0.09, 0.09);
  const double ct = std::cos(theta), st = std::sin(theta);

  // Class-conditional shape intensity: the label is carried by geometry
  // and by absolute brightness, so per-channel re-normalization from a
  // small batch erodes a discriminative cue while an affine correction
  // can recalibrate it.
  const double intensity =
      spec.num_classes > 1
          ? 0.55 + 0.45 * static_cast<double>(label) / static_cast<double>(spec.num_classes - 1)
          : 1.0;

  // Per-sample, per-channel exposure: mild jitter everywhere, occasional
  // strong outlier. Independent across channels so a handful of outliers
  // skews the relative channel calibration, not just a global scale.
  std::array<double, 3> exposure{1.0, 1.0, 1.0};
  for (size_t ch = 0; ch < exposure.size(); ++ch) {
    exposure[ch] = 1.0 + spec.sample_gain_jitter * rng.uniform(-1.0, 1.0);
    if (spec.outlier_prob > 0.0 && rng.bernoulli(spec.outlier_prob)) {
      exposure[ch] *= spec.outlier_gain * rng.uniform(0.8, 1.2);
    }
  }

  std::vector<double> base(static_cast<size_t>(hw * hw));
  for (int64_t y = 0; y < hw; ++y) {
    for (int64_t x = 0; x < hw; ++x) {
      // rotate pixel coordinates into the shape frame
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      const double u = ct * dx + st * dy;
      const double v = -st * dx + ct * dy;
      bool inside = false;
      switch (label % 4) {
        case 0:  // square
          inside = std::abs(u) <= extent && std::abs(v) <= extent;
          break;
        case 1:  // disc
          inside = u * u + v * v <= extent * extent;
          break;
        case 2:  // plus
          inside = (std::abs(u) <= extent / 2.5 && std::abs(v) <= extent) ||
                   (std::abs(v) <= extent / 2.5 && std::abs(u) <= extent);
          break;
        case 3: {  // ring
          const double r = std::sqrt(u * u + v * v);
          inside = r >= extent * 0.55 && r <= extent;
          break;
        }
      }
      base[static_cast<size_t>(y * hw + x)] = inside ? intensity : shift.background;
    }
  }
  for (int64_t ch = 0; ch < c; ++ch) {
    const double gain = shift.illumination * exposure[static_cast<size_t>(ch % 3)] *
                        shift.gain[static_cast<size_t>(ch % 3)];
    const double bias = shift.bias[static_cast<size_t>(ch % 3)];
    double* plane = out.data() + ch * hw * hw;
    for (int64_t i = 0; i < hw * hw; ++i) {
      plane[i] = gain * base[static_cast<size_t>(i)] + bias + rng.normal(0.0, shift.noise_std);
    }
  }
}

void render_blob(std::span<double> out, const DomainSpec& spec, const ShiftRecord& shift,
                 int label, Rng& rng) {
  const double angle = 2.0 * M_PI * static_cast<double>(label) /
                       static_cast<double>(spec.num_classes);
  std::vector<double> p(static_cast<size_t>(spec.blob_dim), 0.0);
  p[0] = spec.blob_radius * std::cos(angle) + rng.normal(0.0, spec.blob_sigma);
  if (spec.blob_dim > 1) p[1] = spec.blob_radius * std::sin(angle) + rng.normal(0.0, spec.blob_sigma);
  for (size_t d = 2; d < p.size(); ++d) p[d] = rng.normal(0.0, spec.blob_sigma);

  // domain shift: rotate the first two coordinates, then per-dim affine
  if (spec.blob_dim > 1) {
    const double ct = std::cos(shift.orientation), st = std::sin(shift.orientation);
    const double x = p[0], y = p[1];
    p[0] = ct * x - st * y;
    p[1] = st * x + ct * y;
  }
  for (size_t d = 0; d < p.size(); ++d) {
    p[d] = shift.illumination * shift.gain[d % 3] * p[d] + shift.bias[d % 3] +
           rng.normal(0.0, shift.noise_std);
  }
  std::copy(p.begin(), p.end(), out.begin());
}

Domain make_domain(const DomainSpec& spec, int32_t id, const ShiftRecord& shift, Rng& rng) {
  Domain d;
  d.id = id;
  d.shift = shift;
  d.sample_shape = spec.sample_shape();
  const int64_t n = spec.samples_per_domain;
  const int64_t elems = shape_numel(d.sample_shape);
  d.data.assign(static_cast<size_t>(n * elems), 0.0);
  d.labels.resize(static_cast<size_t>(n));

  // identical label marginals in every domain: n/K per class, remainder
  // spread over the first classes, then shuffled
  for (int64_t i = 0; i < n; ++i) {
    d.labels[static_cast<size_t>(i)] = static_cast<int>(i % spec.num_classes);
  }
  rng.shuffle(d.labels);

  for (int64_t i = 0; i < n; ++i) {
    std::span<double> out(d.data.data() + i * elems, static_cast<size_t>(elems));
    if (spec.kind == GeneratorKind::ShiftedShapes) {
      render_shape(out, spec, shift, d.labels[static_cast<size_t>(i)], rng);
    } else {
      render_blob(out, spec, shift, d.labels[static_cast<size_t>(i)], rng);
    }
  }
  d.n_train = static_cast<int64_t>(std::llround(spec.train_fraction * static_cast<double>(n)));
  d.n_train = std::clamp<int64_t>(d.n_train, 1, n - 1);
  return d;
}

}  // namespace

void DomainSpec::validate() const {
  if (num_classes < 2) throw DataError("InvalidSpec: num_classes must be >= 2");
  if (kind == GeneratorKind::ShiftedShapes && num_classes > 4) {
    throw DataError("InvalidSpec: ShiftedShapes supports at most 4 classes");
  }
  if (samples_per_domain < 4) throw DataError("InvalidSpec: samples_per_domain must be >= 4");
  if (train_fraction <= 0.0 || train_fraction >= 1.0) {
    throw DataError("InvalidSpec: train_fraction must be in (0,1)");
  }
  if (kind == GeneratorKind::ShiftedShapes) {
    if (channels < 1 || channels > 3) throw DataError("InvalidSpec: channels must be 1..3");
    if (image_hw < 6) throw DataError("InvalidSpec: image_hw must be >= 6");
  } else {
    if (blob_dim < 2) throw DataError("InvalidSpec: blob_dim must be >= 2");
    if (blob_sigma <= 0.0) throw DataError("InvalidSpec: blob_sigma must be > 0");
  }
  if (target_scale < 1.0) throw DataError("InvalidSpec: target_scale must be >= 1");
  if (sample_gain_jitter < 0.0 || sample_gain_jitter >= 1.0) {
    throw DataError("InvalidSpec: sample_gain_jitter must be in [0,1)");
  }
  if (outlier_prob < 0.0 || outlier_prob > 1.0) {
    throw DataError("InvalidSpec: outlier_prob must be in [0,1]");
  }
  if (outlier_gain <= 0.0) throw DataError("InvalidSpec: outlier_gain must be > 0");
}

Shape DomainSpec::sample_shape() const {
  if (kind == GeneratorKind::ShiftedShapes) return {channels, image_hw, image_hw};
  return {blob_dim};
}

int64_t Domain::sample_elems() const { return shape_numel(sample_shape); }

Tensor Domain::batch(std::span<const int64_t> indices) const {
  const int64_t elems = sample_elems();
  std::vector<double> out(indices.size() * static_cast<size_t>(elems));
  for (size_t i = 0; i < indices.size(); ++i) {
    const int64_t idx = indices[i];
    if (idx < 0 || idx >= size()) {
      throw DataError("InsufficientSamples: index " + std::to_string(idx) + " out of range");
    }
    std::copy_n(data.begin() + idx * elems, elems, out.begin() + static_cast<int64_t>(i) * elems);
  }
  Shape shape;
  shape.push_back(static_cast<int64_t>(indices.size()));
  for (int64_t d : sample_shape) shape.push_back(d);
  return Tensor::create(std::move(shape), std::move(out));
}

std::vector<int> Domain::label_subset(std::span<const int64_t> indices) const {
  std::vector<int> out(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) out[i] = labels[static_cast<size_t>(indices[i])];
  return out;
}

std::vector<int64_t> Domain::train_indices() const {
  std::vector<int64_t> idx(static_cast<size_t>(n_train));
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

std::vector<int64_t> Domain::test_indices() const {
  std::vector<int64_t> idx(static_cast<size_t>(n_test()));
  std::iota(idx.begin(), idx.end(), n_train);
  return idx;
}

DomainSet gen_domains(const DomainSpec& spec, int64_t num_source, int64_t num_target) {
  spec.validate();
  if (num_source < 2) throw DataError("InvalidSpec: need at least 2 source domains (M >= 2)");
  if (num_target < 1) throw DataError("InvalidSpec: need at least 1 target domain (N >= 1)");

  DomainSet set;
  set.spec = spec;

  for (int64_t i = 0; i < num_source; ++i) {
    Rng rng(derive_seed(spec.seed, "source", static_cast<uint64_t>(i)));
    const double frac = num_source > 1 ? static_cast<double>(i) / static_cast<double>(num_source - 1)
                                       : 0.5;
    const double orientation = spec.orientation_range * (2.0 * frac - 1.0);
    const double level = 0.5 + 0.5 * rng.uniform(0.0, 1.0);
    ShiftRecord shift = draw_shift(spec, rng, orientation, level);
    set.sources.push_back(make_domain(spec, static_cast<int32_t>(i), shift, rng));
  }
  for (int64_t j = 0; j < num_target; ++j) {
    Rng rng(derive_seed(spec.seed, "target", static_cast<uint64_t>(j)));
    double orientation, level;
    if (spec.target_mode == TargetShiftMode::Extrapolate) {
      // held out beyond the source envelope
      const double sign = (j % 2 == 0) ? 1.0 : -1.0;
      orientation = sign * spec.orientation_range * rng.uniform(1.0, spec.target_scale);
      level = rng.uniform(1.0, spec.target_scale);
    } else {
      orientation = spec.orientation_range * rng.uniform(-1.0, 1.0);
      level = 0.5 + 0.5 * rng.uniform(0.0, 1.0);
    }
    ShiftRecord shift = draw_shift(spec, rng, orientation, level);
    set.targets.push_back(
        make_domain(spec, static_cast<int32_t>(num_source + j), shift, rng));
  }
  return set;
}

DomainTask sample_support_query(const Domain& domain, int64_t support_size, int64_t query_size,
                                uint64_t seed) {
  if (support_size < 1) throw DataError("EmptySupport: support_size must be >= 1");
  if (query_size < 1) throw DataError("InvalidSpec: query_size must be >= 1");
  const int64_t pool = domain.n_train;
  if (support_size + query_size > pool) {
    throw DataError("InsufficientSamples: domain " + std::to_string(domain.id) + " pool of " +
                    std::to_string(pool) + " cannot supply " +
                    std::to_string(support_size + query_size) + " samples");
  }
  Rng rng(derive_seed(seed, "episode", static_cast<uint64_t>(domain.id)));
  auto draw = rng.sample_without_replacement(pool, support_size + query_size);
  std::vector<int64_t> support_idx(draw.begin(), draw.begin() + support_size);
  std::vector<int64_t> query_idx(draw.begin() + support_size, draw.end());

  DomainTask task;
  task.domain_id = domain.id;
  task.support = domain.batch(support_idx);  // labels deliberately not taken
  task.query = domain.batch(query_idx);
  task.query_labels = domain.label_subset(query_idx);
  return task;
}

Tensor sample_support(const Domain& domain, int64_t support_size, uint64_t seed) {
  if (support_size < 1) throw DataError("EmptySupport: support_size must be >= 1");
  if (support_size > domain.n_train) {
    throw DataError("InsufficientSamples: domain " + std::to_string(domain.id) +
                    " pool cannot supply a support of " + std::to_string(support_size));
  }
  Rng rng(derive_seed(seed, "support", static_cast<uint64_t>(domain.id)));
  auto idx = rng.sample_without_replacement(domain.n_train, support_size);
  return domain.batch(idx);
}

// ----------------------------------------------------------------------
// Serialization (magic "MABD", version, header, per-domain blocks, CRC-32)
// ----------------------------------------------------------------------

namespace {

void write_domain(BinWriter& w, const Domain& d) {
  w.i32(d.id);
  w.f64(d.shift.orientation);
  w.f64(d.shift.illumination);
  for (double g : d.shift.gain) w.f64(g);
  for (double b : d.shift.bias) w.f64(b);
  w.f64(d.shift.background);
  w.f64(d.shift.noise_std);
  w.u32(static_cast<uint32_t>(d.size()));
  w.u32(static_cast<uint32_t>(d.n_train));
  w.i32_array(d.labels);
  w.f64_array(d.data);
}

Domain read_domain(BinReader& r, const Shape& sample_shape) {
  Domain d;
  d.sample_shape = sample_shape;
  d.id = r.i32();
  d.shift.orientation = r.f64();
  d.shift.illumination = r.f64();
  for (double& g : d.shift.gain) g = r.f64();
  for (double& b : d.shift.bias) b = r.f64();
  d.shift.background = r.f64();
  d.shift.noise_std = r.f64();
  const uint32_t n = r.u32();
  d.n_train = r.u32();
  if (d.n_train > n) throw IoError("CorruptFile: n_train exceeds sample count");
  d.labels = r.i32_array(n);
  d.data = r.f64_array(static_cast<size_t>(n) * static_cast<size_t>(shape_numel(sample_shape)));
  return d;
}

}  // namespace

void save_dataset(const DomainSet& set, const std::string& path) {
  BinWriter w;
  w.bytes({reinterpret_cast<const uint8_t*>(kMagic), 4});
  w.u32(kVersion);

  const DomainSpec& s = set.spec;
  w.u8(static_cast<uint8_t>(s.kind));
  w.u32(static_cast<uint32_t>(s.num_classes));
  w.u32(static_cast<uint32_t>(s.samples_per_domain));
  w.f64(s.train_fraction);
  w.u32(static_cast<uint32_t>(s.channels));
  w.u32(static_cast<uint32_t>(s.image_hw));
  w.u32(static_cast<uint32_t>(s.blob_dim));
  w.f64(s.blob_radius);
  w.f64(s.blob_sigma);
  w.f64(s.orientation_range);
  w.f64(s.illumination_amp);
  w.f64(s.gain_amp);
  w.f64(s.bias_amp);
  w.f64(s.background_base);
  w.f64(s.background_amp);
  w.f64(s.noise_base);
  w.f64(s.noise_amp);
  w.u8(static_cast<uint8_t>(s.target_mode));
  w.f64(s.target_scale);
  w.f64(s.sample_gain_jitter);
  w.f64(s.outlier_prob);
  w.f64(s.outlier_gain);
  w.u64(s.seed);

  w.u32(static_cast<uint32_t>(set.sources.size()));
  w.u32(static_cast<uint32_t>(set.targets.size()));
  const Shape sample = s.sample_shape();
  w.u32(static_cast<uint32_t>(sample.size()));
  for (int64_t d : sample) w.u32(static_cast<uint32_t>(d));

  for (const auto& d : set.sources) write_domain(w, d);
  for (const auto& d : set.targets) write_domain(w, d);
  w.finish_to_file(path);
}

DomainSet load_dataset(const std::string& path) {
  BinReader r = BinReader::from_file(path);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.u8());
  if (std::string_view(magic, 4) != std::string_view(kMagic, 4)) {
    throw IoError("CorruptFile: bad magic in '" + path + "'");
  }
  const uint32_t version = r.u32();
  if (version != kVersion) {
    throw IoError("CorruptFile: unsupported dataset version " + std::to_string(version));
  }

  DomainSet set;
  DomainSpec& s = set.spec;
  s.kind = static_cast<GeneratorKind>(r.u8());
  s.num_classes = r.u32();
  s.samples_per_domain = r.u32();
  s.train_fraction = r.f64();
  s.channels = r.u32();
  s.image_hw = r.u32();
  s.blob_dim = r.u32();
  s.blob_radius = r.f64();
  s.blob_sigma = r.f64();
  s.orientation_range = r.f64();
  s.illumination_amp = r.f64();
  s.gain_amp = r.f64();
  s.bias_amp = r.f64();
  s.background_base = r.f64();
  s.background_amp = r.f64();
  s.noise_base = r.f64();
  s.noise_amp = r.f64();
  s.target_mode = static_cast<TargetShiftMode>(r.u8());
  s.target_scale = r.f64();
  s.sample_gain_jitter = r.f64();
  s.outlier_prob = r.f64();
  s.outlier_gain = r.f64();
  s.seed = r.u64();

  const uint32_t m = r.u32();
  const uint32_t n = r.u32();
  const uint32_t rank = r.u32();
  if (rank > 4) throw IoError("CorruptFile: sample rank " + std::to_string(rank));
  Shape sample(rank);
  for (auto& d : sample) d = r.u32();

  for (uint32_t i = 0; i < m; ++i) set.sources.push_back(read_domain(r, sample));
  for (uint32_t i = 0; i < n; ++i) set.targets.push_back(read_domain(r, sample));
  r.check_crc_and_eof();

  set.empty_target_warning = set.targets.empty();
  return set;
}

double domain_discrepancy(const Domain& a, const Domain& b) {
  if (a.sample_elems() != b.sample_elems()) {
    throw ShapeError("ShapeMismatch: domain_discrepancy over different sample shapes");
  }
  const int64_t elems = a.sample_elems();
  std::vector<double> mean_a(static_cast<size_t>(elems), 0.0);
  std::vector<double> mean_b(static_cast<size_t>(elems), 0.0);
  for (int64_t i = 0; i < a.size(); ++i)
    for (int64_t e = 0; e < elems; ++e) mean_a[static_cast<size_t>(e)] += a.data[i * elems + e];
  for (int64_t i = 0; i < b.size(); ++i)
    for (int64_t e = 0; e < elems; ++e) mean_b[static_cast<size_t>(e)] += b.data[i * elems + e];
  double diff = 0.0;
  for (int64_t e = 0; e < elems; ++e) {
    diff += std::abs(mean_a[static_cast<size_t>(e)] / static_cast<double>(a.size()) -
                     mean_b[static_cast<size_t>(e)] / static_cast<double>(b.size()));
  }
  return diff / static_cast<double>(elems);
}

}  // namespace mabn
