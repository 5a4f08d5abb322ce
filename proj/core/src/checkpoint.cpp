#include "mabn/checkpoint.hpp"

#include "mabn/serialize.hpp"

namespace mabn {

namespace {

constexpr char kMagic[4] = {'M', 'A', 'B', 'N'};
constexpr uint32_t kVersion = 1;

void write_tensor(BinWriter& w, const Tensor& t) {
  w.u32(static_cast<uint32_t>(t.dim()));
  for (int64_t d : t.shape()) w.u32(static_cast<uint32_t>(d));
  w.u8(t.requires_grad() ? 1 : 0);
  w.f64_array(t.values());
}

Tensor read_tensor(BinReader& r) {
  const uint32_t rank = r.u32();
  if (rank > 8) throw IoError("CorruptFile: tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i) shape[i] = r.u32();
  const bool rg = r.u8() != 0;
  auto values = r.f64_array(static_cast<size_t>(shape_numel(shape)));
  return Tensor::create(std::move(shape), std::move(values), rg);
}

void write_linear(BinWriter& w, const LinearLayer& l) {
  w.u8('L');
  write_tensor(w, l.weight);
  write_tensor(w, l.bias);
}

LinearLayer read_linear(BinReader& r) {
  if (r.u8() != 'L') throw IoError("CorruptFile: expected linear layer tag");
  LinearLayer l;
  l.weight = read_tensor(r);
  l.bias = read_tensor(r);
  return l;
}

void write_conv(BinWriter& w, const ConvLayer& c) {
  w.u8('C');
  write_tensor(w, c.weight);
  write_tensor(w, c.bias);
}

ConvLayer read_conv(BinReader& r) {
  if (r.u8() != 'C') throw IoError("CorruptFile: expected conv layer tag");
  ConvLayer c;
  c.weight = read_tensor(r);
  c.bias = read_tensor(r);
  return c;
}

void write_bn(BinWriter& w, const BNLayer& bn) {
  w.u8('B');
  w.str(bn.name);
  w.u32(static_cast<uint32_t>(bn.channels()));
  write_tensor(w, bn.gamma);
  write_tensor(w, bn.beta);
  w.f64_array(bn.running_mean);
  w.f64_array(bn.running_var);
  w.f64(bn.retention);
  w.f64(bn.eps);
  w.u8(static_cast<uint8_t>(bn.mode));
}

BNLayer read_bn(BinReader& r) {
  if (r.u8() != 'B') throw IoError("CorruptFile: expected BN layer tag");
  BNLayer bn;
  bn.name = r.str();
  const uint32_t channels = r.u32();
  bn.gamma = read_tensor(r);
  bn.beta = read_tensor(r);
  bn.running_mean = r.f64_array(channels);
  bn.running_var = r.f64_array(channels);
  bn.retention = r.f64();
  bn.eps = r.f64();
  const uint8_t mode = r.u8();
  if (mode > 2) throw IoError("CorruptFile: bad BN mode " + std::to_string(mode));
  bn.mode = static_cast<BNMode>(mode);
  return bn;
}

void write_block(BinWriter& w, const Block& b) {
  w.u8(b.is_conv ? 1 : 0);
  if (b.is_conv) write_conv(w, b.conv);
  else write_linear(w, b.linear);
  write_bn(w, b.bn);
}

Block read_block(BinReader& r) {
  Block b;
  b.is_conv = r.u8() != 0;
  if (b.is_conv) b.conv = read_conv(r);
  else b.linear = read_linear(r);
  b.bn = read_bn(r);
  return b;
}

}  // namespace

void save_model(const Model& model, const std::string& path) {
  BinWriter w;
  w.bytes({reinterpret_cast<const uint8_t*>(kMagic), 4});
  w.u32(kVersion);

  const auto& spec = model.backbone_spec();
  w.u8(static_cast<uint8_t>(spec.kind));
  w.u8(static_cast<uint8_t>(model.task_kind()));
  w.u8(static_cast<uint8_t>(model.ssl_kind()));
  w.u8(model.has_byol_target() ? 1 : 0);
  w.u8(model.has_ssl_head() ? 1 : 0);
  w.u8(model.freeze_theta() ? 1 : 0);
  w.u8(static_cast<uint8_t>(model.mode()));

  w.u32(static_cast<uint32_t>(spec.in_channels));
  w.u32(static_cast<uint32_t>(spec.image_hw));
  w.u32(static_cast<uint32_t>(spec.widths.size()));
  for (int64_t width : spec.widths) w.u32(static_cast<uint32_t>(width));
  w.u32(static_cast<uint32_t>(model.num_classes()));

  const auto& ssl = model.ssl_config();
  w.u32(static_cast<uint32_t>(ssl.byol.projection_dim));
  w.u32(static_cast<uint32_t>(ssl.byol.predictor_hidden));
  w.f64(ssl.byol.ema_tau);
  w.u32(static_cast<uint32_t>(ssl.rotation_hidden));
  w.f64(ssl.augment.noise_std);
  w.u32(static_cast<uint32_t>(ssl.augment.crop_jitter));
  w.f64(ssl.augment.flip_prob);

  Model& m = const_cast<Model&>(model);
  w.u32(static_cast<uint32_t>(m.blocks().size()));
  for (const auto& b : m.blocks()) write_block(w, b);
  write_linear(w, m.classifier());
  if (m.has_ssl_head()) {
    if (model.ssl_kind() == SslKind::Rotation4) {
      auto& head = *m.rotation_head();
      write_linear(w, head.fc1);
      write_bn(w, head.bn);
      write_linear(w, head.fc2);
    } else {
      auto& head = *m.byol_head();
      write_linear(w, head.proj1);
      write_bn(w, head.proj_bn);
      write_linear(w, head.proj2);
      write_linear(w, head.pred1);
      write_bn(w, head.pred_bn);
      write_linear(w, head.pred2);
    }
  }
  if (model.has_byol_target()) {
    const auto& t = *model.byol_target();
    w.u32(static_cast<uint32_t>(t.blocks.size()));
    for (const auto& b : t.blocks) write_block(w, b);
    write_linear(w, t.proj1);
    write_bn(w, t.proj_bn);
    write_linear(w, t.proj2);
  }
  w.finish_to_file(path);
}

Model load_model(const std::string& path) {
  BinReader r = BinReader::from_file(path);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.u8());
  if (std::string_view(magic, 4) != std::string_view(kMagic, 4)) {
    throw IoError("CorruptFile: bad magic in '" + path + "'");
  }
  const uint32_t version = r.u32();
  if (version != kVersion) {
    throw IoError("CorruptFile: unsupported checkpoint version " + std::to_string(version));
  }

  BackboneSpec spec;
  spec.kind = static_cast<BackboneSpec::Kind>(r.u8());
  const auto task = static_cast<TaskKind>(r.u8());
  SSLTaskConfig ssl;
  ssl.kind = static_cast<SslKind>(r.u8());
  const bool has_target = r.u8() != 0;
  const bool has_head = r.u8() != 0;
  const bool freeze = r.u8() != 0;
  const auto mode = static_cast<BNMode>(r.u8());

  spec.in_channels = r.u32();
  spec.image_hw = r.u32();
  const uint32_t n_widths = r.u32();
  if (n_widths == 0 || n_widths > 64) throw IoError("CorruptFile: block count");
  spec.widths.resize(n_widths);
  for (auto& width : spec.widths) width = r.u32();
  const uint32_t num_classes = r.u32();

  ssl.byol.projection_dim = r.u32();
  ssl.byol.predictor_hidden = r.u32();
  ssl.byol.ema_tau = r.f64();
  ssl.rotation_hidden = r.u32();
  ssl.augment.noise_std = r.f64();
  ssl.augment.crop_jitter = static_cast<int>(r.u32());
  ssl.augment.flip_prob = r.f64();

  Model m = Model::init(spec, num_classes, ssl, task, /*seed=*/0);
  if (!has_head) m.drop_ssl_head();

  const uint32_t n_blocks = r.u32();
  if (n_blocks != m.blocks().size()) throw IoError("CorruptFile: block count mismatch");
  for (auto& b : m.blocks()) b = read_block(r);
  m.classifier() = read_linear(r);
  if (has_head) {
    if (ssl.kind == SslKind::Rotation4) {
      auto& head = *m.rotation_head();
      head.fc1 = read_linear(r);
      head.bn = read_bn(r);
      head.fc2 = read_linear(r);
    } else {
      auto& head = *m.byol_head();
      head.proj1 = read_linear(r);
      head.proj_bn = read_bn(r);
      head.proj2 = read_linear(r);
      head.pred1 = read_linear(r);
      head.pred_bn = read_bn(r);
      head.pred2 = read_linear(r);
    }
  }
  if (has_target) {
    auto& t = *m.byol_target();
    const uint32_t n_tblocks = r.u32();
    if (n_tblocks != t.blocks.size()) throw IoError("CorruptFile: target block count mismatch");
    for (auto& b : t.blocks) b = read_block(r);
    t.proj1 = read_linear(r);
    t.proj_bn = read_bn(r);
    t.proj2 = read_linear(r);
  } else if (m.has_byol_target()) {
    m.byol_target().reset();
  }
  r.check_crc_and_eof();

  m.set_freeze_theta(freeze);
  m.set_mode(mode);
  return m;
}

}  // namespace mabn
