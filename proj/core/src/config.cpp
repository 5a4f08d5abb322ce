#include "mabn/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mabn {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void check_keys(const json& j, const std::string& section,
                std::initializer_list<const char*> allowed) {
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& item : j.items()) {
    if (!ok.count(item.key())) {
      throw ConfigError("unknown key '" + item.key() + "' in section '" + section + "'");
    }
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& section) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for '" + section + "." + key + "': " + e.what());
  }
}

std::string enum_str(const json& j, const char* key, const std::string& fallback,
                     const std::string& section) {
  return get_or<std::string>(j, key, fallback, section);
}

GeneratorKind generator_from(const std::string& s) {
  if (s == "shifted_shapes") return GeneratorKind::ShiftedShapes;
  if (s == "gaussian_blobs") return GeneratorKind::GaussianBlobs2D;
  throw ConfigError("dataset.generator must be 'shifted_shapes' or 'gaussian_blobs', got '" + s +
                    "'");
}

std::string generator_to(GeneratorKind k) {
  return k == GeneratorKind::ShiftedShapes ? "shifted_shapes" : "gaussian_blobs";
}

TargetShiftMode target_mode_from(const std::string& s) {
  if (s == "extrapolate") return TargetShiftMode::Extrapolate;
  if (s == "interpolate") return TargetShiftMode::Interpolate;
  throw ConfigError("dataset.shift.target_mode must be 'extrapolate' or 'interpolate'");
}

Assignment assignment_from(const std::string& s) {
  if (s == "matched") return Assignment::Matched;
  if (s == "not_matched") return Assignment::NotMatched;
  if (s == "no_adapt") return Assignment::NoAdapt;
  throw ConfigError("assignment must be 'matched', 'not_matched' or 'no_adapt', got '" + s + "'");
}

PostRefine refine_from(const std::string& s) {
  if (s == "none") return PostRefine::None;
  if (s == "entropy") return PostRefine::EntropyMin;
  throw ConfigError("post_refine must be 'none' or 'entropy', got '" + s + "'");
}

}  // namespace

const char* assignment_name(Assignment a) {
  switch (a) {
    case Assignment::Matched: return "matched";
    case Assignment::NotMatched: return "not_matched";
    case Assignment::NoAdapt: return "no_adapt";
  }
  return "?";
}

const char* post_refine_name(PostRefine p) {
  return p == PostRefine::None ? "none" : "entropy";
}

Scope scope_from_string(const std::string& s) {
  if (s == "affine") return Scope::AffineOnly;
  if (s == "fullbn") return Scope::FullBN;
  if (s == "all") return Scope::AllParams;
  if (s == "theta") return Scope::ThetaOnly;
  throw ConfigError("scope must be one of 'affine', 'fullbn', 'all', 'theta', got '" + s + "'");
}

std::string scope_to_string(Scope s) {
  switch (s) {
    case Scope::AffineOnly: return "affine";
    case Scope::FullBN: return "fullbn";
    case Scope::AllParams: return "all";
    case Scope::ThetaOnly: return "theta";
  }
  return "?";
}

void AblationPlan::validate(size_t num_targets) const {
  std::set<std::string> names;
  for (const auto& arm : arms) {
    if (arm.name.empty()) throw ConfigError("ablation arm with empty name");
    if (!names.insert(arm.name).second) {
      throw ConfigError("duplicate ablation arm name '" + arm.name + "'");
    }
    if (arm.assignment == Assignment::NotMatched && num_targets < 2) {
      throw ConfigError("arm '" + arm.name + "' needs >= 2 target domains for not_matched");
    }
    if (arm.assignment == Assignment::NotMatched && arm.scope == Scope::FullBN) {
      throw ConfigError("arm '" + arm.name +
                        "': not_matched snapshots carry affine parameters only");
    }
    if (!arm.adapt && arm.assignment != Assignment::NoAdapt) {
      throw ConfigError("arm '" + arm.name + "': adapt=false requires assignment no_adapt");
    }
  }
  if (seeds.empty()) throw ConfigError("ablation.seeds must be non-empty");
}

RunConfig RunConfig::defaults() {
  RunConfig cfg;
  cfg.ablation.arms = {
      {"no_adapt", Scope::AffineOnly, false, Assignment::NoAdapt, PostRefine::None},
      {"not_matched", Scope::AffineOnly, true, Assignment::NotMatched, PostRefine::None},
      {"matched", Scope::AffineOnly, true, Assignment::Matched, PostRefine::None},
  };
  return cfg;
}

RunConfig RunConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");

  RunConfig cfg = defaults();
  check_keys(j, "(root)",
             {"seed", "out_dir", "dataset", "backbone", "task", "ssl", "meta", "train", "eval",
              "ablation"});
  cfg.seed = get_or<uint64_t>(j, "seed", cfg.seed, "(root)");
  cfg.out_dir = get_or<std::string>(j, "out_dir", cfg.out_dir, "(root)");

  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    check_keys(d, "dataset",
               {"generator", "num_classes", "samples_per_domain", "train_fraction", "channels",
                "image_hw", "blob_dim", "blob_radius", "blob_sigma", "num_source", "num_target",
                "shift", "seed"});
    cfg.dataset.kind = generator_from(enum_str(d, "generator", generator_to(cfg.dataset.kind), "dataset"));
    cfg.dataset.num_classes = get_or<int64_t>(d, "num_classes", cfg.dataset.num_classes, "dataset");
    cfg.dataset.samples_per_domain =
        get_or<int64_t>(d, "samples_per_domain", cfg.dataset.samples_per_domain, "dataset");
    cfg.dataset.train_fraction =
        get_or<double>(d, "train_fraction", cfg.dataset.train_fraction, "dataset");
    cfg.dataset.channels = get_or<int64_t>(d, "channels", cfg.dataset.channels, "dataset");
    cfg.dataset.image_hw = get_or<int64_t>(d, "image_hw", cfg.dataset.image_hw, "dataset");
    cfg.dataset.blob_dim = get_or<int64_t>(d, "blob_dim", cfg.dataset.blob_dim, "dataset");
    cfg.dataset.blob_radius = get_or<double>(d, "blob_radius", cfg.dataset.blob_radius, "dataset");
    cfg.dataset.blob_sigma = get_or<double>(d, "blob_sigma", cfg.dataset.blob_sigma, "dataset");
    cfg.num_source = get_or<int64_t>(d, "num_source", cfg.num_source, "dataset");
    cfg.num_target = get_or<int64_t>(d, "num_target", cfg.num_target, "dataset");
    cfg.dataset.seed = get_or<uint64_t>(d, "seed", cfg.dataset.seed, "dataset");
    if (d.contains("shift")) {
      const json& s = d.at("shift");
      check_keys(s, "dataset.shift",
                 {"orientation_range", "illumination_amp", "gain_amp", "bias_amp", "background_base", "background_amp",
                  "noise_base", "noise_amp", "target_mode", "target_scale", "sample_gain_jitter",
                  "outlier_prob", "outlier_gain"});
      auto& ds = cfg.dataset;
      ds.orientation_range = get_or<double>(s, "orientation_range", ds.orientation_range, "shift");
      ds.illumination_amp = get_or<double>(s, "illumination_amp", ds.illumination_amp, "shift");
      ds.gain_amp = get_or<double>(s, "gain_amp", ds.gain_amp, "shift");
      ds.bias_amp = get_or<double>(s, "bias_amp", ds.bias_amp, "shift");
      ds.background_base = get_or<double>(s, "background_base", ds.background_base, "shift");
      ds.background_amp = get_or<double>(s, "background_amp", ds.background_amp, "shift");
      ds.noise_base = get_or<double>(s, "noise_base", ds.noise_base, "shift");
      ds.noise_amp = get_or<double>(s, "noise_amp", ds.noise_amp, "shift");
      ds.target_mode = target_mode_from(enum_str(
          s, "target_mode",
          ds.target_mode == TargetShiftMode::Extrapolate ? "extrapolate" : "interpolate",
          "shift"));
      ds.target_scale = get_or<double>(s, "target_scale", ds.target_scale, "shift");
      ds.sample_gain_jitter =
          get_or<double>(s, "sample_gain_jitter", ds.sample_gain_jitter, "shift");
      ds.outlier_prob = get_or<double>(s, "outlier_prob", ds.outlier_prob, "shift");
      ds.outlier_gain = get_or<double>(s, "outlier_gain", ds.outlier_gain, "shift");
    }
  }

  if (j.contains("backbone")) {
    const json& b = j.at("backbone");
    check_keys(b, "backbone", {"kind", "in_channels", "image_hw", "widths"});
    const std::string kind = enum_str(
        b, "kind", cfg.backbone.kind == BackboneSpec::Kind::Conv3 ? "conv3" : "mlp", "backbone");
    if (kind == "conv3") cfg.backbone.kind = BackboneSpec::Kind::Conv3;
    else if (kind == "mlp") cfg.backbone.kind = BackboneSpec::Kind::Mlp;
    else throw ConfigError("backbone.kind must be 'conv3' or 'mlp', got '" + kind + "'");
    cfg.backbone.in_channels = get_or<int64_t>(b, "in_channels", cfg.backbone.in_channels, "backbone");
    cfg.backbone.image_hw = get_or<int64_t>(b, "image_hw", cfg.backbone.image_hw, "backbone");
    cfg.backbone.widths = get_or<std::vector<int64_t>>(b, "widths", cfg.backbone.widths, "backbone");
  }

  const std::string task = enum_str(j, "task", "classification", "(root)");
  if (task == "classification") cfg.task = TaskKind::Classification;
  else if (task == "regression") cfg.task = TaskKind::Regression;
  else throw ConfigError("task must be 'classification' or 'regression', got '" + task + "'");

  if (j.contains("ssl")) {
    const json& s = j.at("ssl");
    check_keys(s, "ssl", {"kind", "rotation_hidden", "byol", "augmentation"});
    const std::string kind =
        enum_str(s, "kind", cfg.ssl.kind == SslKind::Rotation4 ? "rotation4" : "byol_lite", "ssl");
    if (kind == "rotation4") cfg.ssl.kind = SslKind::Rotation4;
    else if (kind == "byol_lite") cfg.ssl.kind = SslKind::ByolLite;
    else throw ConfigError("ssl.kind must be 'rotation4' or 'byol_lite', got '" + kind + "'");
    cfg.ssl.rotation_hidden = get_or<int64_t>(s, "rotation_hidden", cfg.ssl.rotation_hidden, "ssl");
    if (s.contains("byol")) {
      const json& by = s.at("byol");
      check_keys(by, "ssl.byol", {"projection_dim", "predictor_hidden", "ema_tau"});
      cfg.ssl.byol.projection_dim =
          get_or<int64_t>(by, "projection_dim", cfg.ssl.byol.projection_dim, "byol");
      cfg.ssl.byol.predictor_hidden =
          get_or<int64_t>(by, "predictor_hidden", cfg.ssl.byol.predictor_hidden, "byol");
      cfg.ssl.byol.ema_tau = get_or<double>(by, "ema_tau", cfg.ssl.byol.ema_tau, "byol");
    }
    if (s.contains("augmentation")) {
      const json& a = s.at("augmentation");
      check_keys(a, "ssl.augmentation", {"noise_std", "crop_jitter", "flip_prob"});
      cfg.ssl.augment.noise_std = get_or<double>(a, "noise_std", cfg.ssl.augment.noise_std, "aug");
      cfg.ssl.augment.crop_jitter = get_or<int>(a, "crop_jitter", cfg.ssl.augment.crop_jitter, "aug");
      cfg.ssl.augment.flip_prob = get_or<double>(a, "flip_prob", cfg.ssl.augment.flip_prob, "aug");
    }
  }

  if (j.contains("meta")) {
    const json& m = j.at("meta");
    check_keys(m, "meta",
               {"alpha", "delta", "eta", "meta_batch", "lambda", "support_size", "query_size",
                "inner_steps", "scope", "outer_order", "outer_agg", "batch_size", "plateau_window",
                "plateau_tol"});
    cfg.meta.alpha = get_or<double>(m, "alpha", cfg.meta.alpha, "meta");
    cfg.meta.delta = get_or<double>(m, "delta", cfg.meta.delta, "meta");
    cfg.meta.eta = get_or<double>(m, "eta", cfg.meta.eta, "meta");
    cfg.meta.meta_batch = get_or<int64_t>(m, "meta_batch", cfg.meta.meta_batch, "meta");
    cfg.meta.lambda = get_or<double>(m, "lambda", cfg.meta.lambda, "meta");
    cfg.meta.support_size = get_or<int64_t>(m, "support_size", cfg.meta.support_size, "meta");
    cfg.meta.query_size = get_or<int64_t>(m, "query_size", cfg.meta.query_size, "meta");
    cfg.meta.inner_steps = get_or<int64_t>(m, "inner_steps", cfg.meta.inner_steps, "meta");
    cfg.meta.scope = scope_from_string(enum_str(m, "scope", scope_to_string(cfg.meta.scope), "meta"));
    const std::string order = enum_str(m, "outer_order", "first_order", "meta");
    if (order != "first_order") {
      throw ConfigError("meta.outer_order: only 'first_order' is implemented");
    }
    const std::string agg = enum_str(m, "outer_agg", cfg.meta.outer_agg == OuterAgg::Sum ? "sum" : "mean", "meta");
    if (agg == "sum") cfg.meta.outer_agg = OuterAgg::Sum;
    else if (agg == "mean") cfg.meta.outer_agg = OuterAgg::Mean;
    else throw ConfigError("meta.outer_agg must be 'sum' or 'mean'");
    cfg.meta.batch_size = get_or<int64_t>(m, "batch_size", cfg.meta.batch_size, "meta");
    cfg.meta.plateau_window = get_or<int64_t>(m, "plateau_window", cfg.meta.plateau_window, "meta");
    cfg.meta.plateau_tol = get_or<double>(m, "plateau_tol", cfg.meta.plateau_tol, "meta");
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "train", {"joint_epochs", "meta_epochs"});
    cfg.train.joint_epochs = get_or<int64_t>(t, "joint_epochs", cfg.train.joint_epochs, "train");
    cfg.train.meta_epochs = get_or<int64_t>(t, "meta_epochs", cfg.train.meta_epochs, "train");
  }

  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_keys(e, "eval",
               {"seeds", "support_size", "eval_batch", "refine_lr", "refine_steps", "refine_batch"});
    cfg.eval.seeds = get_or<std::vector<uint64_t>>(e, "seeds", cfg.eval.seeds, "eval");
    cfg.eval.support_size = get_or<int64_t>(e, "support_size", cfg.eval.support_size, "eval");
    cfg.eval.eval_batch = get_or<int64_t>(e, "eval_batch", cfg.eval.eval_batch, "eval");
    cfg.eval.refine_lr = get_or<double>(e, "refine_lr", cfg.eval.refine_lr, "eval");
    cfg.eval.refine_steps = get_or<int64_t>(e, "refine_steps", cfg.eval.refine_steps, "eval");
    cfg.eval.refine_batch = get_or<int64_t>(e, "refine_batch", cfg.eval.refine_batch, "eval");
  }

  if (j.contains("ablation")) {
    const json& a = j.at("ablation");
    check_keys(a, "ablation", {"arms", "seeds"});
    cfg.ablation.seeds = get_or<std::vector<uint64_t>>(a, "seeds", cfg.ablation.seeds, "ablation");
    if (a.contains("arms")) {
      cfg.ablation.arms.clear();
      for (const auto& aj : a.at("arms")) {
        check_keys(aj, "ablation.arms[]", {"name", "scope", "adapt", "assignment", "post_refine"});
        AblationArm arm;
        arm.name = get_or<std::string>(aj, "name", "", "arm");
        arm.scope = scope_from_string(enum_str(aj, "scope", "affine", "arm"));
        arm.adapt = get_or<bool>(aj, "adapt", true, "arm");
        arm.assignment = assignment_from(enum_str(aj, "assignment", "matched", "arm"));
        arm.post_refine = refine_from(enum_str(aj, "post_refine", "none", "arm"));
        cfg.ablation.arms.push_back(std::move(arm));
      }
    }
  }

  cfg.validate();
  return cfg;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

void RunConfig::validate() const {
  dataset.validate();
  backbone.validate();
  ssl.validate();
  meta.validate();
  if (num_source < 2) throw ConfigError("dataset.num_source must be >= 2");
  if (num_target < 1) throw ConfigError("dataset.num_target must be >= 1");
  if (train.joint_epochs < 0 || train.meta_epochs < 0) {
    throw ConfigError("epoch counts must be >= 0");
  }
  if (eval.seeds.empty()) throw ConfigError("eval.seeds must be non-empty");
  if (eval.eval_batch < 1) throw ConfigError("eval.eval_batch must be >= 1");
  if (eval.refine_steps < 0) throw ConfigError("eval.refine_steps must be >= 0");
  if (eval.refine_batch < 2) throw ConfigError("eval.refine_batch must be >= 2");
  ablation.validate(static_cast<size_t>(num_target));

  // dataset and backbone must agree on input geometry
  if (dataset.kind == GeneratorKind::ShiftedShapes) {
    if (backbone.kind != BackboneSpec::Kind::Conv3) {
      throw ConfigError("shifted_shapes data needs the conv3 backbone");
    }
    if (backbone.in_channels != dataset.channels || backbone.image_hw != dataset.image_hw) {
      throw ConfigError("backbone in_channels/image_hw must match the dataset");
    }
  } else {
    if (backbone.kind != BackboneSpec::Kind::Mlp) {
      throw ConfigError("gaussian_blobs data needs the mlp backbone");
    }
    if (backbone.in_channels != dataset.blob_dim) {
      throw ConfigError("backbone.in_channels must equal dataset.blob_dim");
    }
  }
}

std::string RunConfig::to_json_text() const {
  ordered_json j;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["dataset"] = {
      {"generator", generator_to(dataset.kind)},
      {"num_classes", dataset.num_classes},
      {"samples_per_domain", dataset.samples_per_domain},
      {"train_fraction", dataset.train_fraction},
      {"channels", dataset.channels},
      {"image_hw", dataset.image_hw},
      {"blob_dim", dataset.blob_dim},
      {"blob_radius", dataset.blob_radius},
      {"blob_sigma", dataset.blob_sigma},
      {"num_source", num_source},
      {"num_target", num_target},
      {"seed", dataset.seed},
      {"shift",
       {{"orientation_range", dataset.orientation_range},
        {"illumination_amp", dataset.illumination_amp},
        {"gain_amp", dataset.gain_amp},
        {"bias_amp", dataset.bias_amp},
        {"background_base", dataset.background_base},
        {"background_amp", dataset.background_amp},
        {"noise_base", dataset.noise_base},
        {"noise_amp", dataset.noise_amp},
        {"target_mode",
         dataset.target_mode == TargetShiftMode::Extrapolate ? "extrapolate" : "interpolate"},
        {"target_scale", dataset.target_scale},
        {"sample_gain_jitter", dataset.sample_gain_jitter},
        {"outlier_prob", dataset.outlier_prob},
        {"outlier_gain", dataset.outlier_gain}}},
  };
  j["backbone"] = {
      {"kind", backbone.kind == BackboneSpec::Kind::Conv3 ? "conv3" : "mlp"},
      {"in_channels", backbone.in_channels},
      {"image_hw", backbone.image_hw},
      {"widths", backbone.widths},
  };
  j["task"] = task == TaskKind::Classification ? "classification" : "regression";
  j["ssl"] = {
      {"kind", ssl.kind == SslKind::Rotation4 ? "rotation4" : "byol_lite"},
      {"rotation_hidden", ssl.rotation_hidden},
      {"byol",
       {{"projection_dim", ssl.byol.projection_dim},
        {"predictor_hidden", ssl.byol.predictor_hidden},
        {"ema_tau", ssl.byol.ema_tau}}},
      {"augmentation",
       {{"noise_std", ssl.augment.noise_std},
        {"crop_jitter", ssl.augment.crop_jitter},
        {"flip_prob", ssl.augment.flip_prob}}},
  };
  j["meta"] = {
      {"alpha", meta.alpha},
      {"delta", meta.delta},
      {"eta", meta.eta},
      {"meta_batch", meta.meta_batch},
      {"lambda", meta.lambda},
      {"support_size", meta.support_size},
      {"query_size", meta.query_size},
      {"inner_steps", meta.inner_steps},
      {"scope", scope_to_string(meta.scope)},
      {"outer_order", "first_order"},
      {"outer_agg", meta.outer_agg == OuterAgg::Sum ? "sum" : "mean"},
      {"batch_size", meta.batch_size},
      {"plateau_window", meta.plateau_window},
      {"plateau_tol", meta.plateau_tol},
  };
  j["train"] = {{"joint_epochs", train.joint_epochs}, {"meta_epochs", train.meta_epochs}};
  j["eval"] = {
      {"seeds", eval.seeds},          {"support_size", eval.support_size},
      {"eval_batch", eval.eval_batch}, {"refine_lr", eval.refine_lr},
      {"refine_steps", eval.refine_steps}, {"refine_batch", eval.refine_batch},
  };
  ordered_json arms = ordered_json::array();
  for (const auto& arm : ablation.arms) {
    arms.push_back({{"name", arm.name},
                    {"scope", scope_to_string(arm.scope)},
                    {"adapt", arm.adapt},
                    {"assignment", assignment_name(arm.assignment)},
                    {"post_refine", post_refine_name(arm.post_refine)}});
  }
  j["ablation"] = {{"arms", arms}, {"seeds", ablation.seeds}};
  return j.dump(2) + "\n";
}

}  // namespace mabn
