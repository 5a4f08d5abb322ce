#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mabn/data.hpp"
#include "mabn/model.hpp"
#include "mabn/train.hpp"

namespace mabn {

enum class Assignment : uint8_t { Matched = 0, NotMatched = 1, NoAdapt = 2 };
enum class PostRefine : uint8_t { None = 0, EntropyMin = 1 };

const char* assignment_name(Assignment a);
const char* post_refine_name(PostRefine p);

struct AblationArm {
  std::string name;
  Scope scope = Scope::AffineOnly;
  bool adapt = true;
  Assignment assignment = Assignment::Matched;
  PostRefine post_refine = PostRefine::None;
};

struct AblationPlan {
  std::vector<AblationArm> arms;  // defaults to {no_adapt, not_matched, matched}
  std::vector<uint64_t> seeds = {0, 1, 2, 3, 4};

  void validate(size_t num_targets) const;
};

struct TrainSchedule {
  int64_t joint_epochs = 20;
  int64_t meta_epochs = 10;
};

struct EvalConfig {
  std::vector<uint64_t> seeds = {0, 1, 2, 3, 4};
  int64_t support_size = 0;  // 0: inherit meta.support_size
  int64_t eval_batch = 64;
  double refine_lr = 0.0;  // 0: inherit meta.delta
  int64_t refine_steps = 1;
  int64_t refine_batch = 16;
};

/// Fully resolved run configuration. Parsing rejects unknown keys; every
/// field has a default, and the resolved form can be echoed back as
/// deterministic JSON for replay.
struct RunConfig {
  uint64_t seed = 1;
  std::string out_dir;
  DomainSpec dataset;
  int64_t num_source = 8;
  int64_t num_target = 4;
  BackboneSpec backbone;
  TaskKind task = TaskKind::Classification;
  SSLTaskConfig ssl;
  MetaConfig meta;
  TrainSchedule train;
  EvalConfig eval;
  AblationPlan ablation;

  static RunConfig defaults();
  static RunConfig from_json_text(const std::string& text);
  static RunConfig from_json_file(const std::string& path);
  std::string to_json_text() const;

  void validate() const;
  int64_t eval_support_size() const { return eval.support_size > 0 ? eval.support_size : meta.support_size; }
  double eval_refine_lr() const { return eval.refine_lr > 0.0 ? eval.refine_lr : meta.delta; }
};

Scope scope_from_string(const std::string& s);
std::string scope_to_string(Scope s);

}  // namespace mabn
