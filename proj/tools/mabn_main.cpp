// mabn command line tool: dataset generation, the two training phases,
// per-domain adaptation/evaluation and the ablation harness.
//
// Exit codes: 0 ok, 2 config error, 3 I/O, 4 numeric divergence,
// 5 contract violation (e.g. frozen theta changed).

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <CLI11.hpp>

#include "mabn/ablation.hpp"
#include "mabn/adapt.hpp"
#include "mabn/checkpoint.hpp"
#include "mabn/config.hpp"
#include "mabn/data.hpp"
#include "mabn/hash.hpp"
#include "mabn/telemetry.hpp"
#include "mabn/train.hpp"

namespace fs = std::filesystem;
using namespace mabn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitContract = 5;

void apply_thread_env() {
#ifdef _OPENMP
  if (const char* env = std::getenv("MABN_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) omp_set_num_threads(n);
  }
#endif
}

/// Owns an output directory: exclusive lock file plus a sidecar log that
/// is the only place timestamps are written (everything else must be
/// byte-reproducible).
class OutputDir {
 public:
  explicit OutputDir(const std::string& dir) : dir_(dir) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
    lock_path_ = (fs::path(dir_) / ".mabn.lock").string();
    lock_fd_ = ::open(lock_path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (lock_fd_ < 0) {
      throw IoError("output directory '" + dir + "' is locked (remove " + lock_path_ +
                    " if no other run owns it)");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    (void)!::write(lock_fd_, pid.data(), pid.size());
    log_.open((fs::path(dir_) / "run.log").string(), std::ios::app);
  }

  ~OutputDir() {
    if (lock_fd_ >= 0) {
      ::close(lock_fd_);
      ::unlink(lock_path_.c_str());
    }
  }

  OutputDir(const OutputDir&) = delete;
  OutputDir& operator=(const OutputDir&) = delete;

  void log(const std::string& line) {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%S", std::gmtime(&t));
    log_ << stamp << "Z " << line << "\n";
    log_.flush();
  }

  std::string file(const std::string& name) const { return (fs::path(dir_) / name).string(); }

 private:
  std::string dir_;
  std::string lock_path_;
  int lock_fd_ = -1;
  std::ofstream log_;
};

void echo_config(const RunConfig& cfg, const OutputDir& out) {
  std::ofstream f(out.file("resolved_config.json"), std::ios::trunc);
  if (!f) throw IoError("cannot write resolved_config.json");
  f << cfg.to_json_text();
}

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  int64_t seed = -1;
};

RunConfig load_config(const CommonArgs& args) {
  RunConfig cfg = args.config_path.empty() ? RunConfig::defaults()
                                           : RunConfig::from_json_file(args.config_path);
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (cfg.out_dir.empty()) throw ConfigError("no output directory (set out_dir or pass --out)");
  cfg.validate();
  return cfg;
}

char hex_digit(uint64_t v) { return "0123456789abcdef"[v & 0xf]; }

std::string hex64(uint64_t v) {
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = hex_digit(v);
    v >>= 4;
  }
  return s;
}

// ----------------------------------------------------------------------
// Commands
// ----------------------------------------------------------------------

int cmd_gen_data(const CommonArgs& args) {
  RunConfig cfg = load_config(args);
  if (args.seed >= 0) cfg.dataset.seed = static_cast<uint64_t>(args.seed);
  OutputDir out(cfg.out_dir);
  out.log("gen-data start");
  echo_config(cfg, out);

  DomainSet set = gen_domains(cfg.dataset, cfg.num_source, cfg.num_target);
  const std::string path = out.file("dataset.mabd");
  save_dataset(set, path);

  std::cout << "dataset=" << path << "\n"
            << "sources=" << set.sources.size() << " targets=" << set.targets.size()
            << " classes=" << cfg.dataset.num_classes
            << " samples_per_domain=" << cfg.dataset.samples_per_domain << "\n";
  for (const auto& d : set.sources) {
    std::cout << "source " << d.id << ": orientation=" << fmt_double(d.shift.orientation)
              << " gain0=" << fmt_double(d.shift.gain[0])
              << " noise=" << fmt_double(d.shift.noise_std) << "\n";
  }
  for (const auto& d : set.targets) {
    std::cout << "target " << d.id << ": orientation=" << fmt_double(d.shift.orientation)
              << " gain0=" << fmt_double(d.shift.gain[0])
              << " noise=" << fmt_double(d.shift.noise_std) << "\n";
  }
  out.log("gen-data done");
  return kExitOk;
}

int cmd_train_joint(const CommonArgs& args, const std::string& dataset_path) {
  RunConfig cfg = load_config(args);
  if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
  OutputDir out(cfg.out_dir);
  out.log("train-joint start");
  echo_config(cfg, out);

  DomainSet set = load_dataset(dataset_path);
  Model model = Model::init(cfg.backbone, cfg.dataset.num_classes, cfg.ssl, cfg.task, cfg.seed);

  TelemetryCsv telemetry(out.file("telemetry_joint.csv"));
  double last_joint = 0.0;
  auto sink = [&](const TelemetryRow& row) {
    telemetry.write(row);
    last_joint = row.loss_joint;
  };
  train_joint(model, set.sources, cfg.meta, cfg.train.joint_epochs, cfg.seed, sink);

  const std::string ckpt = out.file("checkpoint_joint.mabn");
  save_model(model, ckpt);
  std::cout << "checkpoint=" << ckpt << "\n"
            << "final_joint_loss=" << fmt_double(last_joint) << "\n";
  out.log("train-joint done");
  return kExitOk;
}

int cmd_meta_train(const CommonArgs& args, const std::string& dataset_path,
                   const std::string& in_ckpt) {
  RunConfig cfg = load_config(args);
  if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
  OutputDir out(cfg.out_dir);
  out.log("meta-train start");
  echo_config(cfg, out);

  DomainSet set = load_dataset(dataset_path);
  Model model = load_model(in_ckpt);
  model.set_freeze_theta(cfg.meta.scope != Scope::AllParams);

  const uint64_t theta_in = model.theta_hash();
  const uint64_t stats_in = model.stats_hash();

  TelemetryCsv telemetry(out.file("telemetry_meta.csv"));
  std::vector<double> first_epoch, last_epoch;
  int64_t last_seen_epoch = -1;
  auto sink = [&](const TelemetryRow& row) {
    telemetry.write(row);
    if (row.epoch == 0) first_epoch.push_back(row.loss_joint);
    if (row.epoch != last_seen_epoch) {
      last_seen_epoch = row.epoch;
      last_epoch.clear();
    }
    last_epoch.push_back(row.loss_joint);
  };
  meta_train(model, set.sources, cfg.meta, cfg.train.meta_epochs, cfg.seed, sink);

  const uint64_t theta_out = model.theta_hash();
  const uint64_t stats_out = model.stats_hash();
  std::cout << "theta_hash_in=" << hex64(theta_in) << " theta_hash_out=" << hex64(theta_out)
            << " equal=" << (theta_in == theta_out ? "yes" : "no") << "\n"
            << "stats_hash_in=" << hex64(stats_in) << " stats_hash_out=" << hex64(stats_out)
            << " equal=" << (stats_in == stats_out ? "yes" : "no") << "\n";

  auto mean = [](const std::vector<double>& xs) {
    return xs.empty() ? 0.0
                      : std::accumulate(xs.begin(), xs.end(), 0.0) /
                            static_cast<double>(xs.size());
  };
  std::cout << "query_loss_first_epoch_mean=" << fmt_double(mean(first_epoch))
            << " query_loss_last_epoch_mean=" << fmt_double(mean(last_epoch)) << "\n";

  const std::string ckpt = out.file("checkpoint_meta.mabn");
  save_model(model, ckpt);
  std::cout << "checkpoint=" << ckpt << "\n";
  out.log("meta-train done");

  if (cfg.meta.scope != Scope::AllParams && (theta_in != theta_out || stats_in != stats_out)) {
    std::cerr << "contract violation: frozen theta or running statistics changed\n";
    return kExitContract;
  }
  return kExitOk;
}

int cmd_adapt_eval(const CommonArgs& args, const std::string& dataset_path,
                   const std::string& ckpt_path, bool no_adapt,
                   const std::string& scope_override) {
  RunConfig cfg = load_config(args);
  if (args.seed >= 0) cfg.eval.seeds = {static_cast<uint64_t>(args.seed)};
  OutputDir out(cfg.out_dir);
  out.log("adapt-eval start");
  echo_config(cfg, out);

  DomainSet set = load_dataset(dataset_path);
  if (set.empty_target_warning) std::cout << "warning: dataset has no target domains\n";
  Model meta_model = load_model(ckpt_path);
  meta_model.set_freeze_theta(true);

  AblationArm arm;
  arm.scope = scope_override.empty() ? cfg.meta.scope : scope_from_string(scope_override);
  if (no_adapt) {
    arm.name = "no_adapt";
    arm.adapt = false;
    arm.assignment = Assignment::NoAdapt;
  } else {
    arm.name = "matched";
    arm.adapt = true;
    arm.assignment = Assignment::Matched;
  }

  const uint64_t theta_before = meta_model.theta_hash();
  const uint64_t stats_before = meta_model.stats_hash();

  std::vector<ArmRunResult> results;
  for (uint64_t seed : cfg.eval.seeds) {
    results.push_back(run_arm(meta_model, set.targets, arm, cfg, seed));
  }
  write_metrics_csv(out.file("metrics.csv"), results);
  write_summary_json(out.file("summary.json"), results);

  for (const auto& r : results) {
    std::cout << "arm=" << r.arm << " seed=" << r.seed
              << " acc=" << fmt_double(r.aggregate.accuracy)
              << " macro_f1=" << fmt_double(r.aggregate.macro_f1)
              << " wc_acc=" << fmt_double(r.aggregate.worst_case_accuracy) << "\n";
  }
  out.log("adapt-eval done");

  if (meta_model.theta_hash() != theta_before || meta_model.stats_hash() != stats_before) {
    std::cerr << "contract violation: adaptation mutated the meta model\n";
    return kExitContract;
  }
  return kExitOk;
}

int cmd_ablate(const CommonArgs& args, const std::string& dataset_path,
               const std::string& ckpt_path) {
  RunConfig cfg = load_config(args);
  if (args.seed >= 0) cfg.ablation.seeds = {static_cast<uint64_t>(args.seed)};
  OutputDir out(cfg.out_dir);
  out.log("ablate start");
  echo_config(cfg, out);

  DomainSet set = load_dataset(dataset_path);
  Model meta_model = load_model(ckpt_path);
  meta_model.set_freeze_theta(true);

  const std::vector<ArmRunResult> results = run_ablation(meta_model, set.targets, cfg);
  write_metrics_csv(out.file("metrics.csv"), results);
  write_summary_json(out.file("summary.json"), results);
  write_ablation_table(out.file("ablation_table.csv"), results);

  std::cout << "arms=" << cfg.ablation.arms.size() << " seeds=" << cfg.ablation.seeds.size()
            << " runs=" << results.size() << "\n";
  for (const auto& r : results) {
    std::cout << "arm=" << r.arm << " seed=" << r.seed
              << " acc=" << fmt_double(r.aggregate.accuracy)
              << " macro_f1=" << fmt_double(r.aggregate.macro_f1) << "\n";
  }
  out.log("ablate done");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  apply_thread_env();

  CLI::App app{"meta-adaptive batch-norm pipeline"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string dataset_path, in_ckpt, ckpt_path, scope_override;
  bool no_adapt = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", args.config_path, "JSON run configuration");
    cmd->add_option("--seed", args.seed, "override the config seed for this command");
    cmd->add_option("--out", args.out_dir, "output directory");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic multi-domain dataset");
  add_common(gen);

  CLI::App* joint = app.add_subcommand("train-joint", "phase 1: joint training on mixed sources");
  add_common(joint);
  joint->add_option("--dataset", dataset_path, "dataset file")->required();

  CLI::App* meta = app.add_subcommand("meta-train", "phase 2: episodic meta-auxiliary training");
  add_common(meta);
  meta->add_option("--dataset", dataset_path, "dataset file")->required();
  meta->add_option("--in-ckpt", in_ckpt, "jointly trained checkpoint")->required();

  CLI::App* adapt = app.add_subcommand("adapt-eval", "adapt to each target domain and evaluate");
  add_common(adapt);
  adapt->add_option("--dataset", dataset_path, "dataset file")->required();
  adapt->add_option("--ckpt", ckpt_path, "meta-trained checkpoint")->required();
  adapt->add_flag("--no-adapt", no_adapt, "evaluate the checkpoint without adaptation");
  adapt->add_option("--scope", scope_override, "adaptation scope: affine|fullbn|all");

  CLI::App* ablate = app.add_subcommand("ablate", "run the configured ablation arms");
  add_common(ablate);
  ablate->add_option("--dataset", dataset_path, "dataset file")->required();
  ablate->add_option("--ckpt", ckpt_path, "meta-trained checkpoint")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(args);
    if (joint->parsed()) return cmd_train_joint(args, dataset_path);
    if (meta->parsed()) return cmd_meta_train(args, dataset_path, in_ckpt);
    if (adapt->parsed()) return cmd_adapt_eval(args, dataset_path, ckpt_path, no_adapt, scope_override);
    if (ablate->parsed()) return cmd_ablate(args, dataset_path, ckpt_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NonFiniteError& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const ModeError& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return kExitContract;
  } catch (const ShapeError& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return kExitContract;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
