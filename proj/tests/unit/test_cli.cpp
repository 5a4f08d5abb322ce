// End-to-end checks of the command line tool: exit codes, reproducible
// artifacts, the output-directory lock. Skipped when MABN_TOOL is unset
// (the ctest harness always sets it).

#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const char* tool_path() { return std::getenv("MABN_TOOL"); }

int run(const std::string& args) {
  const std::string cmd = std::string(tool_path()) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

struct TempTree {
  fs::path root;
  TempTree() {
    root = fs::temp_directory_path() / ("mabn_cli_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~TempTree() { fs::remove_all(root); }
  std::string sub(const char* name) const { return (root / name).string(); }
};

const char* kTinyConfig = R"({
  "seed": 5,
  "dataset": {"generator": "shifted_shapes", "num_classes": 4, "samples_per_domain": 32,
              "image_hw": 8, "num_source": 3, "num_target": 2, "seed": 21},
  "backbone": {"kind": "conv3", "in_channels": 3, "image_hw": 8, "widths": [4, 6]},
  "ssl": {"kind": "rotation4"},
  "meta": {"meta_batch": 2, "support_size": 4, "query_size": 6, "batch_size": 8},
  "train": {"joint_epochs": 2, "meta_epochs": 1},
  "eval": {"seeds": [0]},
  "ablation": {"seeds": [0]}
})";

std::string write_config(const TempTree& tree, const char* text = kTinyConfig) {
  const std::string path = tree.sub("cfg.json");
  std::ofstream f(path);
  f << text;
  return path;
}

}  // namespace

TEST_CASE("cli: invalid config exits 2 and names the field") {
  if (!tool_path()) return;
  TempTree tree;
  const std::string bad = tree.sub("bad.json");
  {
    std::ofstream f(bad);
    f << R"({"dataset": {"num_source": 1}})";
  }
  // capture stderr for the message
  const std::string cmd = std::string(tool_path()) + " gen-data --config " + bad + " --out " +
                          tree.sub("out") + " 2>" + tree.sub("err.txt") + " >/dev/null";
  const int code = WEXITSTATUS(std::system(cmd.c_str()));
  CHECK(code == 2);
  const std::string err = slurp(tree.sub("err.txt"));
  CHECK(err.find("num_source") != std::string::npos);
}

TEST_CASE("cli: gen-data reruns produce identical dataset bytes") {
  if (!tool_path()) return;
  TempTree tree;
  const std::string cfg = write_config(tree);
  REQUIRE(run("gen-data --config " + cfg + " --out " + tree.sub("d1")) == 0);
  REQUIRE(run("gen-data --config " + cfg + " --out " + tree.sub("d2")) == 0);
  CHECK(slurp(tree.sub("d1") + "/dataset.mabd") == slurp(tree.sub("d2") + "/dataset.mabd"));
  // resolved config echoed verbatim into the output directory
  CHECK(fs::exists(tree.sub("d1") + "/resolved_config.json"));
}

TEST_CASE("cli: locked output directory exits 3") {
  if (!tool_path()) return;
  TempTree tree;
  const std::string cfg = write_config(tree);
  fs::create_directories(tree.sub("busy"));
  std::ofstream(tree.sub("busy") + "/.mabn.lock") << "held\n";
  CHECK(run("gen-data --config " + cfg + " --out " + tree.sub("busy")) == 3);
}

TEST_CASE("cli: full pipeline artifacts and determinism") {
  if (!tool_path()) return;
  TempTree tree;
  const std::string cfg = write_config(tree);
  REQUIRE(run("gen-data --config " + cfg + " --out " + tree.sub("data")) == 0);
  const std::string ds = tree.sub("data") + "/dataset.mabd";

  REQUIRE(run("train-joint --config " + cfg + " --dataset " + ds + " --out " + tree.sub("joint")) ==
          0);
  const std::string joint_ckpt = tree.sub("joint") + "/checkpoint_joint.mabn";

  // telemetry rows = epochs x batches (+ header): 3 domains x 16 train
  // samples, batch 8 -> 6 batches/epoch, 2 epochs
  {
    std::ifstream f(tree.sub("joint") + "/telemetry_joint.csv");
    std::string line;
    int rows = -1;  // header does not count
    while (std::getline(f, line)) ++rows;
    CHECK(rows == 12);
  }

  REQUIRE(run("meta-train --config " + cfg + " --dataset " + ds + " --in-ckpt " + joint_ckpt +
              " --out " + tree.sub("meta")) == 0);
  const std::string meta_ckpt = tree.sub("meta") + "/checkpoint_meta.mabn";

  REQUIRE(run("adapt-eval --config " + cfg + " --dataset " + ds + " --ckpt " + meta_ckpt +
              " --out " + tree.sub("eval1")) == 0);
  REQUIRE(run("adapt-eval --config " + cfg + " --dataset " + ds + " --ckpt " + meta_ckpt +
              " --out " + tree.sub("eval2")) == 0);
  CHECK(slurp(tree.sub("eval1") + "/metrics.csv") == slurp(tree.sub("eval2") + "/metrics.csv"));
  CHECK(slurp(tree.sub("eval1") + "/summary.json") == slurp(tree.sub("eval2") + "/summary.json"));

  // --no-adapt runs the NoAdapt arm
  REQUIRE(run("adapt-eval --config " + cfg + " --dataset " + ds + " --ckpt " + meta_ckpt +
              " --no-adapt --out " + tree.sub("noadapt")) == 0);
  const std::string csv = slurp(tree.sub("noadapt") + "/metrics.csv");
  CHECK(csv.find("no_adapt") != std::string::npos);

  REQUIRE(run("ablate --config " + cfg + " --dataset " + ds + " --ckpt " + meta_ckpt + " --out " +
              tree.sub("abl")) == 0);
  CHECK(fs::exists(tree.sub("abl") + "/ablation_table.csv"));
  CHECK(fs::exists(tree.sub("abl") + "/summary.json"));

  // metrics.csv rows = arms x seeds x domains (+ header)
  {
    std::ifstream f(tree.sub("abl") + "/metrics.csv");
    std::string line;
    int rows = -1;
    while (std::getline(f, line)) ++rows;
    CHECK(rows == 3 * 1 * 2);
  }

  // default Table-3 arm names in the output
  const std::string table = slurp(tree.sub("abl") + "/ablation_table.csv");
  CHECK(table.find("no_adapt") != std::string::npos);
  CHECK(table.find("not_matched") != std::string::npos);
  CHECK(table.find("matched") != std::string::npos);
}

TEST_CASE("cli: checkpoint reload evaluates identically") {
  if (!tool_path()) return;
  TempTree tree;
  const std::string cfg = write_config(tree);
  REQUIRE(run("gen-data --config " + cfg + " --out " + tree.sub("data")) == 0);
  const std::string ds = tree.sub("data") + "/dataset.mabd";
  REQUIRE(run("train-joint --config " + cfg + " --dataset " + ds + " --out " + tree.sub("joint")) ==
          0);
  const std::string ckpt = tree.sub("joint") + "/checkpoint_joint.mabn";

  // two no-adapt evaluations of the same checkpoint agree byte-for-byte
  REQUIRE(run("adapt-eval --config " + cfg + " --dataset " + ds + " --ckpt " + ckpt +
              " --no-adapt --out " + tree.sub("e1")) == 0);
  REQUIRE(run("adapt-eval --config " + cfg + " --dataset " + ds + " --ckpt " + ckpt +
              " --no-adapt --out " + tree.sub("e2")) == 0);
  CHECK(slurp(tree.sub("e1") + "/metrics.csv") == slurp(tree.sub("e2") + "/metrics.csv"));
}
