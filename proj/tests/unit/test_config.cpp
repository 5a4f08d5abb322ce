#include <doctest.h>

#include "mabn/config.hpp"

using namespace mabn;

TEST_CASE("config: defaults carry the documented training constants") {
  RunConfig cfg = RunConfig::defaults();
  CHECK(cfg.meta.alpha == doctest::Approx(3e-4));
  CHECK(cfg.meta.delta == doctest::Approx(3e-5));
  CHECK(cfg.meta.eta == doctest::Approx(1e-4));
  CHECK(cfg.meta.lambda == doctest::Approx(0.1));
  CHECK(cfg.meta.support_size == 12);
  CHECK(cfg.meta.inner_steps == 1);
  CHECK(cfg.meta.meta_batch == 4);
  CHECK(cfg.train.joint_epochs == 20);
  CHECK(cfg.train.meta_epochs == 10);
  CHECK(cfg.ssl.kind == SslKind::ByolLite);
  CHECK(cfg.ablation.arms.size() == 3);
  CHECK(cfg.ablation.arms[0].name == "no_adapt");
  CHECK(cfg.ablation.arms[1].name == "not_matched");
  CHECK(cfg.ablation.arms[2].name == "matched");
}

TEST_CASE("config: empty object resolves to pure defaults") {
  RunConfig a = RunConfig::defaults();
  a.out_dir = "x";
  RunConfig b = RunConfig::from_json_text(R"({"out_dir": "x"})");
  CHECK(a.to_json_text() == b.to_json_text());
}

TEST_CASE("config: unknown keys rejected at every level") {
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"out_dir":"x","typo_key":1})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"out_dir":"x","meta":{"alpha":0.1,"alpa":2}})"),
                  ConfigError);
  CHECK_THROWS_AS(
      RunConfig::from_json_text(R"({"out_dir":"x","dataset":{"shift":{"gain_apm":0.2}}})"),
      ConfigError);
  CHECK_THROWS_AS(
      RunConfig::from_json_text(
          R"({"out_dir":"x","ablation":{"arms":[{"name":"a","bogus":1}]}})"),
      ConfigError);
}

TEST_CASE("config: echo parses back to the same resolved form") {
  const std::string text = R"({
    "out_dir": "run",
    "seed": 9,
    "dataset": {"generator": "gaussian_blobs", "num_classes": 3, "blob_dim": 2,
                "samples_per_domain": 60},
    "backbone": {"kind": "mlp", "in_channels": 2, "widths": [8, 8]},
    "ssl": {"kind": "rotation4"},
    "meta": {"alpha": 0.05, "scope": "fullbn"},
    "eval": {"seeds": [1, 2]}
  })";
  RunConfig cfg = RunConfig::from_json_text(text);
  CHECK(cfg.meta.alpha == doctest::Approx(0.05));
  CHECK(cfg.meta.scope == Scope::FullBN);
  CHECK(cfg.dataset.kind == GeneratorKind::GaussianBlobs2D);
  RunConfig echoed = RunConfig::from_json_text(cfg.to_json_text());
  CHECK(echoed.to_json_text() == cfg.to_json_text());
}

TEST_CASE("config: scope strings round-trip") {
  for (Scope s : {Scope::AffineOnly, Scope::FullBN, Scope::AllParams, Scope::ThetaOnly}) {
    CHECK(scope_from_string(scope_to_string(s)) == s);
  }
  CHECK_THROWS_AS(scope_from_string("bogus"), ConfigError);
}

TEST_CASE("config: geometry mismatches rejected") {
  // conv backbone on blob data
  CHECK_THROWS_AS(RunConfig::from_json_text(
                      R"({"out_dir":"x","dataset":{"generator":"gaussian_blobs"}})"),
                  ConfigError);
  // image size disagreement
  CHECK_THROWS_AS(RunConfig::from_json_text(
                      R"({"out_dir":"x","dataset":{"image_hw":16},"backbone":{"image_hw":12}})"),
                  ConfigError);
}

TEST_CASE("config: arm validation") {
  RunConfig cfg = RunConfig::defaults();
  cfg.ablation.arms.push_back(cfg.ablation.arms[0]);  // duplicate name
  CHECK_THROWS_AS(cfg.ablation.validate(4), ConfigError);

  cfg = RunConfig::defaults();
  CHECK_THROWS_AS(cfg.ablation.validate(1), ConfigError);  // not_matched needs >= 2 targets

  cfg = RunConfig::defaults();
  cfg.ablation.arms[0].adapt = false;
  cfg.ablation.arms[0].assignment = Assignment::Matched;
  CHECK_THROWS_AS(cfg.ablation.validate(4), ConfigError);
}

TEST_CASE("config: bad values surface as config errors") {
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"out_dir":"x","meta":{"alpha":-1}})"),
                  ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"out_dir":"x","meta":{"alpha":"fast"}})"),
                  ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json_text("not json at all"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"out_dir":"x","task":"ranking"})"), ConfigError);
}
