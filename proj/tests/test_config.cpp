#include <doctest.h>

#include <cstdlib>
#include <fstream>

#include "oracles.hpp"
#include "tgd/config.hpp"

using namespace tgd;
using nlohmann::json;
namespace fs = std::filesystem;

TEST_CASE("defaults survive a JSON round trip") {
  const RunConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(run_config_from_json(to_json_value(c)) == c);
  CHECK(c.transfer.iterations == 1000);
  CHECK(c.transfer.feedback_cycle == 200);
  CHECK(c.augment_pretrain == AugmentationConfig::pretraining());
  CHECK(c.augment_transfer == AugmentationConfig::transfer());
}

TEST_CASE("partial configs keep defaults for missing keys") {
  const json j = {{"transfer", {{"iterations", 7}, {"s", 0.5}}},
                  {"model", {{"gn_groups", 4}}},
                  {"augmentation", {{"transfer", {{"p_blur", 0.0}}}}},
                  {"seed", 99}};
  const RunConfig c = run_config_from_json(j);
  CHECK(c.transfer.iterations == 7);
  CHECK(c.transfer.s == 0.5);
  CHECK(c.transfer.batch_size == TransferConfig{}.batch_size);
  CHECK(c.model.gn_groups == 4);
  CHECK(c.model.stage_widths == ModelSpec{}.stage_widths);
  CHECK(c.augment_transfer.p_blur == 0.0);
  CHECK(c.augment_transfer.p_jpeg == 0.5);
  CHECK(c.seed == 99);
}

TEST_CASE("unknown keys and bad values are rejected") {
  CHECK_THROWS_AS(run_config_from_json({{"transfr", json::object()}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"transfer", {{"iteratons", 3}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"augmentation", {{"pretrain", {{"p_warp", 0.1}}}}}}),
                  ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"transfer", {{"iterations", "many"}}}}), ConfigError);
  // parsing accepts out-of-range values, validate() (run by load_run_config) rejects them
  CHECK_THROWS_AS(run_config_from_json({{"transfer", {{"s", 5.0}}}}).validate(), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"model", {{"gn_groups", 3}}}}).validate(), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"data", {{"kind", "video"}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json::array()), ConfigError);
}

TEST_CASE("config digest ignores output_dir and tracks everything else") {
  RunConfig a;
  RunConfig b = a;
  b.output_dir = "/somewhere/else";
  CHECK(config_digest(a) == config_digest(b));
  CHECK(canonical_config(a) != canonical_config(b));
  b.transfer.s = 0.25;
  CHECK(config_digest(a) != config_digest(b));
  b = a;
  b.seed = 1;
  CHECK(config_digest(a) != config_digest(b));
  CHECK(config_digest(a).size() == 64);
}

TEST_CASE("frozen config reproduces the run configuration") {
  const fs::path dir = oracle::scratch_dir("config");
  RunConfig c;
  c.transfer.iterations = 12;
  c.transfer.mode = TransferMode::legacy_sp;
  c.data.synthetic.artifact = ArtifactKind::blur_residual;
  c.data.split = {0.5, 0.1, 0.4, 20};
  c.seed = 31;
  const fs::path f = write_frozen_config(c, dir);
  CHECK(f == dir / "config.json");
  const RunConfig back = load_run_config(f);
  CHECK(back == c);
  CHECK(config_digest(back) == config_digest(c));

  // a rerun from the frozen file freezes the same bytes
  const fs::path dir2 = dir / "rerun";
  write_frozen_config(back, dir2);
  std::ifstream x(f), y(dir2 / "config.json");
  const std::string sx{std::istreambuf_iterator<char>(x), {}};
  const std::string sy{std::istreambuf_iterator<char>(y), {}};
  CHECK(sx == sy);

  CHECK_THROWS_AS(load_run_config(dir / "missing.json"), ConfigError);
  std::ofstream(dir / "broken.json") << "{\"seed\": ";
  CHECK_THROWS_AS(load_run_config(dir / "broken.json"), ConfigError);
  std::ofstream(dir / "range.json") << R"({"pretrain": {"momentum": 1.5}})";
  CHECK_THROWS_AS(load_run_config(dir / "range.json"), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("output root override") {
  const char* old = std::getenv("TGD_OUTPUT_ROOT");
  const std::string saved = old ? old : "";

  ::unsetenv("TGD_OUTPUT_ROOT");
  CHECK(resolve_output("runs/a") == fs::path("runs/a"));
  ::setenv("TGD_OUTPUT_ROOT", "/tmp/root", 1);
  CHECK(resolve_output("runs/a") == fs::path("/tmp/root/runs/a"));
  CHECK(resolve_output("/abs/x") == fs::path("/abs/x"));
  ::setenv("TGD_OUTPUT_ROOT", "", 1);
  CHECK(resolve_output("runs/a") == fs::path("runs/a"));

  if (old) ::setenv("TGD_OUTPUT_ROOT", saved.c_str(), 1);
  else ::unsetenv("TGD_OUTPUT_ROOT");
}
