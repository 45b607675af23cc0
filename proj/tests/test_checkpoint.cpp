#include <doctest.h>

#include <fstream>
#include <iterator>
#include <json.hpp>

#include "oracles.hpp"
#include "tgd/checkpoint.hpp"

using namespace tgd;
namespace fs = std::filesystem;

namespace {

ModelSpec small_spec() {
  ModelSpec s;
  s.height = s.width = 16;
  s.stage_widths = {8, 16};
  s.stage_blocks = {1, 1};
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary | std::ios::trunc) << s;
}

struct Saved {
  fs::path dir;
  ModelSpec spec;
  ParameterSet params;
  Provenance prov{"pretrain", "abc123", 42, "cfg0"};
};

Saved save_one(const std::string& tag) {
  Saved s;
  s.dir = oracle::scratch_dir(tag) / "ckpt";
  s.spec = small_spec();
  s.params = Network(s.spec).init_params(7);
  // values that do not survive a decimal round trip
  s.params.at("head.fc.bias")[0] = 0.1f + 1e-8f;
  save_checkpoint(s.params, s.spec, s.prov, s.dir);
  return s;
}

}  // namespace

TEST_CASE("save then load is bitwise lossless") {
  const Saved s = save_one("rt");
  const Checkpoint c = load_checkpoint(s.dir, s.spec);
  CHECK(c.params == s.params);
  CHECK(c.provenance == s.prov);
  CHECK(parameter_digest(c.params) == parameter_digest(s.params));

  const Checkpoint d = load_checkpoint(s.dir);
  CHECK(d.params == s.params);
  CHECK(d.spec == s.spec);

  // save(load(x)) reproduces the same bytes
  const fs::path again = s.dir.parent_path() / "again";
  save_checkpoint(c.params, c.spec, c.provenance, again);
  CHECK(checkpoint_digest(again) == checkpoint_digest(s.dir));
  fs::remove_all(s.dir.parent_path());
}

TEST_CASE("tampered manifest shape names the parameter") {
  const Saved s = save_one("shape");
  auto j = nlohmann::json::parse(slurp(s.dir / "manifest"));
  std::string victim;
  for (auto& e : j["parameters"]) {
    if (e["name"] == "stage1.block0.conv1.weight") {
      e["shape"] = {8, 73};
      victim = e["name"];
    }
  }
  REQUIRE(victim == "stage1.block0.conv1.weight");
  spit(s.dir / "manifest", j.dump());
  try {
    load_checkpoint(s.dir, s.spec);
    FAIL("expected CheckpointShapeMismatch");
  } catch (const CheckpointShapeMismatch& e) {
    CHECK(e.parameter() == victim);
    CHECK(std::string(e.what()).find(victim) != std::string::npos);
  }
  fs::remove_all(s.dir.parent_path());
}

TEST_CASE("truncated payload is a shape mismatch") {
  const Saved s = save_one("trunc");
  const fs::path f = s.dir / "tensors" / "head.fc.weight.f32";
  std::string bytes = slurp(f);
  bytes.resize(bytes.size() - 4);
  spit(f, bytes);
  CHECK_THROWS_AS(load_checkpoint(s.dir, s.spec), CheckpointShapeMismatch);
  fs::remove_all(s.dir.parent_path());
}

TEST_CASE("corrupt or incomplete manifests") {
  {
    const Saved s = save_one("garbage");
    spit(s.dir / "manifest", "{not json");
    CHECK_THROWS_AS(load_checkpoint(s.dir, s.spec), CorruptManifest);
    fs::remove_all(s.dir.parent_path());
  }
  {
    const Saved s = save_one("missing");
    fs::remove(s.dir / "tensors" / "stem.conv.weight.f32");
    CHECK_THROWS_AS(load_checkpoint(s.dir, s.spec), CorruptManifest);
    fs::remove_all(s.dir.parent_path());
  }
  {
    const Saved s = save_one("dropped");
    auto j = nlohmann::json::parse(slurp(s.dir / "manifest"));
    j["parameters"].erase(0);
    spit(s.dir / "manifest", j.dump());
    CHECK_THROWS_AS(load_checkpoint(s.dir, s.spec), CorruptManifest);
    fs::remove_all(s.dir.parent_path());
  }
  {
    const Saved s = save_one("escape");
    auto j = nlohmann::json::parse(slurp(s.dir / "manifest"));
    j["parameters"][0]["file"] = "../../etc/passwd";
    spit(s.dir / "manifest", j.dump());
    CHECK_THROWS_AS(load_checkpoint(s.dir, s.spec), CorruptManifest);
    fs::remove_all(s.dir.parent_path());
  }
  CHECK_THROWS_AS(load_checkpoint(oracle::scratch_dir("empty")), CorruptManifest);
}

TEST_CASE("loading into a different architecture") {
  const Saved s = save_one("arch");
  ModelSpec other = s.spec;
  other.stem_width = 16;
  CHECK_THROWS_AS(load_checkpoint(s.dir, other), SpecHashMismatch);
  ModelSpec noisy = s.spec;
  noisy.noise = {0.0, 0.0};
  CHECK(load_checkpoint(s.dir, noisy).params == s.params);
  fs::remove_all(s.dir.parent_path());
}

TEST_CASE("checkpoint digest tracks every byte") {
  const Saved s = save_one("digest");
  const std::string d0 = checkpoint_digest(s.dir);
  CHECK(d0 == checkpoint_digest(s.dir));
  const fs::path f = s.dir / "tensors" / "stem.gn.shift.f32";
  std::string bytes = slurp(f);
  bytes[0] ^= 1;
  spit(f, bytes);
  CHECK(checkpoint_digest(s.dir) != d0);
  fs::remove_all(s.dir.parent_path());
}

TEST_CASE("save rejects parameters that do not fit the spec") {
  const ModelSpec spec = small_spec();
  ParameterSet p = Network(spec).init_params(1);
  ModelSpec other = spec;
  other.stage_widths = {8, 32};
  const fs::path dir = oracle::scratch_dir("reject");
  CHECK_THROWS_AS(save_checkpoint(p, other, {}, dir / "c"), AlignmentError);
  fs::remove_all(dir);
}
