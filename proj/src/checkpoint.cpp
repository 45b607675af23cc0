#include "tgd/checkpoint.hpp"

#include <algorithm>

#include <json.hpp>

#include "raw_io.hpp"
#include "tgd/config.hpp"
#include "tgd/digest.hpp"

namespace tgd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kFormat = "tgd-checkpoint/1";

fs::path tensor_file(const std::string& name) {
  return fs::path("tensors") / (name + ".f32");
}

struct ManifestEntry {
  std::string name;
  Shape shape;
  Role role;
  std::string file;
};

struct Manifest {
  std::string spec_hash;
  ModelSpec spec;
  Provenance provenance;
  std::vector<ManifestEntry> entries;
};

Manifest read_manifest(const fs::path& dir) {
  const fs::path file = dir / "manifest";
  if (!fs::exists(file)) throw CorruptManifest("missing manifest in " + dir.string());
  Manifest m;
  try {
    const json j = json::parse(detail::read_text_file(file));
    if (j.at("format").get<std::string>() != kFormat) {
      throw CorruptManifest("unknown checkpoint format in " + file.string());
    }
    if (j.at("dtype").get<std::string>() != "float32" ||
        j.at("byte_order").get<std::string>() != "little") {
      throw CorruptManifest("unsupported dtype or byte order in " + file.string());
    }
    m.spec_hash = j.at("spec_hash").get<std::string>();
    m.spec = model_spec_from_json(j.at("spec"));
    const json& p = j.at("provenance");
    m.provenance.stage = p.at("stage").get<std::string>();
    m.provenance.dataset_id = p.at("dataset_id").get<std::string>();
    m.provenance.seed = p.at("seed").get<std::uint64_t>();
    m.provenance.config_digest = p.at("config_digest").get<std::string>();
    for (const json& e : j.at("parameters")) {
      ManifestEntry entry;
      entry.name = e.at("name").get<std::string>();
      entry.shape = e.at("shape").get<Shape>();
      entry.role = parse_role(e.at("role").get<std::string>());
      entry.file = e.at("file").get<std::string>();
      m.entries.push_back(std::move(entry));
    }
  } catch (const CorruptManifest&) {
    throw;
  } catch (const std::exception& e) {
    throw CorruptManifest("unreadable manifest " + file.string() + ": " + e.what());
  }
  return m;
}

Checkpoint load_with(const fs::path& dir, const Manifest& m, const ModelSpec& spec) {
  const Network network(spec);
  std::map<std::string, const ManifestEntry*> by_name;
  for (const auto& e : m.entries) {
    if (!by_name.emplace(e.name, &e).second) {
      throw CorruptManifest("duplicate parameter '" + e.name + "' in manifest");
    }
  }
  if (by_name.size() != network.layout().size()) {
    for (const auto& e : m.entries) {
      bool known = false;
      for (const auto& info : network.layout()) known |= info.name == e.name;
      if (!known) throw CorruptManifest("unexpected parameter '" + e.name + "' in manifest");
    }
  }

  Checkpoint out{spec, {}, m.provenance};
  for (const auto& info : network.layout()) {
    auto it = by_name.find(info.name);
    if (it == by_name.end()) {
      throw CorruptManifest("manifest lacks parameter '" + info.name + "'");
    }
    const ManifestEntry& e = *it->second;
    if (e.shape != info.shape) {
      throw CheckpointShapeMismatch(info.name, "manifest shape " + shape_to_string(e.shape) +
                                                   ", model expects " +
                                                   shape_to_string(info.shape));
    }
    if (e.role != info.role) {
      throw CorruptManifest("parameter '" + info.name + "' has role " +
                            std::string(role_name(e.role)) + ", model declares " +
                            std::string(role_name(info.role)));
    }
    const fs::path rel(e.file);
    if (rel.is_absolute() || std::find(rel.begin(), rel.end(), "..") != rel.end()) {
      throw CorruptManifest("payload path for '" + info.name + "' leaves the checkpoint");
    }
    const fs::path file = dir / rel;
    if (!fs::exists(file)) {
      throw CorruptManifest("payload for '" + info.name + "' missing: " + file.string());
    }
    std::vector<float> values;
    if (!detail::read_f32_file(file, static_cast<std::size_t>(shape_numel(info.shape)),
                               values)) {
      throw CheckpointShapeMismatch(info.name, "payload size does not match shape " +
                                                   shape_to_string(info.shape));
    }
    out.params.add(info.name, Tensor(info.shape, std::move(values)), info.role);
  }
  return out;
}

}  // namespace

void save_checkpoint(const ParameterSet& params, const ModelSpec& spec,
                     const Provenance& provenance, const fs::path& dir) {
  const Network network(spec);
  network.check_params(params);
  fs::create_directories(dir / "tensors");

  json entries = json::array();
  for (const auto& [name, entry] : params) {
    const fs::path rel = tensor_file(name);
    detail::write_f32_file(dir / rel, entry.tensor.values());
    entries.push_back({{"name", name},
                       {"shape", entry.tensor.shape()},
                       {"role", role_name(entry.role)},
                       {"file", rel.generic_string()}});
  }
  json manifest = {
      {"format", kFormat},
      {"dtype", "float32"},
      {"byte_order", "little"},
      {"spec_hash", architecture_hash(spec)},
      {"spec", to_json_value(spec)},
      {"provenance",
       {{"stage", provenance.stage},
        {"dataset_id", provenance.dataset_id},
        {"seed", provenance.seed},
        {"config_digest", provenance.config_digest}}},
      {"parameters", entries},
  };
  detail::write_text_file(dir / "manifest", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& dir, const ModelSpec& spec) {
  const Manifest m = read_manifest(dir);
  const std::string expected = architecture_hash(spec);
  if (m.spec_hash != expected) {
    throw SpecHashMismatch("checkpoint " + dir.string() + " was built for architecture " +
                           m.spec_hash.substr(0, 12) + ", expected " +
                           expected.substr(0, 12));
  }
  Checkpoint ckpt = load_with(dir, m, spec);
  return ckpt;
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const Manifest m = read_manifest(dir);
  try {
    m.spec.validate();
  } catch (const ConfigError& e) {
    throw CorruptManifest("invalid model spec in manifest: " + std::string(e.what()));
  }
  if (architecture_hash(m.spec) != m.spec_hash) {
    throw SpecHashMismatch("manifest spec does not match its recorded hash in " +
                           dir.string());
  }
  return load_with(dir, m, m.spec);
}

std::string checkpoint_digest(const fs::path& dir) {
  const Manifest m = read_manifest(dir);
  std::vector<const ManifestEntry*> sorted;
  for (const auto& e : m.entries) sorted.push_back(&e);
  std::sort(sorted.begin(), sorted.end(),
            [](auto* a, auto* b) { return a->name < b->name; });
  Sha256 h;
  h.update(detail::read_text_file(dir / "manifest"));
  for (const auto* e : sorted) {
    h.update(e->name);
    h.update(detail::read_text_file(dir / e->file));
  }
  return h.hex();
}

std::string parameter_digest(const ParameterSet& params) {
  Sha256 h;
  for (const auto& [name, entry] : params) {
    h.update(name);
    h.update(shape_to_string(entry.tensor.shape()));
    h.update(role_name(entry.role));
    h.update(entry.tensor.data(), entry.tensor.size() * sizeof(float));
  }
  return h.hex();
}

}  // namespace tgd
