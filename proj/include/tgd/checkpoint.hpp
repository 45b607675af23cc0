#pragma once

// Checkpoint container: a directory holding `manifest` (JSON text with the
// parameter names, shapes, roles, dtype, byte order, architecture hash and
// training provenance) plus one raw little-endian float32 row-major file per
// parameter under `tensors/`.

#include <filesystem>
#include <string>

#include "tgd/core_math.hpp"
#include "tgd/model.hpp"

namespace tgd {

struct Provenance {
  std::string stage;           // "init", "pretrain", "transfer:<mode>"
  std::string dataset_id;      // dataset manifest digest
  std::uint64_t seed = 0;
  std::string config_digest;
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct Checkpoint {
  ModelSpec spec;
  ParameterSet params;
  Provenance provenance;
};

void save_checkpoint(const ParameterSet& params, const ModelSpec& spec,
                     const Provenance& provenance,
                     const std::filesystem::path& dir);

/// Loads and validates against `spec`. Errors: CorruptManifest (unparseable or
/// inconsistent manifest, missing payload), SpecHashMismatch (manifest built
/// for another architecture), CheckpointShapeMismatch (a parameter whose
/// recorded shape or payload size disagrees with the model layout).
Checkpoint load_checkpoint(const std::filesystem::path& dir, const ModelSpec& spec);

/// Loads using the spec recorded in the manifest.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// SHA-256 over the manifest and every tensor file, in name order.
std::string checkpoint_digest(const std::filesystem::path& dir);

/// SHA-256 over names, shapes, roles and raw bytes of a parameter set.
std::string parameter_digest(const ParameterSet& params);

}  // namespace tgd
