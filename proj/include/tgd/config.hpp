#pragma once

// Run configuration: one JSON file with sections model, pretrain, transfer,
// augmentation {pretrain, transfer}, data, output_dir and seed. Missing keys
// keep their defaults; unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "tgd/augmentation.hpp"
#include "tgd/data.hpp"
#include "tgd/model.hpp"
#include "tgd/self_training.hpp"

namespace tgd {

struct DataConfig {
  std::string kind = "synthetic";  // "synthetic" or "folder"
  SyntheticSpec synthetic;
  std::string folder;
  std::map<std::string, int> label_map{{"real", 0}, {"fake", 1}};
  SplitFractions split;
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct RunConfig {
  ModelSpec model;
  PretrainConfig pretrain;
  TransferConfig transfer;
  AugmentationConfig augment_pretrain = AugmentationConfig::pretraining();
  AugmentationConfig augment_transfer = AugmentationConfig::transfer();
  DataConfig data;
  std::string output_dir;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

nlohmann::json to_json_value(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

nlohmann::json to_json_value(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Throws ConfigError when the file is missing or malformed.
RunConfig load_run_config(const std::filesystem::path& file);

/// Sorted-key compact JSON of the full config.
std::string canonical_config(const RunConfig& config);

/// SHA-256 of the canonical config with output_dir cleared, so relocating a
/// run does not change its provenance.
std::string config_digest(const RunConfig& config);

/// Writes `config.json` (the resolved config, pretty printed) into `dir`.
std::filesystem::path write_frozen_config(const RunConfig& config,
                                          const std::filesystem::path& dir);

/// Directory for outputs: `out` if absolute or TGD_OUTPUT_ROOT is unset,
/// otherwise TGD_OUTPUT_ROOT / out.
std::filesystem::path resolve_output(const std::filesystem::path& out);

}  // namespace tgd
