#pragma once

// Dataset provisioning: a seeded synthetic "real vs. artifact" generator, a
// labeled image-folder loader, stratified split policies and an on-disk
// format (manifest.json + images.f32, raw little-endian float32).

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tgd/batch.hpp"

namespace tgd {

enum class ArtifactKind { checkerboard_upsample, blur_residual };

std::string_view artifact_name(ArtifactKind kind);
ArtifactKind parse_artifact(std::string_view name);

struct SyntheticSpec {
  std::size_t n_per_class = 1000;
  ImageShape shape;
  ArtifactKind artifact = ArtifactKind::checkerboard_upsample;
  double artifact_strength = 1.0;
  std::uint64_t seed = 0;

  /// Throws ConfigError unless n_per_class >= 1, the image is at least 4x4
  /// with even sides and strength is in [0, 1].
  void validate() const;

  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

enum class Split : std::uint8_t { train, val, test, transfer, unused };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct Dataset {
  ImageShape shape;
  std::vector<std::string> ids;
  std::vector<int> labels;           // 0 = real, 1 = generated
  std::vector<float> pixels;         // size() x shape.size(), values in [0,1]
  std::string source;                // "synthetic:<spec digest>" or folder path
  std::vector<std::string> file_hashes;  // per sample, folder mode only
  std::string resize_policy;         // folder mode only

  std::size_t size() const { return labels.size(); }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * shape.size(), shape.size());
  }
  /// Copies the given samples into a batch (labels as 0.0 / 1.0).
  LabeledBatch gather(std::span<const std::size_t> indices) const;
  /// SHA-256 over shape, ids, labels, pixels and file hashes.
  std::string digest() const;
};

struct SplitFractions {
  double train = 1.0;
  double val = 0.0;
  double test = 0.0;
  /// Samples moved from the training pool into the transfer split
  /// (min(transfer_size, available)).
  std::size_t transfer_size = 2000;
  friend bool operator==(const SplitFractions&, const SplitFractions&) = default;
};

struct DatasetManifest {
  std::string dataset_digest;
  std::string source;
  std::uint64_t seed = 0;
  std::vector<Split> assignment;  // per sample

  std::vector<std::size_t> indices(Split split) const;
  std::string digest() const;
};

/// Stratified by label. Per class, floor(n_c * fraction) samples go to val and
/// test; train takes the rest when the fractions sum to 1, otherwise
/// floor(n_c * train) with the remainder marked unused. The transfer subset is
/// then drawn from the training pool, stratified by largest remainder.
DatasetManifest split_dataset(const Dataset& dataset, const SplitFractions& fractions,
                              std::uint64_t seed);

Dataset generate_synthetic(const SyntheticSpec& spec);
std::string synthetic_spec_digest(const SyntheticSpec& spec);

/// The smooth "real" field used by the generator, exposed for tests.
std::vector<float> synthetic_real_field(ImageShape shape, std::uint64_t seed);
/// Applies an artifact at `strength` to a real field.
std::vector<float> inject_artifact(std::span<const float> field, ImageShape shape,
                                   ArtifactKind kind, double strength,
                                   std::uint64_t seed);

/// Loads `<path>/<class>/**` for every class folder named in `label_map`
/// (folder name -> label). PNG and JPEG files are decoded, converted to the
/// target channel count, resized with bilinear sampling and scaled to [0,1].
/// Samples are ordered by sorted relative path. Unreadable files are skipped
/// with a message appended to `warnings`; an empty class is a ConfigError.
Dataset load_image_folder(const std::filesystem::path& path,
                          const std::map<std::string, int>& label_map,
                          ImageShape shape, std::vector<std::string>* warnings);

void save_dataset(const Dataset& dataset, const DatasetManifest& manifest,
                  const std::filesystem::path& dir);

struct StoredDataset {
  Dataset dataset;
  DatasetManifest manifest;
};

StoredDataset load_dataset(const std::filesystem::path& dir);

/// Decodes a PNG or JPEG file into interleaved 8-bit samples. Throws IoError.
struct DecodedImage {
  int width = 0, height = 0, channels = 0;
  std::vector<unsigned char> samples;
};
DecodedImage decode_image_file(const std::filesystem::path& file);
void write_png(const std::filesystem::path& file, const DecodedImage& image);

/// Converts to `shape.channels` channels (grayscale <-> RGB, alpha dropped),
/// bilinear resize to shape.height x shape.width, planar float in [0,1].
std::vector<float> to_planar(const DecodedImage& image, ImageShape shape);

}  // namespace tgd
