#pragma once

// Data-side noise injection: random horizontal flip, JPEG re-compression and
// Gaussian blur per sample, then intra-class Cutmix over the batch. Every
// transform is gated by "draw rho ~ U(0,1), apply iff rho < p" so configured
// numbers are application probabilities. Labels are never modified except by
// the label-mixing Cutmix kept for ablations.

#include <cstdint>
#include <span>
#include <vector>

#include "tgd/batch.hpp"
#include "tgd/rng.hpp"

namespace tgd {

enum class CutmixKind { intra_class, inter_class };

struct AugmentationConfig {
  double p_cutmix = 0.5;
  double p_jpeg = 0.5;
  double p_blur = 0.5;
  double p_flip = 0.5;
  int jpeg_quality_min = 30;
  int jpeg_quality_max = 100;
  double blur_sigma_min = 0.5;
  double blur_sigma_max = 3.0;
  CutmixKind cutmix = CutmixKind::intra_class;
  std::uint64_t rng_seed = 0;

  void validate() const;

  /// Rates used while pre-training the teacher (0.2).
  static AugmentationConfig pretraining();
  /// Rates used during transfer (0.5).
  static AugmentationConfig transfer();
  static AugmentationConfig disabled();

  friend bool operator==(const AugmentationConfig&,
                         const AugmentationConfig&) = default;
};

struct CutBox {
  int x1 = 0, x2 = 0, y1 = 0, y2 = 0;
  int area() const { return (x2 - x1) * (y2 - y1); }
  friend bool operator==(const CutBox&, const CutBox&) = default;
};

/// Box of side fractions sqrt(1 - lambda_mix) of width and height centred at
/// (center_x, center_y), clipped to the image. Corners are rounded inward so
/// the area never exceeds (1 - lambda_mix) * w * h.
CutBox cut_box_at(int width, int height, double lambda_mix, double center_x,
                  double center_y);

/// Centre drawn uniformly over the image, then cut_box_at.
CutBox sample_cut_box(int width, int height, double lambda_mix, Rng& rng);

/// Deterministic core of intra-class Cutmix: position i receives
/// donors[i]'s pixels inside `box` iff both carry the same label.
LabeledBatch paste_intra_class(const LabeledBatch& batch,
                               std::span<const std::size_t> donors,
                               const CutBox& box);

struct CutmixResult {
  LabeledBatch batch;
  bool fired = false;
  CutBox box;
  std::vector<std::size_t> donors;  // donors[i]: batch index pasted into i
  std::size_t mixed = 0;            // positions whose pixels were replaced
};

/// Shuffles the batch to form donors; when the trigger fires, every position
/// whose donor has the same label receives the donor's pixels inside one
/// shared CutBox. Labels are unchanged. Batches with fewer than two images
/// are returned as is (fired = false).
CutmixResult intra_class_cutmix(const LabeledBatch& batch, double cutmix_prob,
                                Rng& rng);

/// Ablation only: classic Cutmix pasting across classes with labels mixed in
/// proportion to the pasted area.
CutmixResult inter_class_cutmix(const LabeledBatch& batch, double cutmix_prob,
                                Rng& rng);

/// Encodes to baseline JPEG at `quality` (4:2:0 chroma below 95, 4:4:4 at or
/// above) and decodes back. Three-channel images are coded as RGB, everything
/// else channel by channel as grayscale.
std::vector<float> jpeg_round_trip(std::span<const float> image, ImageShape shape,
                                   int quality);

/// Normalized 1-D Gaussian taps of radius ceil(3 sigma); {1} for sigma = 0.
std::vector<double> gaussian_kernel(double sigma);

/// Separable Gaussian blur with reflect (edge-excluded) padding.
std::vector<float> gaussian_blur(std::span<const float> image, ImageShape shape,
                                 double sigma);

std::vector<float> horizontal_flip(std::span<const float> image, ImageShape shape);

struct PipelineStats {
  std::size_t flipped = 0;
  std::size_t jpeg = 0;
  std::size_t blurred = 0;
  bool cutmix_fired = false;
  bool cutmix_skipped = false;  // batch too small to mix
  std::size_t cutmix_mixed = 0;
};

struct PipelineResult {
  LabeledBatch batch;
  PipelineStats stats;
};

/// flip -> JPEG -> blur per sample (RNG substream from rng_seed, step and the
/// sample id, so results do not depend on batch composition or execution
/// order), then batch-level Cutmix (substream from rng_seed and step).
PipelineResult apply_pipeline(const LabeledBatch& batch,
                              const AugmentationConfig& config,
                              std::uint64_t step,
                              std::span<const std::uint64_t> sample_ids);

}  // namespace tgd
