#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace tgd {

struct ImageShape {
  int channels = 3;
  int height = 64;
  int width = 64;
  std::size_t size() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// m images (m x c x h x w, row-major) with binary labels (0 = real,
/// 1 = generated). Labels are stored as reals: label-mixing ablations produce
/// fractional targets.
struct LabeledBatch {
  ImageShape shape;
  std::vector<float> pixels;
  std::vector<double> labels;

  std::size_t count() const { return labels.size(); }
  std::span<float> image(std::size_t i) {
    return std::span<float>(pixels).subspan(i * shape.size(), shape.size());
  }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * shape.size(), shape.size());
  }

  /// Throws ContractViolation unless m >= 1, pixel count matches, labels are
  /// in [0,1] and (when `require_unit_range`) pixels are in [0,1].
  void validate(bool require_unit_range = true) const;

  friend bool operator==(const LabeledBatch&, const LabeledBatch&) = default;
};

}  // namespace tgd
