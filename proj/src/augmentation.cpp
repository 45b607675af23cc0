#include "tgd/augmentation.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "filters.hpp"
#include "jpeg_codec.hpp"
#include "tgd/errors.hpp"

namespace tgd {

void AugmentationConfig::validate() const {
  for (double p : {p_cutmix, p_jpeg, p_blur, p_flip}) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw ConfigError("augmentation probabilities must lie in [0,1], got " +
                        std::to_string(p));
    }
  }
  if (jpeg_quality_min < 1 || jpeg_quality_max > 100 ||
      jpeg_quality_min > jpeg_quality_max) {
    throw ConfigError("jpeg quality range must be a nonempty subrange of [1,100]");
  }
  if (!(blur_sigma_min >= 0.0) || !(blur_sigma_max >= blur_sigma_min)) {
    throw ConfigError("blur sigma range must be nonempty and nonnegative");
  }
}

namespace {

AugmentationConfig with_rate(double p) {
  AugmentationConfig c;
  c.p_cutmix = c.p_jpeg = c.p_blur = c.p_flip = p;
  return c;
}

}  // namespace

AugmentationConfig AugmentationConfig::pretraining() { return with_rate(0.2); }
AugmentationConfig AugmentationConfig::transfer() { return with_rate(0.5); }
AugmentationConfig AugmentationConfig::disabled() { return with_rate(0.0); }

CutBox cut_box_at(int width, int height, double lambda_mix, double center_x,
                  double center_y) {
  if (width < 1 || height < 1) throw ContractViolation("cut box needs a nonempty image");
  if (!(lambda_mix >= 0.0 && lambda_mix <= 1.0)) {
    throw ContractViolation("lambda_mix must lie in [0,1]");
  }
  const double frac = std::sqrt(1.0 - lambda_mix);
  auto span = [](double center, double side, int limit, int& lo, int& hi) {
    const double a = std::clamp(center - side / 2.0, 0.0, double(limit));
    const double b = std::clamp(center + side / 2.0, 0.0, double(limit));
    lo = static_cast<int>(std::ceil(a - 1e-9));
    hi = std::max(lo, static_cast<int>(std::floor(b + 1e-9)));
  };
  CutBox box;
  span(center_x, frac * width, width, box.x1, box.x2);
  span(center_y, frac * height, height, box.y1, box.y2);
  return box;
}

CutBox sample_cut_box(int width, int height, double lambda_mix, Rng& rng) {
  const double bx = rng.uniform(0.0, width);
  const double by = rng.uniform(0.0, height);
  return cut_box_at(width, height, lambda_mix, bx, by);
}

namespace {

void paste(const LabeledBatch& src, std::size_t from, LabeledBatch& dst, std::size_t to,
           const CutBox& box) {
  const ImageShape s = src.shape;
  const auto in = src.image(from);
  auto out = dst.image(to);
  for (int c = 0; c < s.channels; ++c) {
    for (int y = box.y1; y < box.y2; ++y) {
      const std::size_t row = (static_cast<std::size_t>(c) * s.height + y) * s.width;
      std::copy(in.begin() + row + box.x1, in.begin() + row + box.x2,
                out.begin() + row + box.x1);
    }
  }
}

void check_donors(const LabeledBatch& batch, std::span<const std::size_t> donors,
                  const CutBox& box) {
  if (donors.size() != batch.count()) throw ContractViolation("one donor per image required");
  for (std::size_t d : donors) {
    if (d >= batch.count()) throw ContractViolation("donor index out of range");
  }
  if (box.x1 < 0 || box.x2 < box.x1 || box.x2 > batch.shape.width || box.y1 < 0 ||
      box.y2 < box.y1 || box.y2 > batch.shape.height) {
    throw ContractViolation("cut box outside the image");
  }
}

enum class Draw { skipped, not_fired, fired };

// Shared RNG protocol: permutation, trigger, lambda, box centre.
Draw draw_cutmix(const LabeledBatch& batch, double p, Rng& rng, CutmixResult& result) {
  result.batch = batch;
  const std::size_t m = batch.count();
  if (m < 2) {
    result.donors.resize(m);
    for (std::size_t i = 0; i < m; ++i) result.donors[i] = i;
    return Draw::skipped;
  }
  result.donors = rng.permutation(m);
  if (!rng.bernoulli(p)) return Draw::not_fired;
  const double lambda_mix = rng.uniform();
  result.box = sample_cut_box(batch.shape.width, batch.shape.height, lambda_mix, rng);
  result.fired = true;
  return Draw::fired;
}

}  // namespace

LabeledBatch paste_intra_class(const LabeledBatch& batch,
                               std::span<const std::size_t> donors, const CutBox& box) {
  check_donors(batch, donors, box);
  LabeledBatch out = batch;
  for (std::size_t i = 0; i < batch.count(); ++i) {
    if (batch.labels[donors[i]] == batch.labels[i]) paste(batch, donors[i], out, i, box);
  }
  return out;
}

CutmixResult intra_class_cutmix(const LabeledBatch& batch, double cutmix_prob, Rng& rng) {
  CutmixResult result;
  if (draw_cutmix(batch, cutmix_prob, rng, result) != Draw::fired) return result;
  result.batch = paste_intra_class(batch, result.donors, result.box);
  if (result.box.area() > 0) {
    for (std::size_t i = 0; i < batch.count(); ++i) {
      const std::size_t d = result.donors[i];
      if (d != i && batch.labels[d] == batch.labels[i]) ++result.mixed;
    }
  }
  return result;
}

CutmixResult inter_class_cutmix(const LabeledBatch& batch, double cutmix_prob, Rng& rng) {
  CutmixResult result;
  if (draw_cutmix(batch, cutmix_prob, rng, result) != Draw::fired) return result;
  const double area = static_cast<double>(result.box.area()) /
                      (static_cast<double>(batch.shape.width) * batch.shape.height);
  for (std::size_t i = 0; i < batch.count(); ++i) {
    const std::size_t d = result.donors[i];
    if (d == i || result.box.area() == 0) continue;
    paste(batch, d, result.batch, i, result.box);
    result.batch.labels[i] = (1.0 - area) * batch.labels[i] + area * batch.labels[d];
    ++result.mixed;
  }
  return result;
}

std::vector<float> jpeg_round_trip(std::span<const float> image, ImageShape shape,
                                   int quality) {
  if (quality < 1 || quality > 100) {
    throw ContractViolation("jpeg quality must lie in [1,100], got " +
                            std::to_string(quality));
  }
  if (image.size() != shape.size()) throw ContractViolation("jpeg_round_trip: shape mismatch");
  const std::size_t plane = static_cast<std::size_t>(shape.height) * shape.width;
  auto to_byte = [](float v) {
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
  };
  std::vector<float> out(image.size());
  auto code = [&](int first, int components) {
    DecodedImage raw;
    raw.width = shape.width;
    raw.height = shape.height;
    raw.channels = components;
    raw.samples.resize(plane * components);
    for (std::size_t p = 0; p < plane; ++p) {
      for (int c = 0; c < components; ++c) {
        raw.samples[p * components + c] = to_byte(image[(first + c) * plane + p]);
      }
    }
    const auto bytes = detail::encode_jpeg(raw, quality);
    const DecodedImage dec = detail::decode_jpeg(bytes.data(), bytes.size());
    for (std::size_t p = 0; p < plane; ++p) {
      for (int c = 0; c < components; ++c) {
        out[(first + c) * plane + p] = dec.samples[p * components + c] / 255.0f;
      }
    }
  };
  if (shape.channels == 3) {
    code(0, 3);
  } else {
    for (int c = 0; c < shape.channels; ++c) code(c, 1);
  }
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma >= 0.0)) throw ContractViolation("blur sigma must be nonnegative");
  if (sigma == 0.0) return {1.0};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

namespace {

// Mirror about the edge samples without repeating them: -1 -> 1, n -> n - 2.
int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

namespace detail {

void convolve_plane(std::vector<double>& plane, int height, int width,
                    const std::vector<double>& taps) {
  const int r = static_cast<int>(taps.size() / 2);
  std::vector<double> tmp(plane.size());
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double acc = 0.0;
      for (int t = -r; t <= r; ++t) acc += taps[t + r] * plane[y * width + reflect(x + t, width)];
      tmp[y * width + x] = acc;
    }
  }
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double acc = 0.0;
      for (int t = -r; t <= r; ++t) acc += taps[t + r] * tmp[reflect(y + t, height) * width + x];
      plane[y * width + x] = acc;
    }
  }
}

}  // namespace detail

std::vector<float> gaussian_blur(std::span<const float> image, ImageShape shape,
                                 double sigma) {
  if (image.size() != shape.size()) throw ContractViolation("gaussian_blur: shape mismatch");
  const auto k = gaussian_kernel(sigma);
  if (k.size() == 1) return std::vector<float>(image.begin(), image.end());
  const std::size_t plane = static_cast<std::size_t>(shape.height) * shape.width;
  std::vector<float> out(image.size());
  std::vector<double> buf(plane);
  for (int c = 0; c < shape.channels; ++c) {
    const float* src = image.data() + c * plane;
    std::copy(src, src + plane, buf.begin());
    detail::convolve_plane(buf, shape.height, shape.width, k);
    for (std::size_t i = 0; i < plane; ++i) {
      out[c * plane + i] = static_cast<float>(std::clamp(buf[i], 0.0, 1.0));
    }
  }
  return out;
}

std::vector<float> horizontal_flip(std::span<const float> image, ImageShape shape) {
  if (image.size() != shape.size()) throw ContractViolation("horizontal_flip: shape mismatch");
  std::vector<float> out(image.begin(), image.end());
  const std::size_t rows = static_cast<std::size_t>(shape.channels) * shape.height;
  for (std::size_t row = 0; row < rows; ++row) {
    auto first = out.begin() + row * shape.width;
    std::reverse(first, first + shape.width);
  }
  return out;
}

PipelineResult apply_pipeline(const LabeledBatch& batch, const AugmentationConfig& config,
                              std::uint64_t step,
                              std::span<const std::uint64_t> sample_ids) {
  config.validate();
  if (sample_ids.size() != batch.count()) {
    throw ContractViolation("apply_pipeline: one sample id per image required");
  }
  PipelineResult result;
  result.batch = batch;
  const ImageShape shape = batch.shape;
  for (std::size_t i = 0; i < batch.count(); ++i) {
    Rng rng(derive_seed(config.rng_seed, {stream::kAugmentSample, step, sample_ids[i]}));
    // Every value is drawn whatever the gates say, so one transform's rate
    // never shifts another's randomness.
    const bool flip = rng.bernoulli(config.p_flip);
    const bool jpeg = rng.bernoulli(config.p_jpeg);
    const int quality =
        static_cast<int>(rng.uniform_int(config.jpeg_quality_min, config.jpeg_quality_max));
    const bool blur = rng.bernoulli(config.p_blur);
    const double sigma = rng.uniform(config.blur_sigma_min, config.blur_sigma_max);

    auto img = result.batch.image(i);
    if (flip) {
      const auto v = horizontal_flip(img, shape);
      std::copy(v.begin(), v.end(), img.begin());
      ++result.stats.flipped;
    }
    if (jpeg) {
      const auto v = jpeg_round_trip(img, shape, quality);
      std::copy(v.begin(), v.end(), img.begin());
      ++result.stats.jpeg;
    }
    if (blur) {
      const auto v = gaussian_blur(img, shape, sigma);
      std::copy(v.begin(), v.end(), img.begin());
      ++result.stats.blurred;
    }
  }
  if (batch.count() < 2) {
    result.stats.cutmix_skipped = true;
    return result;
  }
  Rng rng(derive_seed(config.rng_seed, {stream::kAugmentBatch, step}));
  CutmixResult mixed = config.cutmix == CutmixKind::intra_class
                           ? intra_class_cutmix(result.batch, config.p_cutmix, rng)
                           : inter_class_cutmix(result.batch, config.p_cutmix, rng);
  result.batch = std::move(mixed.batch);
  result.stats.cutmix_fired = mixed.fired;
  result.stats.cutmix_mixed = mixed.mixed;
  return result;
}

}  // namespace tgd
