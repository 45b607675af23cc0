#include "tgd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include <json.hpp>

#include "filters.hpp"
#include "raw_io.hpp"
#include "tgd/augmentation.hpp"
#include "tgd/digest.hpp"
#include "tgd/errors.hpp"
#include "tgd/rng.hpp"

namespace tgd {

namespace fs = std::filesystem;
using nlohmann::json;

void LabeledBatch::validate(bool require_unit_range) const {
  if (labels.empty()) throw ContractViolation("batch must hold at least one image");
  if (pixels.size() != labels.size() * shape.size()) {
    throw ContractViolation("batch pixel count does not match m x c x h x w");
  }
  for (double y : labels) {
    if (!(y >= 0.0 && y <= 1.0)) throw ContractViolation("labels must lie in [0,1]");
  }
  if (require_unit_range) {
    for (float v : pixels) {
      if (!(v >= 0.0f && v <= 1.0f)) throw ContractViolation("pixels must lie in [0,1]");
    }
  }
}

std::string_view artifact_name(ArtifactKind kind) {
  return kind == ArtifactKind::checkerboard_upsample ? "checkerboard_upsample"
                                                     : "blur_residual";
}

ArtifactKind parse_artifact(std::string_view name) {
  if (name == "checkerboard_upsample") return ArtifactKind::checkerboard_upsample;
  if (name == "blur_residual") return ArtifactKind::blur_residual;
  throw ConfigError("unknown artifact kind '" + std::string(name) + "'");
}

void SyntheticSpec::validate() const {
  if (n_per_class < 1) throw ConfigError("n_per_class must be at least 1");
  if (shape.channels < 1 || shape.height < 4 || shape.width < 4 || shape.height % 2 ||
      shape.width % 2) {
    throw ConfigError("synthetic images need >= 4x4 pixels with even sides");
  }
  if (!(artifact_strength >= 0.0 && artifact_strength <= 1.0)) {
    throw ConfigError("artifact_strength must lie in [0,1]");
  }
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::transfer: return "transfer";
    case Split::unused: return "unused";
  }
  return "unused";
}

Split parse_split(std::string_view name) {
  for (Split s : {Split::train, Split::val, Split::test, Split::transfer, Split::unused}) {
    if (split_name(s) == name) return s;
  }
  throw ConfigError("unknown split '" + std::string(name) + "'");
}

LabeledBatch Dataset::gather(std::span<const std::size_t> indices) const {
  LabeledBatch batch;
  batch.shape = shape;
  batch.pixels.resize(indices.size() * shape.size());
  batch.labels.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t k = indices[i];
    if (k >= size()) throw ContractViolation("sample index out of range");
    const auto src = image(k);
    std::copy(src.begin(), src.end(), batch.pixels.begin() + i * shape.size());
    batch.labels[i] = labels[k];
  }
  return batch;
}

std::string Dataset::digest() const {
  Sha256 h;
  const int dims[3] = {shape.channels, shape.height, shape.width};
  h.update(dims, sizeof dims);
  for (const auto& id : ids) {
    h.update(id);
    h.update("\n");
  }
  for (int l : labels) h.update(l ? "1" : "0");
  h.update(pixels.data(), pixels.size() * sizeof(float));
  for (const auto& f : file_hashes) h.update(f);
  return h.hex();
}

std::vector<std::size_t> DatasetManifest::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] == split) out.push_back(i);
  }
  return out;
}

std::string DatasetManifest::digest() const {
  Sha256 h;
  h.update(dataset_digest);
  h.update(source);
  h.update(std::to_string(seed));
  for (Split s : assignment) h.update(split_name(s));
  return h.hex();
}

DatasetManifest split_dataset(const Dataset& dataset, const SplitFractions& fractions,
                              std::uint64_t seed) {
  for (double f : {fractions.train, fractions.val, fractions.test}) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("split fractions must lie in [0,1]");
  }
  const double total = fractions.train + fractions.val + fractions.test;
  if (total > 1.0 + 1e-9) throw ConfigError("split fractions sum to more than 1");
  const bool complete = total >= 1.0 - 1e-9;

  DatasetManifest m;
  m.dataset_digest = dataset.digest();
  m.source = dataset.source;
  m.seed = seed;
  m.assignment.assign(dataset.size(), Split::unused);

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < dataset.size(); ++i) by_class[dataset.labels[i]].push_back(i);

  Rng rng(derive_seed(seed, {stream::kSplit}));
  std::map<int, std::vector<std::size_t>> train_pool;
  auto count = [](std::size_t n, double f) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * f + 1e-9));
  };
  for (auto& [label, members] : by_class) {
    const auto perm = rng.permutation(members.size());
    std::vector<std::size_t> shuffled(members.size());
    for (std::size_t i = 0; i < perm.size(); ++i) shuffled[i] = members[perm[i]];
    const std::size_t n = shuffled.size();
    const std::size_t n_test = count(n, fractions.test);
    const std::size_t n_val = std::min(count(n, fractions.val), n - n_test);
    const std::size_t rest = n - n_test - n_val;
    const std::size_t n_train = complete ? rest : std::min(rest, count(n, fractions.train));
    std::size_t k = 0;
    for (std::size_t i = 0; i < n_test; ++i) m.assignment[shuffled[k++]] = Split::test;
    for (std::size_t i = 0; i < n_val; ++i) m.assignment[shuffled[k++]] = Split::val;
    for (std::size_t i = 0; i < n_train; ++i) {
      m.assignment[shuffled[k]] = Split::train;
      train_pool[label].push_back(shuffled[k++]);
    }
  }

  // Transfer subset: largest-remainder apportionment over classes.
  std::size_t pool_size = 0;
  for (const auto& [label, pool] : train_pool) pool_size += pool.size();
  const std::size_t want = std::min(fractions.transfer_size, pool_size);
  if (want == 0) return m;
  std::vector<std::pair<int, std::size_t>> quota;
  std::vector<std::pair<double, int>> remainders;
  std::size_t assigned = 0;
  for (const auto& [label, pool] : train_pool) {
    const double exact = static_cast<double>(want) * pool.size() / pool_size;
    const auto base = static_cast<std::size_t>(std::floor(exact));
    quota.emplace_back(label, base);
    remainders.emplace_back(exact - base, label);
    assigned += base;
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < want; ++i, ++assigned) {
    for (auto& [label, q] : quota) {
      if (label == remainders[i % remainders.size()].second) ++q;
    }
  }
  for (const auto& [label, q] : quota) {
    const auto& pool = train_pool[label];
    for (std::size_t i = 0; i < q && i < pool.size(); ++i) {
      m.assignment[pool[i]] = Split::transfer;
    }
  }
  return m;
}

namespace {

std::vector<double> standardized(std::vector<double> v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(v.size())) + 1e-12;
  for (double& x : v) x = (x - mean) / sd;
  return v;
}

// Bilinear upsampling of a coarse normal grid (cell size `cell` pixels).
std::vector<double> smooth_noise(Rng& rng, int height, int width, int cell) {
  const int gh = height / cell + 2, gw = width / cell + 2;
  std::vector<double> grid(static_cast<std::size_t>(gh) * gw);
  for (double& g : grid) g = rng.normal();
  std::vector<double> out(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    const double gy = (y + 0.5) / cell + 0.5;
    const int y0 = static_cast<int>(gy);
    const double ty = gy - y0;
    for (int x = 0; x < width; ++x) {
      const double gx = (x + 0.5) / cell + 0.5;
      const int x0 = static_cast<int>(gx);
      const double tx = gx - x0;
      const auto at = [&](int yy, int xx) { return grid[yy * gw + xx]; };
      out[y * width + x] = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                           ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
    }
  }
  detail::convolve_plane(out, height, width, gaussian_kernel(cell / 4.0));
  return out;
}

constexpr int kCell = 8;              // coarse-grid cell of the smooth base
constexpr double kTextureSigma = 1.0; // blur applied to the fine texture
constexpr double kTextureAmplitude = 0.04;
constexpr double kResidualBlur = 1.0;
constexpr double kResidualAmplitude = 0.1;
constexpr int kResidualPeriod = 16;

}  // namespace

std::vector<float> synthetic_real_field(ImageShape shape, std::uint64_t seed) {
  Rng rng(seed);
  const int h = shape.height, w = shape.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const auto luminance = standardized(smooth_noise(rng, h, w, kCell));
  const double contrast = rng.uniform(0.10, 0.20);
  const double brightness = rng.uniform(0.40, 0.60);
  const auto texture_taps = gaussian_kernel(kTextureSigma);
  std::vector<float> out(shape.size());
  for (int c = 0; c < shape.channels; ++c) {
    const auto chroma = standardized(smooth_noise(rng, h, w, kCell));
    std::vector<double> texture(plane);
    for (double& t : texture) t = rng.normal();
    detail::convolve_plane(texture, h, w, texture_taps);
    texture = standardized(std::move(texture));
    for (std::size_t p = 0; p < plane; ++p) {
      const double base = 0.8 * luminance[p] + 0.6 * chroma[p];
      const double v = brightness + contrast * base + kTextureAmplitude * texture[p];
      out[c * plane + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

std::vector<float> inject_artifact(std::span<const float> field, ImageShape shape,
                                   ArtifactKind kind, double strength, std::uint64_t seed) {
  if (field.size() != shape.size()) throw ContractViolation("inject_artifact: shape mismatch");
  const int h = shape.height, w = shape.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<float> out(field.size());
  if (kind == ArtifactKind::checkerboard_upsample) {
    for (int c = 0; c < shape.channels; ++c) {
      const float* f = field.data() + c * plane;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const int y0 = y & ~1, x0 = x & ~1;
          const double down = 0.25 * (double(f[y0 * w + x0]) + f[y0 * w + x0 + 1] +
                                      f[(y0 + 1) * w + x0] + f[(y0 + 1) * w + x0 + 1]);
          const double v = (1.0 - strength) * f[y * w + x] + strength * down;
          out[c * plane + y * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
    return out;
  }
  Rng rng(seed);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const bool diagonal = rng.bernoulli(0.5);
  const auto taps = gaussian_kernel(kResidualBlur);
  std::vector<double> buf(plane);
  for (int c = 0; c < shape.channels; ++c) {
    const float* f = field.data() + c * plane;
    std::copy(f, f + plane, buf.begin());
    detail::convolve_plane(buf, h, w, taps);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double t = diagonal ? x + y : x - y;
        const double grating =
            kResidualAmplitude * std::cos(2.0 * std::numbers::pi * t / kResidualPeriod + phase);
        const double v = (1.0 - strength) * f[y * w + x] + strength * (buf[y * w + x] + grating);
        out[c * plane + y * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

std::string synthetic_spec_digest(const SyntheticSpec& spec) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "synthetic/1;n=%zu;shape=%dx%dx%d;artifact=%s;strength=%.17g;seed=%llu",
                spec.n_per_class, spec.shape.channels, spec.shape.height, spec.shape.width,
                std::string(artifact_name(spec.artifact)).c_str(), spec.artifact_strength,
                static_cast<unsigned long long>(spec.seed));
  return sha256_hex(buf);
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Dataset d;
  d.shape = spec.shape;
  d.source = "synthetic:" + synthetic_spec_digest(spec);
  const std::size_t n = 2 * spec.n_per_class;
  d.ids.reserve(n);
  d.labels.reserve(n);
  d.pixels.resize(n * spec.shape.size());
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const std::uint64_t field_seed = derive_seed(spec.seed, {stream::kSynthetic, i, 0});
    auto img = synthetic_real_field(spec.shape, field_seed);
    if (label == 1) {
      img = inject_artifact(img, spec.shape, spec.artifact, spec.artifact_strength,
                            derive_seed(spec.seed, {stream::kSynthetic, i, 1}));
    }
    std::copy(img.begin(), img.end(), d.pixels.begin() + i * spec.shape.size());
    char id[32];
    std::snprintf(id, sizeof id, "syn-%06zu", i);
    d.ids.emplace_back(id);
    d.labels.push_back(label);
  }
  return d;
}

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace

Dataset load_image_folder(const fs::path& path, const std::map<std::string, int>& label_map,
                          ImageShape shape, std::vector<std::string>* warnings) {
  if (!fs::is_directory(path)) throw ConfigError("image folder not found: " + path.string());
  if (label_map.size() < 2) throw ConfigError("label map needs two class folders");
  struct Item {
    std::string rel;
    int label;
  };
  std::vector<Item> items;
  for (const auto& [folder, label] : label_map) {
    if (label != 0 && label != 1) throw ConfigError("labels must be 0 or 1");
    const fs::path dir = path / folder;
    if (!fs::is_directory(dir)) throw ConfigError("class folder missing: " + dir.string());
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
      if (entry.is_regular_file() && is_image_file(entry.path())) {
        items.push_back({fs::relative(entry.path(), path).generic_string(), label});
      }
    }
  }
  std::sort(items.begin(), items.end(),
            [](const Item& a, const Item& b) { return a.rel < b.rel; });

  Dataset d;
  d.shape = shape;
  d.source = fs::absolute(path).lexically_normal().generic_string();
  d.resize_policy = "bilinear-resize-to-" + std::to_string(shape.height) + "x" +
                    std::to_string(shape.width) + ",channels=" +
                    std::to_string(shape.channels);
  std::map<int, std::size_t> per_class;
  for (const auto& item : items) {
    const fs::path file = path / item.rel;
    try {
      const auto planar = to_planar(decode_image_file(file), shape);
      d.pixels.insert(d.pixels.end(), planar.begin(), planar.end());
    } catch (const Error& e) {
      if (warnings) warnings->push_back("skipped " + item.rel + ": " + e.what());
      continue;
    }
    d.ids.push_back(item.rel);
    d.labels.push_back(item.label);
    d.file_hashes.push_back(sha256_file(file.string()));
    ++per_class[item.label];
  }
  for (const auto& [folder, label] : label_map) {
    if (per_class[label] == 0) {
      throw ConfigError("class '" + folder + "' has no readable images");
    }
  }
  return d;
}

void save_dataset(const Dataset& dataset, const DatasetManifest& manifest,
                  const fs::path& dir) {
  if (manifest.assignment.size() != dataset.size()) {
    throw ContractViolation("manifest does not cover the dataset");
  }
  fs::create_directories(dir);
  detail::write_f32_file(dir / "images.f32", dataset.pixels);
  json samples = json::array();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    json s = {{"id", dataset.ids[i]},
              {"label", dataset.labels[i]},
              {"split", split_name(manifest.assignment[i])}};
    if (!dataset.file_hashes.empty()) s["sha256"] = dataset.file_hashes[i];
    samples.push_back(std::move(s));
  }
  const json j = {
      {"format", "tgd-dataset/1"},
      {"shape",
       {{"channels", dataset.shape.channels},
        {"height", dataset.shape.height},
        {"width", dataset.shape.width}}},
      {"source", dataset.source},
      {"resize_policy", dataset.resize_policy},
      {"dataset_digest", manifest.dataset_digest},
      {"split_seed", manifest.seed},
      {"manifest_digest", manifest.digest()},
      {"pixels", {{"file", "images.f32"}, {"dtype", "float32"}, {"byte_order", "little"}}},
      {"samples", samples},
  };
  detail::write_text_file(dir / "manifest.json", j.dump(1) + "\n");
}

StoredDataset load_dataset(const fs::path& dir) {
  const fs::path file = dir / "manifest.json";
  if (!fs::exists(file)) throw IoError("dataset manifest not found: " + file.string());
  StoredDataset out;
  Dataset& d = out.dataset;
  DatasetManifest& m = out.manifest;
  try {
    const json j = json::parse(detail::read_text_file(file));
    if (j.at("format") != "tgd-dataset/1") throw IoError("unknown dataset format");
    d.shape.channels = j.at("shape").at("channels");
    d.shape.height = j.at("shape").at("height");
    d.shape.width = j.at("shape").at("width");
    d.source = j.at("source");
    d.resize_policy = j.at("resize_policy");
    m.dataset_digest = j.at("dataset_digest");
    m.source = d.source;
    m.seed = j.at("split_seed");
    for (const json& s : j.at("samples")) {
      d.ids.push_back(s.at("id"));
      d.labels.push_back(s.at("label"));
      m.assignment.push_back(parse_split(s.at("split").get<std::string>()));
      if (s.contains("sha256")) d.file_hashes.push_back(s.at("sha256"));
    }
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError("unreadable dataset manifest " + file.string() + ": " + e.what());
  }
  if (!detail::read_f32_file(dir / "images.f32", d.size() * d.shape.size(), d.pixels)) {
    throw IoError("images.f32 size does not match the manifest in " + dir.string());
  }
  if (d.digest() != m.dataset_digest) {
    throw IoError("dataset content digest mismatch in " + dir.string());
  }
  return out;
}

}  // namespace tgd
