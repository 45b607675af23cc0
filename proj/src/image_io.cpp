#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <png.h>

#include "jpeg_codec.hpp"
#include "raw_io.hpp"
#include "tgd/data.hpp"
#include "tgd/errors.hpp"

namespace tgd {

namespace fs = std::filesystem;

namespace {

bool has_png_signature(const std::string& bytes) {
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  return bytes.size() >= 8 && std::memcmp(bytes.data(), sig, 8) == 0;
}

bool has_jpeg_signature(const std::string& bytes) {
  return bytes.size() >= 3 && static_cast<unsigned char>(bytes[0]) == 0xff &&
         static_cast<unsigned char>(bytes[1]) == 0xd8 &&
         static_cast<unsigned char>(bytes[2]) == 0xff;
}

DecodedImage decode_png(const std::string& bytes, const fs::path& file) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw IoError("cannot decode PNG " + file.string() + ": " + img.message);
  }
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  DecodedImage out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.channels = gray ? 1 : 3;
  out.samples.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.samples.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + file.string() + ": " + img.message);
  }
  return out;
}

}  // namespace

DecodedImage decode_image_file(const fs::path& file) {
  const std::string bytes = detail::read_text_file(file);
  if (has_png_signature(bytes)) return decode_png(bytes, file);
  if (has_jpeg_signature(bytes)) {
    try {
      return detail::decode_jpeg(reinterpret_cast<const unsigned char*>(bytes.data()),
                                 bytes.size());
    } catch (const IoError& e) {
      throw IoError(file.string() + ": " + e.what());
    }
  }
  throw IoError("not a PNG or JPEG file: " + file.string());
}

void write_png(const fs::path& file, const DecodedImage& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw ContractViolation("write_png: 1 or 3 channels required");
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, file.string().c_str(), 0, image.samples.data(), 0,
                               nullptr)) {
    throw IoError("cannot write PNG " + file.string() + ": " + img.message);
  }
}

std::vector<float> to_planar(const DecodedImage& image, ImageShape shape) {
  if (image.width < 1 || image.height < 1 || image.channels < 1) {
    throw ContractViolation("to_planar: empty image");
  }
  const int sw = image.width, sh = image.height, sc = image.channels;
  auto sample = [&](int x, int y, int c) -> float {
    // Channel conversion: gray -> replicate, color -> gray via luma weights.
    const unsigned char* p = image.samples.data() + (static_cast<std::size_t>(y) * sw + x) * sc;
    if (shape.channels == 1 && sc >= 3) {
      return (0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2]) / 255.0f;
    }
    const int src_c = sc >= 3 ? std::min(c, 2) : 0;
    return p[src_c] / 255.0f;
  };
  std::vector<float> out(shape.size());
  const double fx = static_cast<double>(sw) / shape.width;
  const double fy = static_cast<double>(sh) / shape.height;
  for (int c = 0; c < shape.channels; ++c) {
    for (int y = 0; y < shape.height; ++y) {
      const double sy = std::clamp((y + 0.5) * fy - 0.5, 0.0, double(sh - 1));
      const int y0 = static_cast<int>(sy);
      const int y1 = std::min(y0 + 1, sh - 1);
      const double ty = sy - y0;
      for (int x = 0; x < shape.width; ++x) {
        const double sx = std::clamp((x + 0.5) * fx - 0.5, 0.0, double(sw - 1));
        const int x0 = static_cast<int>(sx);
        const int x1 = std::min(x0 + 1, sw - 1);
        const double tx = sx - x0;
        const double v = (1 - ty) * ((1 - tx) * sample(x0, y0, c) + tx * sample(x1, y0, c)) +
                         ty * ((1 - tx) * sample(x0, y1, c) + tx * sample(x1, y1, c));
        out[(static_cast<std::size_t>(c) * shape.height + y) * shape.width + x] =
            static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

}  // namespace tgd
