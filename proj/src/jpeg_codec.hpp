#pragma once

#include <vector>

#include "tgd/data.hpp"

namespace tgd::detail {

/// Baseline JPEG of interleaved 8-bit samples (1 or 3 components). Chroma is
/// subsampled 2x2 below quality 95 and kept at full resolution from 95 up.
std::vector<unsigned char> encode_jpeg(const DecodedImage& image, int quality);

DecodedImage decode_jpeg(const unsigned char* data, std::size_t size);

}  // namespace tgd::detail
