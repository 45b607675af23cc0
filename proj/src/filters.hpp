#pragma once

#include <vector>

namespace tgd::detail {

/// Separable convolution of one h x w plane with symmetric `taps` (odd
/// length), reflect padding without edge repetition. No clamping.
void convolve_plane(std::vector<double>& plane, int height, int width,
                    const std::vector<double>& taps);

}  // namespace tgd::detail
