#include "tgd/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <type_traits>

#include "tgd/digest.hpp"
#include "tgd/simd/kernels.hpp"

namespace tgd {

namespace {

using simd::Trans;

template <class T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
          std::size_t ldc, bool accumulate) {
  if constexpr (std::is_same_v<T, float>) {
    simd::kernels().gemm(ta, tb, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
  } else {
    simd::gemm_reference<T>(ta, tb, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
  }
}

template <class T>
void silu(const T* x, T* y, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    simd::kernels().silu(x, y, n);
  } else {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] / (T{1} + std::exp(-x[i]));
  }
}

template <class T>
void silu_backward(const T* x, const T* dy, T* dx, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    simd::kernels().silu_backward(x, dy, dx, n);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const T s = T{1} / (T{1} + std::exp(-x[i]));
      dx[i] = dy[i] * (s * (T{1} + x[i] * (T{1} - s)));
    }
  }
}

template <class T>
simd::Moments moments(const T* x, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    return simd::kernels().moments(x, n);
  } else {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += x[i];
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += (x[i] - mean) * (x[i] - mean);
    return {mean, ss / static_cast<double>(n)};
  }
}

constexpr int kKernel = 3;
constexpr int kPad = 1;

int conv_out(int in, int stride) { return (in + 2 * kPad - kKernel) / stride + 1; }

// Output columns [lo, hi) read input column ox*stride + k - pad inside [0, in).
inline void valid_range(int k, int stride, int in, int out, int& lo, int& hi) {
  lo = 0;
  while (lo < out && lo * stride + k - kPad < 0) ++lo;
  hi = out;
  while (hi > lo && (hi - 1) * stride + k - kPad >= in) --hi;
}

// Writes the 3x3 patches of one image into columns [offset, offset+hout*wout)
// of a (cin*9) x ld column matrix.
template <class T>
void im2col(const T* x, int cin, int hin, int win, int stride, int hout,
            int wout, T* col, std::size_t ld, std::size_t offset) {
  for (int ci = 0; ci < cin; ++ci) {
    for (int ky = 0; ky < kKernel; ++ky) {
      for (int kx = 0; kx < kKernel; ++kx) {
        T* dst = col + static_cast<std::size_t>((ci * kKernel + ky) * kKernel + kx) * ld + offset;
        int lo, hi;
        valid_range(kx, stride, win, wout, lo, hi);
        for (int oy = 0; oy < hout; ++oy) {
          const int iy = oy * stride + ky - kPad;
          T* row = dst + static_cast<std::size_t>(oy) * wout;
          if (iy < 0 || iy >= hin) {
            std::fill_n(row, wout, T{0});
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(ci) * hin + iy) * win;
          const int shift = kx - kPad;
          std::fill_n(row, lo, T{0});
          if (stride == 1) {
            std::copy(src + lo + shift, src + hi + shift, row + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) row[ox] = src[ox * stride + shift];
          }
          std::fill(row + hi, row + wout, T{0});
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, int cin, int hin, int win, int stride, int hout,
            int wout, std::size_t ld, std::size_t offset, T* dx) {
  for (int ci = 0; ci < cin; ++ci) {
    for (int ky = 0; ky < kKernel; ++ky) {
      for (int kx = 0; kx < kKernel; ++kx) {
        const T* src = col + static_cast<std::size_t>((ci * kKernel + ky) * kKernel + kx) * ld + offset;
        int lo, hi;
        valid_range(kx, stride, win, wout, lo, hi);
        for (int oy = 0; oy < hout; ++oy) {
          const int iy = oy * stride + ky - kPad;
          if (iy < 0 || iy >= hin) continue;
          T* dst = dx + (static_cast<std::size_t>(ci) * hin + iy) * win;
          const T* row = src + static_cast<std::size_t>(oy) * wout;
          const int shift = kx - kPad;
          for (int ox = lo; ox < hi; ++ox) dst[ox * stride + shift] += row[ox];
        }
      }
    }
  }
}

// Grow-only per-thread scratch buffer; contents are unspecified on return.
template <class T>
T* scratch(int slot, std::size_t n) {
  thread_local std::vector<T> buffers[4];
  auto& buf = buffers[slot];
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

// Images per GEMM call so that the column count stays near a few thousand.
std::size_t chunk_images(std::size_t batch, std::size_t hw_out) {
  const std::size_t want = (4096 + hw_out - 1) / hw_out;
  return std::clamp<std::size_t>(want, 1, std::max<std::size_t>(batch, 1));
}

template <class T>
void conv_forward(const detail::ConvUnit& u, const T* x, std::size_t batch,
                  const T* wstd, T* y) {
  const std::size_t fan = static_cast<std::size_t>(u.cin) * kKernel * kKernel;
  const std::size_t hw_out = static_cast<std::size_t>(u.hout) * u.wout;
  const std::size_t in_size = static_cast<std::size_t>(u.cin) * u.hin * u.win;
  const std::size_t out_size = static_cast<std::size_t>(u.cout) * hw_out;
  const std::size_t chunk = chunk_images(batch, hw_out);
  T* col = scratch<T>(0, fan * chunk * hw_out);
  T* out = scratch<T>(1, static_cast<std::size_t>(u.cout) * chunk * hw_out);
  for (std::size_t b0 = 0; b0 < batch; b0 += chunk) {
    const std::size_t g = std::min(chunk, batch - b0);
    const std::size_t n = g * hw_out;
    for (std::size_t i = 0; i < g; ++i) {
      im2col(x + (b0 + i) * in_size, u.cin, u.hin, u.win, u.stride, u.hout,
             u.wout, col, n, i * hw_out);
    }
    gemm<T>(Trans::no, Trans::no, u.cout, n, fan, wstd, fan, col, n, out, n,
            false);
    for (std::size_t i = 0; i < g; ++i) {
      for (int co = 0; co < u.cout; ++co) {
        std::copy_n(out + co * n + i * hw_out, hw_out,
                    y + (b0 + i) * out_size + co * hw_out);
      }
    }
  }
}

// dwstd = sum over samples of dy * patches^T; dx (optional) = col2im(wstd^T dy).
template <class T>
void conv_backward(const detail::ConvUnit& u, const T* x, std::size_t batch,
                   const T* wstd, const T* dy, T* dwstd, T* dx) {
  const std::size_t fan = static_cast<std::size_t>(u.cin) * kKernel * kKernel;
  const std::size_t hw_out = static_cast<std::size_t>(u.hout) * u.wout;
  const std::size_t in_size = static_cast<std::size_t>(u.cin) * u.hin * u.win;
  const std::size_t out_size = static_cast<std::size_t>(u.cout) * hw_out;
  const std::size_t chunk = chunk_images(batch, hw_out);
  T* col = scratch<T>(0, fan * chunk * hw_out);
  T* dyc = scratch<T>(2, static_cast<std::size_t>(u.cout) * chunk * hw_out);
  std::fill_n(dwstd, static_cast<std::size_t>(u.cout) * fan, T{0});
  if (dx != nullptr) std::fill_n(dx, batch * in_size, T{0});
  for (std::size_t b0 = 0; b0 < batch; b0 += chunk) {
    const std::size_t g = std::min(chunk, batch - b0);
    const std::size_t n = g * hw_out;
    for (std::size_t i = 0; i < g; ++i) {
      im2col(x + (b0 + i) * in_size, u.cin, u.hin, u.win, u.stride, u.hout,
             u.wout, col, n, i * hw_out);
      for (int co = 0; co < u.cout; ++co) {
        std::copy_n(dy + (b0 + i) * out_size + co * hw_out, hw_out,
                    dyc + co * n + i * hw_out);
      }
    }
    gemm<T>(Trans::no, Trans::yes, u.cout, fan, n, dyc, n, col,
            n, dwstd, fan, true);
    if (dx != nullptr) {
      gemm<T>(Trans::yes, Trans::no, fan, n, u.cout, wstd, fan, dyc, n,
              col, n, false);
      for (std::size_t i = 0; i < g; ++i) {
        col2im(col, u.cin, u.hin, u.win, u.stride, u.hout, u.wout, n,
               i * hw_out, dx + (b0 + i) * in_size);
      }
    }
  }
}

// Gradient of the standardized kernel w.r.t. the raw kernel, row by row.
template <class T>
void weight_standardize_backward(std::span<const T> w, std::size_t cout,
                                 double eps, std::span<const T> dwstd,
                                 std::span<T> dw) {
  const std::size_t fan = w.size() / cout;
  const double inv_n = 1.0 / static_cast<double>(fan);
  for (std::size_t o = 0; o < cout; ++o) {
    const T* row = w.data() + o * fan;
    const T* g = dwstd.data() + o * fan;
    double mean = 0.0;
    for (std::size_t i = 0; i < fan; ++i) mean += row[i];
    mean *= inv_n;
    double var = 0.0, gsum = 0.0, gw = 0.0;
    for (std::size_t i = 0; i < fan; ++i) {
      const double c = row[i] - mean;
      var += c * c;
      gsum += g[i];
      gw += g[i] * c;
    }
    const double sd = std::sqrt(var * inv_n);
    const double d = sd + eps;
    const double gmean = gsum * inv_n;
    const double coupling = sd > 0.0 ? gw / (d * d * static_cast<double>(fan) * sd) : 0.0;
    for (std::size_t i = 0; i < fan; ++i) {
      dw[o * fan + i] += static_cast<T>((g[i] - gmean) / d - coupling * (row[i] - mean));
    }
  }
}

template <class T>
void group_norm_forward(const T* x, std::size_t batch, int channels, int groups,
                        std::size_t hw, double eps, const T* scale,
                        const T* shift, T* xhat, double* rstd_out, T* y) {
  const int per_group = channels / groups;
  const std::size_t len = static_cast<std::size_t>(per_group) * hw;
  for (std::size_t b = 0; b < batch; ++b) {
    for (int g = 0; g < groups; ++g) {
      const std::size_t base = (b * channels + static_cast<std::size_t>(g) * per_group) * hw;
      const simd::Moments m = moments<T>(x + base, len);
      const double rstd = 1.0 / std::sqrt(m.variance + eps);
      if (rstd_out != nullptr) rstd_out[b * groups + g] = rstd;
      const T mean_t = static_cast<T>(m.mean);
      const T rstd_t = static_cast<T>(rstd);
      for (int cg = 0; cg < per_group; ++cg) {
        const int c = g * per_group + cg;
        const T* xs = x + base + static_cast<std::size_t>(cg) * hw;
        T* xh = xhat + base + static_cast<std::size_t>(cg) * hw;
        T* ys = y + base + static_cast<std::size_t>(cg) * hw;
        const T sc = scale[c], sh = shift[c];
        for (std::size_t j = 0; j < hw; ++j) {
          const T v = (xs[j] - mean_t) * rstd_t;
          xh[j] = v;
          ys[j] = sc * v + sh;
        }
      }
    }
  }
}

template <class T>
void group_norm_backward(const T* dy, const T* xhat, const double* rstd,
                         std::size_t batch, int channels, int groups,
                         std::size_t hw, const T* scale, T* dx, T* dscale,
                         T* dshift) {
  const int per_group = channels / groups;
  const std::size_t len = static_cast<std::size_t>(per_group) * hw;
  std::vector<double> ds(channels, 0.0), dsh(channels, 0.0);
  std::vector<T> dxhat(len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (int g = 0; g < groups; ++g) {
      const std::size_t base = (b * channels + static_cast<std::size_t>(g) * per_group) * hw;
      double m1 = 0.0, m2 = 0.0;
      for (int cg = 0; cg < per_group; ++cg) {
        const int c = g * per_group + cg;
        const std::size_t off = static_cast<std::size_t>(cg) * hw;
        double acc_s = 0.0, acc_b = 0.0;
        for (std::size_t j = 0; j < hw; ++j) {
          const T d = dy[base + off + j];
          const T xh = xhat[base + off + j];
          acc_s += static_cast<double>(d) * xh;
          acc_b += d;
          const T dxh = d * scale[c];
          dxhat[off + j] = dxh;
          m1 += dxh;
          m2 += static_cast<double>(dxh) * xh;
        }
        ds[c] += acc_s;
        dsh[c] += acc_b;
      }
      m1 /= static_cast<double>(len);
      m2 /= static_cast<double>(len);
      const double r = rstd[b * groups + g];
      const T m1_t = static_cast<T>(m1), m2_t = static_cast<T>(m2), r_t = static_cast<T>(r);
      for (std::size_t j = 0; j < len; ++j) {
        dx[base + j] = r_t * (dxhat[j] - m1_t - xhat[base + j] * m2_t);
      }
    }
  }
  for (int c = 0; c < channels; ++c) {
    dscale[c] += static_cast<T>(ds[c]);
    dshift[c] += static_cast<T>(dsh[c]);
  }
}

std::string unit_prefix(int stage, int block) {
  return "stage" + std::to_string(stage) + ".block" + std::to_string(block) + ".";
}

}  // namespace

// ---------------------------------------------------------------------------

void ModelSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model spec: " + msg); };
  if (channels < 1 || height < 1 || width < 1) fail("input shape must be positive");
  if (stem_width < 1) fail("stem_width must be positive");
  if (stem_stride < 1 || stem_stride > 2) fail("stem_stride must be 1 or 2");
  if (stage_widths.empty()) fail("at least one stage is required");
  if (stage_widths.size() != stage_blocks.size()) {
    fail("stage_widths and stage_blocks differ in length");
  }
  if (gn_groups < 1) fail("gn_groups must be positive");
  auto check_groups = [&](int c) {
    if (c % gn_groups != 0) {
      fail("gn_groups=" + std::to_string(gn_groups) + " does not divide " +
           std::to_string(c) + " channels");
    }
  };
  check_groups(stem_width);
  for (int w : stage_widths) {
    if (w < 1) fail("stage widths must be positive");
    check_groups(w);
  }
  for (int b : stage_blocks) {
    if (b < 0) fail("stage block counts must be nonnegative");
  }
  if (!(ws_epsilon > 0.0) || !(gn_epsilon > 0.0)) fail("epsilons must be positive");
  if (noise.dropout < 0.0 || noise.dropout >= 1.0) fail("dropout_rate must be in [0,1)");
  if (noise.stochastic_depth < 0.0 || noise.stochastic_depth >= 1.0) {
    fail("stochastic_depth_rate must be in [0,1)");
  }
  int h = conv_out(height, stem_stride), w = conv_out(width, stem_stride);
  for (std::size_t s = 1; s < stage_widths.size(); ++s) {
    h = conv_out(h, 2);
    w = conv_out(w, 2);
  }
  if (h < 1 || w < 1) fail("input too small for the number of stages");
}

std::string architecture_hash(const ModelSpec& spec) {
  std::ostringstream os;
  os.precision(17);
  os << "tgd-resnet-gnws/1;in=" << spec.channels << "x" << spec.height << "x"
     << spec.width << ";stem=" << spec.stem_width << "/" << spec.stem_stride
     << ";widths=";
  for (int w : spec.stage_widths) os << w << ",";
  os << ";blocks=";
  for (int b : spec.stage_blocks) os << b << ",";
  os << ";groups=" << spec.gn_groups << ";ws_eps=" << spec.ws_epsilon
     << ";gn_eps=" << spec.gn_epsilon;
  return sha256_hex(os.str());
}

template <class T>
void weight_standardize(std::span<const T> kernel, std::size_t out_channels,
                        double epsilon, std::span<T> out) {
  if (out_channels == 0 || kernel.size() % out_channels != 0 ||
      out.size() != kernel.size()) {
    throw ContractViolation("weight_standardize: bad kernel shape");
  }
  const std::size_t fan = kernel.size() / out_channels;
  for (std::size_t o = 0; o < out_channels; ++o) {
    const T* row = kernel.data() + o * fan;
    double mean = 0.0;
    for (std::size_t i = 0; i < fan; ++i) mean += row[i];
    mean /= static_cast<double>(fan);
    double var = 0.0;
    for (std::size_t i = 0; i < fan; ++i) var += (row[i] - mean) * (row[i] - mean);
    const double d = std::sqrt(var / static_cast<double>(fan)) + epsilon;
    for (std::size_t i = 0; i < fan; ++i) {
      out[o * fan + i] = static_cast<T>((row[i] - mean) / d);
    }
  }
}

Tensor weight_standardize(const Tensor& kernel, double epsilon) {
  if (kernel.rank() < 1) throw ContractViolation("weight_standardize: scalar kernel");
  Tensor out(kernel.shape());
  weight_standardize<float>(kernel.values(), static_cast<std::size_t>(kernel.dim(0)),
                            epsilon, out.values());
  return out;
}

Tensor group_normalize(const Tensor& activations, int groups, double epsilon,
                       std::span<const float> scale, std::span<const float> shift,
                       Tensor* normalized) {
  if (activations.rank() != 4) {
    throw ContractViolation("group_normalize: expected m x c x h x w activations");
  }
  const auto m = static_cast<std::size_t>(activations.dim(0));
  const auto c = static_cast<int>(activations.dim(1));
  const auto hw = static_cast<std::size_t>(activations.dim(2) * activations.dim(3));
  if (groups < 1 || c % groups != 0) {
    throw ConfigError("group_normalize: " + std::to_string(groups) +
                      " groups do not divide " + std::to_string(c) + " channels");
  }
  if (scale.size() != static_cast<std::size_t>(c) ||
      shift.size() != static_cast<std::size_t>(c)) {
    throw ContractViolation("group_normalize: affine size mismatch");
  }
  Tensor out(activations.shape());
  Tensor xhat(activations.shape());
  std::vector<double> rstd(m * groups);
  group_norm_forward<float>(activations.data(), m, c, groups, hw, epsilon,
                            scale.data(), shift.data(), xhat.data(), rstd.data(),
                            out.data());
  if (normalized != nullptr) *normalized = std::move(xhat);
  return out;
}

template <class T>
void drop_path_add(std::span<const T> identity, std::span<const T> branch,
                   bool keep, double rate, std::span<T> out) {
  const T scale = keep ? static_cast<T>(1.0 / (1.0 - rate)) : T{0};
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = identity[i] + scale * branch[i];
}

// ---------------------------------------------------------------------------

template <class T>
BasicNetwork<T>::BasicNetwork(ModelSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  auto add_unit = [&](const std::string& prefix, const std::string& conv,
                      const std::string& gn, int cin, int cout, int stride,
                      int hin, int win, bool act) {
    detail::ConvUnit u;
    u.conv = prefix + conv + ".weight";
    u.scale = prefix + gn + ".scale";
    u.shift = prefix + gn + ".shift";
    u.cin = cin;
    u.cout = cout;
    u.stride = stride;
    u.hin = hin;
    u.win = win;
    u.hout = conv_out(hin, stride);
    u.wout = conv_out(win, stride);
    u.activation = act;
    layout_.push_back({u.conv, {cout, cin, kKernel, kKernel}, Role::feature});
    layout_.push_back({u.scale, {cout}, Role::feature});
    layout_.push_back({u.shift, {cout}, Role::feature});
    units_.push_back(u);
    return units_.back();
  };

  const auto& stem = add_unit("stem.", "conv", "gn", spec_.channels, spec_.stem_width,
                              spec_.stem_stride, spec_.height, spec_.width, true);
  int c = stem.cout, h = stem.hout, w = stem.wout;
  for (std::size_t s = 0; s < spec_.stage_widths.size(); ++s) {
    const int stage_no = static_cast<int>(s) + 1;
    const std::string prefix = "stage" + std::to_string(stage_no) + ".";
    const int width = spec_.stage_widths[s];
    detail::Stage stage;
    if (s > 0 || width != c) {
      const int stride = s > 0 ? 2 : 1;
      const auto& t = add_unit(prefix + "down.", "conv", "gn", c, width, stride, h, w, true);
      stage.transition = static_cast<int>(units_.size()) - 1;
      c = t.cout;
      h = t.hout;
      w = t.wout;
    }
    for (int b = 0; b < spec_.stage_blocks[s]; ++b) {
      const std::string bp = unit_prefix(stage_no, b);
      detail::ResidualBlock block{units_.size()};
      add_unit(bp, "conv1", "gn1", c, c, 1, h, w, true);
      add_unit(bp, "conv2", "gn2", c, c, 1, h, w, false);
      stage.blocks.push_back(blocks_.size());
      blocks_.push_back(block);
    }
    stages_.push_back(stage);
  }
  final_channels_ = c;
  final_hw_ = h * w;
  layout_.push_back({"head.fc.weight", {1, c}, Role::head});
  layout_.push_back({"head.fc.bias", {1}, Role::head});
}

template <class T>
std::size_t BasicNetwork<T>::image_size() const {
  return static_cast<std::size_t>(spec_.channels) * spec_.height * spec_.width;
}

template <class T>
BasicParameterSet<T> BasicNetwork<T>::init_params(std::uint64_t seed) const {
  Rng rng(derive_seed(seed, {stream::kInit}));
  BasicParameterSet<T> params;
  for (const auto& info : layout_) {
    BasicTensor<T> t(info.shape);
    const bool is_scale = info.name.ends_with(".scale");
    const bool is_kernel = info.shape.size() == 4;
    if (is_scale) {
      t.fill(T{1});
    } else if (is_kernel) {
      const double fan = static_cast<double>(info.shape[1] * info.shape[2] * info.shape[3]);
      const double sd = std::sqrt(2.0 / fan);
      for (auto& v : t.values()) v = static_cast<T>(sd * rng.normal());
    } else if (info.name == "head.fc.weight") {
      for (auto& v : t.values()) v = static_cast<T>(0.01 * rng.normal());
    }
    params.add(info.name, std::move(t), info.role);
  }
  return params;
}

template <class T>
void BasicNetwork<T>::check_params(const BasicParameterSet<T>& params) const {
  if (params.size() != layout_.size()) {
    for (const auto& [name, e] : params) {
      const bool known = std::any_of(layout_.begin(), layout_.end(),
                                     [&](const ParamInfo& i) { return i.name == name; });
      if (!known) throw AlignmentError(name, "not part of the model layout");
    }
  }
  for (const auto& info : layout_) {
    if (!params.contains(info.name)) throw AlignmentError(info.name, "missing");
    const auto& t = params.at(info.name);
    if (t.shape() != info.shape) {
      throw AlignmentError(info.name, "shape " + shape_to_string(t.shape()) +
                                          " vs expected " + shape_to_string(info.shape));
    }
    if (params.role(info.name) != info.role) throw AlignmentError(info.name, "role mismatch");
  }
}

namespace {

template <class T>
std::vector<T> unit_forward(const detail::ConvUnit& u, const ModelSpec& spec,
                            const BasicParameterSet<T>& params, std::vector<T> x,
                            std::size_t batch, UnitCache<T>* cache) {
  const auto& kernel = params.at(u.conv);
  std::vector<T> wstd(kernel.size());
  weight_standardize<T>(kernel.values(), static_cast<std::size_t>(u.cout),
                        spec.ws_epsilon, wstd);
  const std::size_t hw = static_cast<std::size_t>(u.hout) * u.wout;
  const std::size_t out_n = batch * u.cout * hw;
  std::vector<T> conv(out_n);
  conv_forward<T>(u, x.data(), batch, wstd.data(), conv.data());

  std::vector<T> xhat(out_n);
  std::vector<double> rstd(batch * spec.gn_groups);
  std::vector<T> pre(out_n);
  group_norm_forward<T>(conv.data(), batch, u.cout, spec.gn_groups, hw,
                        spec.gn_epsilon, params.at(u.scale).data(),
                        params.at(u.shift).data(), xhat.data(), rstd.data(),
                        pre.data());
  std::vector<T> out;
  if (u.activation) {
    out.resize(out_n);
    silu<T>(pre.data(), out.data(), out_n);
  }
  if (cache != nullptr) {
    cache->input = std::move(x);
    cache->wstd = std::move(wstd);
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
    if (u.activation) {
      cache->preact = std::move(pre);
    } else {
      cache->preact.clear();
    }
  }
  return u.activation ? out : pre;
}

// Returns d(loss)/d(unit input) when need_dx, accumulates parameter grads.
template <class T>
std::vector<T> unit_backward(const detail::ConvUnit& u, const ModelSpec& spec,
                             const BasicParameterSet<T>& params,
                             const UnitCache<T>& cache, std::size_t batch,
                             std::vector<T> dy, BasicParameterSet<T>& grads,
                             bool need_dx) {
  const std::size_t hw = static_cast<std::size_t>(u.hout) * u.wout;
  const std::size_t out_n = batch * u.cout * hw;
  if (u.activation) {
    silu_backward<T>(cache.preact.data(), dy.data(), dy.data(), out_n);
  }
  std::vector<T> dconv(out_n);
  group_norm_backward<T>(dy.data(), cache.xhat.data(), cache.rstd.data(), batch,
                         u.cout, spec.gn_groups, hw, params.at(u.scale).data(),
                         dconv.data(), grads.at(u.scale).data(),
                         grads.at(u.shift).data());
  std::vector<T> dwstd(static_cast<std::size_t>(u.cout) * u.cin * kKernel * kKernel);
  std::vector<T> dx;
  if (need_dx) dx.resize(batch * u.cin * u.hin * u.win);
  conv_backward<T>(u, cache.input.data(), batch, cache.wstd.data(), dconv.data(),
                   dwstd.data(), need_dx ? dx.data() : nullptr);
  weight_standardize_backward<T>(params.at(u.conv).values(),
                                 static_cast<std::size_t>(u.cout), spec.ws_epsilon,
                                 dwstd, grads.at(u.conv).values());
  return dx;
}

}  // namespace

template <class T>
BasicForwardResult<T> BasicNetwork<T>::forward(const BasicParameterSet<T>& params,
                                               std::span<const T> images,
                                               std::size_t batch, ForwardMode mode,
                                               Rng* rng, Tape<T>* tape) const {
  if (batch == 0) throw ContractViolation("forward: empty batch");
  if (images.size() != batch * image_size()) {
    throw ContractViolation("forward: expected " + std::to_string(batch) + " x " +
                            std::to_string(spec_.channels) + "x" +
                            std::to_string(spec_.height) + "x" +
                            std::to_string(spec_.width) + " input values, got " +
                            std::to_string(images.size()));
  }
  const bool noised = mode == ForwardMode::train_noised;
  if (noised && rng == nullptr) throw ContractViolation("forward: train_noised needs an rng");
  check_params(params);

  if (tape != nullptr) {
    tape->batch = batch;
    tape->units.assign(units_.size(), {});
    tape->blocks.assign(blocks_.size(), {});
  }
  auto cache_of = [&](std::size_t i) { return tape ? &tape->units[i] : nullptr; };

  BasicForwardResult<T> result;
  std::vector<T> h(images.begin(), images.end());
  h = unit_forward<T>(units_[0], spec_, params, std::move(h), batch, cache_of(0));

  const double sd_rate = spec_.noise.stochastic_depth;
  for (const auto& stage : stages_) {
    if (stage.transition >= 0) {
      const auto t = static_cast<std::size_t>(stage.transition);
      h = unit_forward<T>(units_[t], spec_, params, std::move(h), batch, cache_of(t));
    }
    for (std::size_t bi : stage.blocks) {
      const auto& blk = blocks_[bi];
      const auto& u1 = units_[blk.first];
      std::vector<T> a = unit_forward<T>(u1, spec_, params, h, batch, cache_of(blk.first));
      std::vector<T> g = unit_forward<T>(units_[blk.first + 1], spec_, params,
                                         std::move(a), batch, cache_of(blk.first + 1));
      const std::size_t per = static_cast<std::size_t>(u1.cout) * u1.hout * u1.wout;
      std::vector<double> scales(batch, 1.0);
      std::vector<T> r(h.size());
      for (std::size_t b = 0; b < batch; ++b) {
        bool keep = true;
        if (noised && sd_rate > 0.0) {
          keep = !rng->bernoulli(sd_rate);
          ++result.block_draws;
          if (!keep) ++result.blocks_dropped;
        }
        const double rate = noised ? sd_rate : 0.0;
        scales[b] = keep ? 1.0 / (1.0 - rate) : 0.0;
        drop_path_add<T>(std::span<const T>(h).subspan(b * per, per),
                         std::span<const T>(g).subspan(b * per, per), keep, rate,
                         std::span<T>(r).subspan(b * per, per));
      }
      silu<T>(r.data(), h.data(), r.size());
      if (tape != nullptr) {
        tape->blocks[bi].preact = std::move(r);
        tape->blocks[bi].path_scale = std::move(scales);
      }
    }
  }

  const auto c = static_cast<std::size_t>(final_channels_);
  const auto hw = static_cast<std::size_t>(final_hw_);
  const double q = noised ? spec_.noise.dropout : 0.0;
  std::vector<T> head_in(batch * c);
  std::vector<T> drop(batch * c, T{1});
  const auto& fc_w = params.at("head.fc.weight");
  const double fc_b = params.at("head.fc.bias")[0];
  result.logits.resize(batch);
  result.predictions.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    double z = fc_b;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = h.data() + (b * c + ch) * hw;
      double acc = 0.0;
      for (std::size_t j = 0; j < hw; ++j) acc += src[j];
      const T pooled = static_cast<T>(acc / static_cast<double>(hw));
      if (q > 0.0) drop[b * c + ch] = rng->bernoulli(q) ? T{0} : static_cast<T>(1.0 / (1.0 - q));
      const T d = pooled * drop[b * c + ch];
      head_in[b * c + ch] = d;
      z += static_cast<double>(fc_w[ch]) * d;
    }
    result.logits[b] = z;
    result.predictions[b] = 1.0 / (1.0 + std::exp(-z));
  }
  if (tape != nullptr) {
    tape->head_input = std::move(head_in);
    tape->dropout_scale = std::move(drop);
  }
  return result;
}

template <class T>
BasicParameterSet<T> BasicNetwork<T>::backward(const BasicParameterSet<T>& params,
                                               const Tape<T>& tape,
                                               std::span<const double> dlogits) const {
  const std::size_t batch = tape.batch;
  if (dlogits.size() != batch || tape.units.size() != units_.size()) {
    throw ContractViolation("backward: tape does not match the gradient input");
  }
  BasicParameterSet<T> grads = params.zeros_like();
  const auto c = static_cast<std::size_t>(final_channels_);
  const auto hw = static_cast<std::size_t>(final_hw_);
  const auto& fc_w = params.at("head.fc.weight");
  auto& g_w = grads.at("head.fc.weight");
  double g_b = 0.0;
  std::vector<double> g_w_acc(c, 0.0);
  std::vector<T> dh(batch * c * hw);
  for (std::size_t b = 0; b < batch; ++b) {
    const double dz = dlogits[b];
    g_b += dz;
    for (std::size_t ch = 0; ch < c; ++ch) {
      g_w_acc[ch] += dz * tape.head_input[b * c + ch];
      const double dpool = dz * fc_w[ch] * tape.dropout_scale[b * c + ch];
      const T v = static_cast<T>(dpool / static_cast<double>(hw));
      std::fill_n(dh.data() + (b * c + ch) * hw, hw, v);
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) g_w[ch] = static_cast<T>(g_w_acc[ch]);
  grads.at("head.fc.bias")[0] = static_cast<T>(g_b);

  for (auto s = stages_.rbegin(); s != stages_.rend(); ++s) {
    for (auto it = s->blocks.rbegin(); it != s->blocks.rend(); ++it) {
      const auto& blk = blocks_[*it];
      const auto& cache = tape.blocks[*it];
      const auto& u1 = units_[blk.first];
      const std::size_t per = static_cast<std::size_t>(u1.cout) * u1.hout * u1.wout;
      std::vector<T> dr(dh.size());
      silu_backward<T>(cache.preact.data(), dh.data(), dr.data(), dr.size());
      std::vector<T> dg(dr.size());
      for (std::size_t b = 0; b < batch; ++b) {
        const T sc = static_cast<T>(cache.path_scale[b]);
        for (std::size_t j = 0; j < per; ++j) dg[b * per + j] = dr[b * per + j] * sc;
      }
      std::vector<T> da = unit_backward<T>(units_[blk.first + 1], spec_, params,
                                           tape.units[blk.first + 1], batch,
                                           std::move(dg), grads, true);
      std::vector<T> dx = unit_backward<T>(u1, spec_, params, tape.units[blk.first],
                                           batch, std::move(da), grads, true);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dr[i];
      dh = std::move(dx);
    }
    if (s->transition >= 0) {
      const auto t = static_cast<std::size_t>(s->transition);
      dh = unit_backward<T>(units_[t], spec_, params, tape.units[t], batch,
                            std::move(dh), grads, true);
    }
  }
  unit_backward<T>(units_[0], spec_, params, tape.units[0], batch, std::move(dh),
                   grads, false);
  return grads;
}

std::map<std::string, Role> partition_params(const ModelSpec& spec) {
  std::map<std::string, Role> roles;
  const Network net(spec);
  for (const auto& info : net.layout()) roles.emplace(info.name, info.role);
  return roles;
}

std::vector<std::string> top_block_params(const ModelSpec& spec) {
  const std::string last = "stage" + std::to_string(spec.stage_widths.size()) + ".";
  std::vector<std::string> names;
  const Network net(spec);
  for (const auto& info : net.layout()) {
    if (info.role == Role::head || info.name.starts_with(last)) names.push_back(info.name);
  }
  std::sort(names.begin(), names.end());
  return names;
}

template void weight_standardize<float>(std::span<const float>, std::size_t, double,
                                        std::span<float>);
template void weight_standardize<double>(std::span<const double>, std::size_t, double,
                                         std::span<double>);
template void drop_path_add<float>(std::span<const float>, std::span<const float>,
                                   bool, double, std::span<float>);
template void drop_path_add<double>(std::span<const double>, std::span<const double>,
                                    bool, double, std::span<double>);
template class BasicNetwork<float>;
template class BasicNetwork<double>;

}  // namespace tgd
