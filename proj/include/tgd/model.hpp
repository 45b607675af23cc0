#pragma once

// Small residual binary classifier with batch-statistics-free normalization:
// every 3x3 convolution uses a weight-standardized kernel and is followed by
// group normalization. Model noise (head dropout, per-sample stochastic depth)
// is active only in ForwardMode::train_noised.
//
// Layout: stem conv (stride `stem_stride`) -> stages; stage s > 0 opens with a
// stride-2 transition conv; every block is
//   out = silu(x + drop_path(gn2(conv2(silu(gn1(conv1(x)))))))
// followed by global average pooling, dropout and a single-logit FC head.

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tgd/core_math.hpp"
#include "tgd/rng.hpp"
#include "tgd/tensor.hpp"

namespace tgd {

struct NoiseRates {
  double dropout = 0.2;
  double stochastic_depth = 0.2;
  friend bool operator==(const NoiseRates&, const NoiseRates&) = default;
};

struct ModelSpec {
  int channels = 3;
  int height = 64;
  int width = 64;
  int stem_width = 8;
  int stem_stride = 2;
  std::vector<int> stage_widths{8, 16, 32, 64};
  std::vector<int> stage_blocks{1, 1, 1, 1};
  int gn_groups = 8;
  double ws_epsilon = 1e-5;
  double gn_epsilon = 1e-5;
  NoiseRates noise;

  /// Throws ConfigError on invalid values (e.g. gn_groups not dividing a
  /// normalized channel count, rates outside [0,1)).
  void validate() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// SHA-256 over the architecture fields (everything except noise rates, which
/// are per-stage training settings and do not change the parameter layout).
std::string architecture_hash(const ModelSpec& spec);

enum class ForwardMode { train_noised, eval_clean };

struct ParamInfo {
  std::string name;
  Shape shape;
  Role role;
};

/// Standardizes each output-channel row of a [cout, fan_in] kernel to zero
/// mean and unit population std (divided by std + epsilon).
template <class T>
void weight_standardize(std::span<const T> kernel, std::size_t out_channels,
                        double epsilon, std::span<T> out);

Tensor weight_standardize(const Tensor& kernel, double epsilon);

/// Group normalization of m x c x h x w activations with per-channel affine.
/// `normalized`, when non-null, receives the pre-affine values.
Tensor group_normalize(const Tensor& activations, int groups, double epsilon,
                       std::span<const float> scale, std::span<const float> shift,
                       Tensor* normalized = nullptr);

/// Survivor-rescaled residual branch: identity + mask * branch / (1 - rate).
template <class T>
void drop_path_add(std::span<const T> identity, std::span<const T> branch,
                   bool keep, double rate, std::span<T> out);

template <class T>
struct BasicForwardResult {
  std::vector<double> logits;
  std::vector<double> predictions;
  std::size_t block_draws = 0;     // per-sample stochastic-depth decisions made
  std::size_t blocks_dropped = 0;  // decisions that dropped the branch
};

template <class T>
struct UnitCache {
  std::vector<T> input;       // batch x cin x hin x win
  std::vector<T> wstd;        // standardized kernel, cout x fan_in
  std::vector<T> xhat;        // pre-affine GN output, batch x cout x hout x wout
  std::vector<double> rstd;   // 1/sqrt(var + eps) per (sample, group)
  std::vector<T> preact;      // GN output fed to silu (units with activation)
};

template <class T>
struct BlockCache {
  std::vector<T> preact;           // identity + scaled branch, before silu
  std::vector<double> path_scale;  // per sample: 0 or 1/(1-rate) (1 in eval)
};

/// Activations recorded by forward() for backward().
template <class T>
struct Tape {
  std::size_t batch = 0;
  std::vector<UnitCache<T>> units;
  std::vector<BlockCache<T>> blocks;
  std::vector<T> head_input;     // pooled features after dropout, batch x C
  std::vector<T> dropout_scale;  // batch x C
};

namespace detail {

// conv3x3 (weight-standardized) -> group norm -> optional silu
struct ConvUnit {
  std::string conv;   // kernel parameter name
  std::string scale;  // GN scale parameter name
  std::string shift;  // GN shift parameter name
  int cin = 0, cout = 0, stride = 1;
  int hin = 0, win = 0, hout = 0, wout = 0;
  bool activation = true;
};

struct ResidualBlock {
  std::size_t first = 0;  // index of conv1 unit; conv2 is first + 1
};

struct Stage {
  int transition = -1;  // unit index of the stride-2 transition, -1 if none
  std::vector<std::size_t> blocks;
};

}  // namespace detail

template <class T>
class BasicNetwork {
 public:
  explicit BasicNetwork(ModelSpec spec);

  const ModelSpec& spec() const { return spec_; }
  const std::vector<ParamInfo>& layout() const { return layout_; }
  std::size_t image_size() const;

  /// Seeded initialization: He-normal conv kernels, unit GN scale, zero
  /// shifts, small-normal FC weight, zero bias.
  BasicParameterSet<T> init_params(std::uint64_t seed) const;

  /// Throws AlignmentError unless params match the layout.
  void check_params(const BasicParameterSet<T>& params) const;

  /// `images` holds batch * c * h * w values in [0,1]. train_noised requires
  /// `rng`. When `tape` is non-null the activations needed by backward() are
  /// recorded.
  BasicForwardResult<T> forward(const BasicParameterSet<T>& params,
                                std::span<const T> images, std::size_t batch,
                                ForwardMode mode, Rng* rng,
                                Tape<T>* tape = nullptr) const;

  /// Gradient of sum_i dlogits[i] * logit_i with respect to every parameter.
  BasicParameterSet<T> backward(const BasicParameterSet<T>& params,
                                const Tape<T>& tape,
                                std::span<const double> dlogits) const;

 private:
  ModelSpec spec_;
  std::vector<ParamInfo> layout_;
  std::vector<detail::ConvUnit> units_;
  std::vector<detail::ResidualBlock> blocks_;
  std::vector<detail::Stage> stages_;
  int final_channels_ = 0;
  int final_hw_ = 0;
};

using Network = BasicNetwork<float>;
using ForwardResult = BasicForwardResult<float>;

/// Role assignment declared by the architecture: the final FC layer is the
/// head, everything else is feature.
std::map<std::string, Role> partition_params(const ModelSpec& spec);

/// Names of parameters trained by the frozen-feature baseline: the last
/// stage and the head.
std::vector<std::string> top_block_params(const ModelSpec& spec);

}  // namespace tgd
