#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace tgd {

/// Mixes a seed with a list of stream coordinates (tag, step, sample index,
/// ...) into an independent 64-bit substream seed.
std::uint64_t derive_seed(std::uint64_t seed,
                          std::initializer_list<std::uint64_t> coords);

/// Seeded generator. The engine is std::mt19937_64; the mappings to uniform
/// reals/integers are fixed here so streams are identical across standard
/// library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] (inclusive).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  /// True with probability p (draws rho ~ U(0,1), fires iff rho < p).
  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (one value per call).
  double normal();

  /// Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

  Rng substream(std::initializer_list<std::uint64_t> coords) {
    return Rng(derive_seed(engine_(), coords));
  }

 private:
  std::mt19937_64 engine_;
};

// Substream tags, so that different consumers of one seed never collide.
namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kSampler = 2;
inline constexpr std::uint64_t kAugmentSample = 3;
inline constexpr std::uint64_t kAugmentBatch = 4;
inline constexpr std::uint64_t kStudentNoise = 5;
inline constexpr std::uint64_t kTeacherNoise = 6;
inline constexpr std::uint64_t kSynthetic = 7;
inline constexpr std::uint64_t kSplit = 8;
}  // namespace stream

}  // namespace tgd
