#pragma once

// Data-parallel inner loops used by the model, the optimizer and the
// regularizers. Every kernel has a scalar reference implementation and an
// AVX2/FMA variant; the variant is picked once at runtime from CPUID and can
// be forced with TGD_SIMD=scalar|avx2 or set_isa().

#include <cstddef>
#include <string_view>

namespace tgd::simd {

enum class Isa { scalar, avx2 };

enum class Trans { no, yes };

struct Moments {
  double mean = 0.0;
  double variance = 0.0;  // population variance
};

/// C[MxN] (+)= op(A)[MxK] * op(B)[KxN], row-major with leading dimensions.
using GemmFn = void (*)(Trans ta, Trans tb, std::size_t m, std::size_t n,
                        std::size_t k, const float* a, std::size_t lda,
                        const float* b, std::size_t ldb, float* c,
                        std::size_t ldc, bool accumulate);

struct KernelTable {
  Isa isa;
  GemmFn gemm;
  /// sum x_i^2, accumulated in double.
  double (*sum_squares)(const float* x, std::size_t n);
  /// sum (a_i - b_i)^2, accumulated in double.
  double (*sum_squared_diff)(const float* a, const float* b, std::size_t n);
  Moments (*moments)(const float* x, std::size_t n);
  /// y = x * sigmoid(x)
  void (*silu)(const float* x, float* y, std::size_t n);
  /// dx = dy * d/dx[x * sigmoid(x)]
  void (*silu_backward)(const float* x, const float* dy, float* dx,
                        std::size_t n);
  /// y += alpha * x
  void (*axpy)(float alpha, const float* x, float* y, std::size_t n);
  /// v = momentum * v + g;  w -= lr * v
  void (*sgd_momentum)(float* w, const float* g, float* v, std::size_t n,
                       float lr, float momentum);
};

const KernelTable& scalar_kernels();
/// Only valid when isa_supported(Isa::avx2).
const KernelTable& avx2_kernels();

bool isa_supported(Isa isa);
Isa active_isa();
/// Throws ContractViolation when the host cannot run `isa`.
void set_isa(Isa isa);
const KernelTable& kernels();

std::string_view isa_name(Isa isa);

/// Straightforward triple loop used as the oracle for the float kernels and as
/// the (only) GEMM of the double-precision path.
template <class T>
void gemm_reference(Trans ta, Trans tb, std::size_t m, std::size_t n,
                    std::size_t k, const T* a, std::size_t lda, const T* b,
                    std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) crow[j] = T{0};
    }
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ta == Trans::no ? a[i * lda + p] : a[p * lda + i];
      if (tb == Trans::no) {
        const T* brow = b + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * ldb + p];
      }
    }
  }
}

}  // namespace tgd::simd
