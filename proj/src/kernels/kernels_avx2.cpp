// AVX2+FMA variants of the scalar reference kernels. Compiled only on
// x86-64 (this translation unit gets -mavx2 -mfma); callers must check
// avx2_backend() for nullptr, which covers CPUs without the extensions.

#include "terra/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#define TERRA_BUILD_AVX2 1
#else
#define TERRA_BUILD_AVX2 0
#endif

#if TERRA_BUILD_AVX2

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace terra::kernels {
namespace {

inline float hsum256(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 sh = _mm_movehdup_ps(lo);
  lo = _mm_add_ps(lo, sh);
  sh = _mm_movehl_ps(sh, lo);
  lo = _mm_add_ss(lo, sh);
  return _mm_cvtss_f32(lo);
}

void v_add(const float* a, const float* b, float* out, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void v_sub(const float* a, const float* b, float* out, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(out + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void v_mul(const float* a, const float* b, float* out, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void v_axpy(float alpha, const float* x, const float* y, float* out, size_t n) {
  __m256 av = _mm256_set1_ps(alpha);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(out + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) out[i] = alpha * x[i] + y[i];
}

void v_scale(float alpha, const float* x, float* out, size_t n) {
  __m256 av = _mm256_set1_ps(alpha);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(out + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
  }
  for (; i < n; ++i) out[i] = alpha * x[i];
}

void v_acc_add(float* acc, const float* x, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(acc + i, _mm256_add_ps(_mm256_loadu_ps(acc + i), _mm256_loadu_ps(x + i)));
  }
  for (; i < n; ++i) acc[i] += x[i];
}

void v_acc_axpy(float* acc, float alpha, const float* x, size_t n) {
  __m256 av = _mm256_set1_ps(alpha);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(acc + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(acc + i)));
  }
  for (; i < n; ++i) acc[i] += alpha * x[i];
}

float v_dot(const float* a, const float* b, size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
  }
  float total = hsum256(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) total += a[i] * b[i];
  return total;
}

float v_sum(const float* x, size_t n) {
  __m256 acc = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  float total = hsum256(acc);
  for (; i < n; ++i) total += x[i];
  return total;
}

float v_max(const float* x, size_t n) {
  if (n < 8) {
    float m = x[0];
    for (size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    return m;
  }
  __m256 acc = _mm256_loadu_ps(x);
  size_t i = 8;
  for (; i + 8 <= n; i += 8) acc = _mm256_max_ps(acc, _mm256_loadu_ps(x + i));
  __m128 lo = _mm_max_ps(_mm256_castps256_ps128(acc), _mm256_extractf128_ps(acc, 1));
  lo = _mm_max_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_max_ss(lo, _mm_movehdup_ps(lo));
  float m = _mm_cvtss_f32(lo);
  for (; i < n; ++i) m = std::max(m, x[i]);
  return m;
}

// Register-tiled kernel: 4 x 16 output tiles accumulate in eight ymm
// registers across the whole k loop; each B row element is loaded once per
// four A rows, and C touches memory once per tile.
template <bool kAccumulate>
void matmul_tiled(const float* a, const float* b, float* c, size_t m, size_t k, size_t n) {
  size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const float* a0 = a + i * k;
    const float* a1 = a0 + k;
    const float* a2 = a1 + k;
    const float* a3 = a2 + k;
    size_t j = 0;
    for (; j + 16 <= n; j += 16) {
      __m256 c00 = _mm256_setzero_ps(), c01 = _mm256_setzero_ps();
      __m256 c10 = _mm256_setzero_ps(), c11 = _mm256_setzero_ps();
      __m256 c20 = _mm256_setzero_ps(), c21 = _mm256_setzero_ps();
      __m256 c30 = _mm256_setzero_ps(), c31 = _mm256_setzero_ps();
      const float* bp = b + j;
      for (size_t kk = 0; kk < k; ++kk, bp += n) {
        __m256 b0 = _mm256_loadu_ps(bp);
        __m256 b1 = _mm256_loadu_ps(bp + 8);
        __m256 v0 = _mm256_set1_ps(a0[kk]);
        __m256 v1 = _mm256_set1_ps(a1[kk]);
        __m256 v2 = _mm256_set1_ps(a2[kk]);
        __m256 v3 = _mm256_set1_ps(a3[kk]);
        c00 = _mm256_fmadd_ps(v0, b0, c00);
        c01 = _mm256_fmadd_ps(v0, b1, c01);
        c10 = _mm256_fmadd_ps(v1, b0, c10);
        c11 = _mm256_fmadd_ps(v1, b1, c11);
        c20 = _mm256_fmadd_ps(v2, b0, c20);
        c21 = _mm256_fmadd_ps(v2, b1, c21);
        c30 = _mm256_fmadd_ps(v3, b0, c30);
        c31 = _mm256_fmadd_ps(v3, b1, c31);
      }
      auto flush = [&](float* crow, __m256 lo, __m256 hi) {
        if constexpr (kAccumulate) {
          lo = _mm256_add_ps(lo, _mm256_loadu_ps(crow));
          hi = _mm256_add_ps(hi, _mm256_loadu_ps(crow + 8));
        }
        _mm256_storeu_ps(crow, lo);
        _mm256_storeu_ps(crow + 8, hi);
      };
      flush(c + (i + 0) * n + j, c00, c01);
      flush(c + (i + 1) * n + j, c10, c11);
      flush(c + (i + 2) * n + j, c20, c21);
      flush(c + (i + 3) * n + j, c30, c31);
    }
    for (; j + 8 <= n; j += 8) {
      __m256 r0 = _mm256_setzero_ps(), r1 = _mm256_setzero_ps();
      __m256 r2 = _mm256_setzero_ps(), r3 = _mm256_setzero_ps();
      const float* bp = b + j;
      for (size_t kk = 0; kk < k; ++kk, bp += n) {
        __m256 bv = _mm256_loadu_ps(bp);
        r0 = _mm256_fmadd_ps(_mm256_set1_ps(a0[kk]), bv, r0);
        r1 = _mm256_fmadd_ps(_mm256_set1_ps(a1[kk]), bv, r1);
        r2 = _mm256_fmadd_ps(_mm256_set1_ps(a2[kk]), bv, r2);
        r3 = _mm256_fmadd_ps(_mm256_set1_ps(a3[kk]), bv, r3);
      }
      auto flush8 = [&](float* crow, __m256 v) {
        if constexpr (kAccumulate) v = _mm256_add_ps(v, _mm256_loadu_ps(crow));
        _mm256_storeu_ps(crow, v);
      };
      flush8(c + (i + 0) * n + j, r0);
      flush8(c + (i + 1) * n + j, r1);
      flush8(c + (i + 2) * n + j, r2);
      flush8(c + (i + 3) * n + j, r3);
    }
    for (; j < n; ++j) {
      for (size_t r = 0; r < 4; ++r) {
        const float* arow = a + (i + r) * k;
        float acc = 0.0f;
        for (size_t kk = 0; kk < k; ++kk) acc += arow[kk] * b[kk * n + j];
        float* cp = c + (i + r) * n + j;
        *cp = kAccumulate ? *cp + acc : acc;
      }
    }
  }
  for (; i < m; ++i) {
    const float* arow = a + i * k;
    float* crow = c + i * n;
    size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256 acc = _mm256_setzero_ps();
      const float* bp = b + j;
      for (size_t kk = 0; kk < k; ++kk, bp += n) {
        acc = _mm256_fmadd_ps(_mm256_set1_ps(arow[kk]), _mm256_loadu_ps(bp), acc);
      }
      if constexpr (kAccumulate) acc = _mm256_add_ps(acc, _mm256_loadu_ps(crow + j));
      _mm256_storeu_ps(crow + j, acc);
    }
    for (; j < n; ++j) {
      float acc = 0.0f;
      for (size_t kk = 0; kk < k; ++kk) acc += arow[kk] * b[kk * n + j];
      crow[j] = kAccumulate ? crow[j] + acc : acc;
    }
  }
}

void v_matmul(const float* a, const float* b, float* c, size_t m, size_t k,
              size_t n, bool accumulate) {
  if (accumulate) {
    matmul_tiled<true>(a, b, c, m, k, n);
  } else {
    matmul_tiled<false>(a, b, c, m, k, n);
  }
}

// sqrt(|x|)*sign(x)*scale, round half to even (vroundps default mode), clip.
inline __m256 quant_transform(__m256 x, __m256 scale, __m256 lo, __m256 hi) {
  const __m256 sign_mask = _mm256_set1_ps(-0.0f);
  __m256 sign = _mm256_and_ps(x, sign_mask);
  __m256 mag = _mm256_andnot_ps(sign_mask, x);
  __m256 root = _mm256_sqrt_ps(mag);
  __m256 sat = _mm256_or_ps(_mm256_mul_ps(root, scale), sign);
  __m256 snapped = _mm256_round_ps(sat, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  return _mm256_min_ps(_mm256_max_ps(snapped, lo), hi);
}

void v_quantize_pow2_i8(const float* x, int8_t* out, size_t n, float scale,
                        int32_t min_value, int32_t max_value) {
  const __m256 sv = _mm256_set1_ps(scale);
  const __m256 lo = _mm256_set1_ps(static_cast<float>(min_value));
  const __m256 hi = _mm256_set1_ps(static_cast<float>(max_value));
  size_t i = 0;
  alignas(32) int32_t tmp[8];
  for (; i + 8 <= n; i += 8) {
    __m256 q = quant_transform(_mm256_loadu_ps(x + i), sv, lo, hi);
    _mm256_store_si256(reinterpret_cast<__m256i*>(tmp), _mm256_cvtps_epi32(q));
    for (int j = 0; j < 8; ++j) out[i + j] = static_cast<int8_t>(tmp[j]);
  }
  for (; i < n; ++i) {
    float root = std::sqrt(std::fabs(x[i]));
    float snapped = std::nearbyintf(std::copysignf(root * scale, x[i]));
    snapped = std::min(std::max(snapped, static_cast<float>(min_value)),
                       static_cast<float>(max_value));
    out[i] = static_cast<int8_t>(snapped);
  }
}

void v_dequantize_pow2_i8(const int8_t* y, float* out, size_t n, float scale) {
  const __m256 sv = _mm256_set1_ps(scale);
  const __m256 sign_mask = _mm256_set1_ps(-0.0f);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m128i bytes = _mm_loadl_epi64(reinterpret_cast<const __m128i*>(y + i));
    __m256i i32 = _mm256_cvtepi8_epi32(bytes);
    __m256 r = _mm256_div_ps(_mm256_cvtepi32_ps(i32), sv);
    __m256 sign = _mm256_and_ps(r, sign_mask);
    __m256 sq = _mm256_mul_ps(r, r);
    _mm256_storeu_ps(out + i, _mm256_or_ps(sq, sign));
  }
  for (; i < n; ++i) {
    float r = static_cast<float>(y[i]) / scale;
    out[i] = std::copysignf(r * r, r);
  }
}

void v_quantize_pow2_i16(const float* x, int16_t* out, size_t n, float scale,
                         int32_t min_value, int32_t max_value) {
  const __m256 sv = _mm256_set1_ps(scale);
  const __m256 lo = _mm256_set1_ps(static_cast<float>(min_value));
  const __m256 hi = _mm256_set1_ps(static_cast<float>(max_value));
  size_t i = 0;
  alignas(32) int32_t tmp[8];
  for (; i + 8 <= n; i += 8) {
    __m256 q = quant_transform(_mm256_loadu_ps(x + i), sv, lo, hi);
    _mm256_store_si256(reinterpret_cast<__m256i*>(tmp), _mm256_cvtps_epi32(q));
    for (int j = 0; j < 8; ++j) out[i + j] = static_cast<int16_t>(tmp[j]);
  }
  for (; i < n; ++i) {
    float root = std::sqrt(std::fabs(x[i]));
    float snapped = std::nearbyintf(std::copysignf(root * scale, x[i]));
    snapped = std::min(std::max(snapped, static_cast<float>(min_value)),
                       static_cast<float>(max_value));
    out[i] = static_cast<int16_t>(snapped);
  }
}

void v_dequantize_pow2_i16(const int16_t* y, float* out, size_t n, float scale) {
  const __m256 sv = _mm256_set1_ps(scale);
  const __m256 sign_mask = _mm256_set1_ps(-0.0f);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m128i words = _mm_loadu_si128(reinterpret_cast<const __m128i*>(y + i));
    __m256i i32 = _mm256_cvtepi16_epi32(words);
    __m256 r = _mm256_div_ps(_mm256_cvtepi32_ps(i32), sv);
    __m256 sign = _mm256_and_ps(r, sign_mask);
    __m256 sq = _mm256_mul_ps(r, r);
    _mm256_storeu_ps(out + i, _mm256_or_ps(sq, sign));
  }
  for (; i < n; ++i) {
    float r = static_cast<float>(y[i]) / scale;
    out[i] = std::copysignf(r * r, r);
  }
}

}  // namespace

const Backend* avx2_backend() {
  static const Backend backend = {
      "avx2",
      v_add,
      v_sub,
      v_mul,
      v_axpy,
      v_scale,
      v_acc_add,
      v_acc_axpy,
      v_dot,
      v_sum,
      v_max,
      v_matmul,
      v_quantize_pow2_i8,
      v_dequantize_pow2_i8,
      v_quantize_pow2_i16,
      v_dequantize_pow2_i16,
  };
  static const bool supported =
      __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? &backend : nullptr;
}

}  // namespace terra::kernels

#else  // !TERRA_BUILD_AVX2

namespace terra::kernels {
const Backend* avx2_backend() { return nullptr; }
}  // namespace terra::kernels

#endif
