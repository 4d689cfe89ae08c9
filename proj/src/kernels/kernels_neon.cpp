// NEON variants for aarch64. vrndnq_f32 rounds half to even, matching the
// scalar reference's nearbyint under the default rounding mode.

#include "terra/kernels.hpp"

#if defined(__aarch64__)
#define TERRA_BUILD_NEON 1
#else
#define TERRA_BUILD_NEON 0
#endif

#if TERRA_BUILD_NEON

#include <arm_neon.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace terra::kernels {
namespace {

void v_add(const float* a, const float* b, float* out, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(out + i, vaddq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void v_sub(const float* a, const float* b, float* out, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(out + i, vsubq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void v_mul(const float* a, const float* b, float* out, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(out + i, vmulq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void v_axpy(float alpha, const float* x, const float* y, float* out, size_t n) {
  float32x4_t av = vdupq_n_f32(alpha);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    vst1q_f32(out + i, vfmaq_f32(vld1q_f32(y + i), av, vld1q_f32(x + i)));
  }
  for (; i < n; ++i) out[i] = alpha * x[i] + y[i];
}

void v_scale(float alpha, const float* x, float* out, size_t n) {
  float32x4_t av = vdupq_n_f32(alpha);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(out + i, vmulq_f32(av, vld1q_f32(x + i)));
  for (; i < n; ++i) out[i] = alpha * x[i];
}

void v_acc_add(float* acc, const float* x, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(acc + i, vaddq_f32(vld1q_f32(acc + i), vld1q_f32(x + i)));
  for (; i < n; ++i) acc[i] += x[i];
}

void v_acc_axpy(float* acc, float alpha, const float* x, size_t n) {
  float32x4_t av = vdupq_n_f32(alpha);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    vst1q_f32(acc + i, vfmaq_f32(vld1q_f32(acc + i), av, vld1q_f32(x + i)));
  }
  for (; i < n; ++i) acc[i] += alpha * x[i];
}

float v_dot(const float* a, const float* b, size_t n) {
  float32x4_t acc = vdupq_n_f32(0.0f);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = vfmaq_f32(acc, vld1q_f32(a + i), vld1q_f32(b + i));
  float total = vaddvq_f32(acc);
  for (; i < n; ++i) total += a[i] * b[i];
  return total;
}

float v_sum(const float* x, size_t n) {
  float32x4_t acc = vdupq_n_f32(0.0f);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = vaddq_f32(acc, vld1q_f32(x + i));
  float total = vaddvq_f32(acc);
  for (; i < n; ++i) total += x[i];
  return total;
}

float v_max(const float* x, size_t n) {
  if (n < 4) {
    float m = x[0];
    for (size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    return m;
  }
  float32x4_t acc = vld1q_f32(x);
  size_t i = 4;
  for (; i + 4 <= n; i += 4) acc = vmaxq_f32(acc, vld1q_f32(x + i));
  float m = vmaxvq_f32(acc);
  for (; i < n; ++i) m = std::max(m, x[i]);
  return m;
}

void v_matmul(const float* a, const float* b, float* c, size_t m, size_t k,
              size_t n, bool accumulate) {
  if (!accumulate) std::memset(c, 0, m * n * sizeof(float));
  for (size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    float* crow = c + i * n;
    for (size_t kk = 0; kk < k; ++kk) {
      float32x4_t av = vdupq_n_f32(arow[kk]);
      const float* brow = b + kk * n;
      size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        vst1q_f32(crow + j, vfmaq_f32(vld1q_f32(crow + j), av, vld1q_f32(brow + j)));
      }
      for (; j < n; ++j) crow[j] += arow[kk] * brow[j];
    }
  }
}

inline float32x4_t quant_transform(float32x4_t x, float32x4_t scale,
                                   float32x4_t lo, float32x4_t hi) {
  uint32x4_t sign = vandq_u32(vreinterpretq_u32_f32(x), vdupq_n_u32(0x80000000u));
  float32x4_t mag = vabsq_f32(x);
  float32x4_t root = vsqrtq_f32(mag);
  float32x4_t sat = vreinterpretq_f32_u32(
      vorrq_u32(vreinterpretq_u32_f32(vmulq_f32(root, scale)), sign));
  float32x4_t snapped = vrndnq_f32(sat);
  return vminq_f32(vmaxq_f32(snapped, lo), hi);
}

void v_quantize_pow2_i8(const float* x, int8_t* out, size_t n, float scale,
                        int32_t min_value, int32_t max_value) {
  float32x4_t sv = vdupq_n_f32(scale);
  float32x4_t lo = vdupq_n_f32(static_cast<float>(min_value));
  float32x4_t hi = vdupq_n_f32(static_cast<float>(max_value));
  size_t i = 0;
  int32_t tmp[4];
  for (; i + 4 <= n; i += 4) {
    float32x4_t q = quant_transform(vld1q_f32(x + i), sv, lo, hi);
    vst1q_s32(tmp, vcvtnq_s32_f32(q));
    for (int j = 0; j < 4; ++j) out[i + j] = static_cast<int8_t>(tmp[j]);
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
  size_t i = 0;
  for (; i < n; ++i) {
    float r = static_cast<float>(y[i]) / scale;
    out[i] = std::copysignf(r * r, r);
  }
}

void v_quantize_pow2_i16(const float* x, int16_t* out, size_t n, float scale,
                         int32_t min_value, int32_t max_value) {
  float32x4_t sv = vdupq_n_f32(scale);
  float32x4_t lo = vdupq_n_f32(static_cast<float>(min_value));
  float32x4_t hi = vdupq_n_f32(static_cast<float>(max_value));
  size_t i = 0;
  int32_t tmp[4];
  for (; i + 4 <= n; i += 4) {
    float32x4_t q = quant_transform(vld1q_f32(x + i), sv, lo, hi);
    vst1q_s32(tmp, vcvtnq_s32_f32(q));
    for (int j = 0; j < 4; ++j) out[i + j] = static_cast<int16_t>(tmp[j]);
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
  for (size_t i = 0; i < n; ++i) {
    float r = static_cast<float>(y[i]) / scale;
    out[i] = std::copysignf(r * r, r);
  }
}

}  // namespace

const Backend* neon_backend() {
  static const Backend backend = {
      "neon",
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
  return &backend;
}

}  // namespace terra::kernels

#else  // !TERRA_BUILD_NEON

namespace terra::kernels {
const Backend* neon_backend() { return nullptr; }
}  // namespace terra::kernels

#endif
