#include <algorithm>
#include <cmath>
#include <cstring>

#include "terra/kernels.hpp"

// Reference kernels. Written for clarity; every vector backend must agree
// with these within reassociation rounding.

namespace terra::kernels {
namespace {

void s_add(const float* a, const float* b, float* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void s_sub(const float* a, const float* b, float* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void s_mul(const float* a, const float* b, float* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void s_axpy(float alpha, const float* x, const float* y, float* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = alpha * x[i] + y[i];
}

void s_scale(float alpha, const float* x, float* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

void s_acc_add(float* acc, const float* x, size_t n) {
  for (size_t i = 0; i < n; ++i) acc[i] += x[i];
}

void s_acc_axpy(float* acc, float alpha, const float* x, size_t n) {
  for (size_t i = 0; i < n; ++i) acc[i] += alpha * x[i];
}

float s_dot(const float* a, const float* b, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * b[i];
  return static_cast<float>(acc);
}

float s_sum(const float* x, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += x[i];
  return static_cast<float>(acc);
}

float s_max(const float* x, size_t n) {
  float m = x[0];
  for (size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
  return m;
}

void s_matmul(const float* a, const float* b, float* c, size_t m, size_t k,
              size_t n, bool accumulate) {
  if (!accumulate) std::memset(c, 0, m * n * sizeof(float));
  for (size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    float* crow = c + i * n;
    for (size_t kk = 0; kk < k; ++kk) {
      float av = arow[kk];
      const float* brow = b + kk * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void s_quantize_pow2_i8(const float* x, int8_t* out, size_t n, float scale,
                        int32_t min_value, int32_t max_value) {
  for (size_t i = 0; i < n; ++i) {
    float root = std::sqrt(std::fabs(x[i]));
    float snapped = std::nearbyintf(std::copysignf(root * scale, x[i]));
    snapped = std::min(std::max(snapped, static_cast<float>(min_value)),
                       static_cast<float>(max_value));
    out[i] = static_cast<int8_t>(snapped);
  }
}

void s_dequantize_pow2_i8(const int8_t* y, float* out, size_t n, float scale) {
  for (size_t i = 0; i < n; ++i) {
    float r = static_cast<float>(y[i]) / scale;
    out[i] = std::copysignf(r * r, r);
  }
}

void s_quantize_pow2_i16(const float* x, int16_t* out, size_t n, float scale,
                         int32_t min_value, int32_t max_value) {
  for (size_t i = 0; i < n; ++i) {
    float root = std::sqrt(std::fabs(x[i]));
    float snapped = std::nearbyintf(std::copysignf(root * scale, x[i]));
    snapped = std::min(std::max(snapped, static_cast<float>(min_value)),
                       static_cast<float>(max_value));
    out[i] = static_cast<int16_t>(snapped);
  }
}

void s_dequantize_pow2_i16(const int16_t* y, float* out, size_t n, float scale) {
  for (size_t i = 0; i < n; ++i) {
    float r = static_cast<float>(y[i]) / scale;
    out[i] = std::copysignf(r * r, r);
  }
}

}  // namespace

const Backend& scalar_backend() {
  static const Backend backend = {
      "scalar",
      s_add,
      s_sub,
      s_mul,
      s_axpy,
      s_scale,
      s_acc_add,
      s_acc_axpy,
      s_dot,
      s_sum,
      s_max,
      s_matmul,
      s_quantize_pow2_i8,
      s_dequantize_pow2_i8,
      s_quantize_pow2_i16,
      s_dequantize_pow2_i16,
  };
  return backend;
}

}  // namespace terra::kernels
