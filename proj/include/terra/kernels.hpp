#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace terra::kernels {

// Data-parallel inner loops behind a dispatch table. The scalar backend is
// the reference implementation; AVX2 and NEON variants are selected at
// runtime and equivalence-tested against it. Results may differ from scalar
// by reassociation rounding only; selection is stable for a whole process,
// keeping runs bit-reproducible on one platform.
struct Backend {
  const char* name;

  void (*add)(const float* a, const float* b, float* out, size_t n);
  void (*sub)(const float* a, const float* b, float* out, size_t n);
  void (*mul)(const float* a, const float* b, float* out, size_t n);
  // out = alpha * x + y
  void (*axpy)(float alpha, const float* x, const float* y, float* out, size_t n);
  void (*scale)(float alpha, const float* x, float* out, size_t n);
  // acc += x
  void (*acc_add)(float* acc, const float* x, size_t n);
  // acc += alpha * x
  void (*acc_axpy)(float* acc, float alpha, const float* x, size_t n);
  float (*dot)(const float* a, const float* b, size_t n);
  float (*sum)(const float* x, size_t n);
  float (*max)(const float* x, size_t n);

  // C (m x n) = A (m x k) * B (k x n), row-major. accumulate adds into C.
  void (*matmul)(const float* a, const float* b, float* c, size_t m, size_t k,
                 size_t n, bool accumulate);

  // Power-2 quantization codec fast paths (round half to even, clip).
  void (*quantize_pow2_i8)(const float* x, int8_t* out, size_t n, float scale,
                           int32_t min_value, int32_t max_value);
  void (*dequantize_pow2_i8)(const int8_t* y, float* out, size_t n, float scale);
  void (*quantize_pow2_i16)(const float* x, int16_t* out, size_t n, float scale,
                            int32_t min_value, int32_t max_value);
  void (*dequantize_pow2_i16)(const int16_t* y, float* out, size_t n, float scale);
};

// Reference implementation; always available.
const Backend& scalar_backend();

// Vector backends; nullptr when the CPU or build does not support them.
const Backend* avx2_backend();
const Backend* neon_backend();

// Backend in use for this process. Chosen once: TERRA_SIMD env var
// (scalar|avx2|neon|auto) if set, otherwise the widest supported variant.
const Backend& active();

// All usable backends (scalar first), for equivalence tests.
std::vector<const Backend*> available_backends();

}  // namespace terra::kernels
