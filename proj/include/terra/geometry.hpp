#pragma once

#include <cstdint>
#include <vector>

#include "terra/rng.hpp"

namespace terra::geom {

// Embeddings are points on the unit sphere in 64 dimensions.
inline constexpr int kEmbedDim = 64;

// Scales v to unit L2 norm; rejects (near-)zero vectors.
std::vector<float> normalize(const std::vector<float>& v);
void normalize_inplace(float* v, size_t dim);
double norm(const float* v, size_t dim);
double dot(const float* a, const float* b, size_t dim);

struct VmfParams {
  std::vector<float> mu;  // unit mean direction
  double kappa = 0.0;     // concentration, >= 0 and finite

  void validate() const;
};

// Marginal of the component along mu for a von Mises-Fisher distribution
// (Wood's rejection scheme). kappa = 0 reduces to the uniform sphere
// marginal; exposed separately so tensor-level sampling can reuse it.
double vmf_tangent_weight(double kappa, size_t dim, Rng& rng);

// Draw from VMF(mu, kappa): tangent weight via Wood, orthogonal direction
// uniform in mu's complement. Deterministic for a fixed generator state.
std::vector<float> vmf_sample(const VmfParams& params, Rng& rng);

enum class UniformityMode {
  mean,  // batch-size independent statistic (default)
  sum,   // raw sum over batch pairs, as a configuration switch
};

// Mean (or sum) of |u_i . u_{i+1 mod B}| over a batch rotated by one
// position: a necessary condition for uniformity on the sphere is that this
// tends to the uniform-pair expectation.
double batch_uniformity(const std::vector<std::vector<float>>& batch,
                        UniformityMode mode = UniformityMode::mean);

// (1 - a . b) / 2: 0 for identical unit vectors, 1 for antipodal.
double change_magnitude(const std::vector<float>& before, const std::vector<float>& after);

// ---------------------------------------------------------------------------
// Release quantization codec
// ---------------------------------------------------------------------------

struct QuantizationParams {
  double power = 2.0;
  double scale = 127.5;
  int32_t min_value = -127;
  int32_t max_value = 127;
  int width_bits = 8;  // 8 or 16, signed

  void validate() const;

  static QuantizationParams int8_pow2() { return {2.0, 127.5, -127, 127, 8}; }
  static QuantizationParams int16_pow2() { return {2.0, 32767.5, -32767, 32767, 16}; }
};

// round(sign(x) * |x|^(1/power) * scale), half to even, clipped to
// [min_value, max_value]. Arithmetic is float32, matching the shipped codec.
int32_t quantize(double x, const QuantizationParams& params);

// sign(y) * (|y| / scale)^power for y in [min_value, max_value].
double dequantize(int32_t y, const QuantizationParams& params);

// Array forms used by the tile codec; power == 2 runs on the SIMD kernels
// and agrees bit-exactly with the scalar ops above.
void quantize_array_i8(const float* x, int8_t* out, size_t n, const QuantizationParams& params);
void dequantize_array_i8(const int8_t* y, float* out, size_t n, const QuantizationParams& params);
void quantize_array_i16(const float* x, int16_t* out, size_t n, const QuantizationParams& params);
void dequantize_array_i16(const int16_t* y, float* out, size_t n,
                          const QuantizationParams& params);

// ---------------------------------------------------------------------------
// Overtiling geometry
// ---------------------------------------------------------------------------

struct RectM {
  double x = 0, y = 0;       // lower-left corner, meters
  double width = 0, height = 0;

  double x1() const { return x + width; }
  double y1() const { return y + height; }
};

struct TilePlanEntry {
  RectM inference;  // buffered tile handed to the model
  RectM render;     // trimmed interior written to the output mosaic
};

// Tiles a zone extent with `tile_m` squares, buffers each by `buffer_m` per
// side for inference and trims `trim_m` per side before rendering. With
// trim < buffer the rendered tiles overlap at seams by 2*(buffer - trim);
// the plan reports the geometry rather than resolving the overlap.
std::vector<TilePlanEntry> tile_plan(const RectM& zone_extent, double tile_m = 960.0,
                                     double buffer_m = 160.0, double trim_m = 80.0);

}  // namespace terra::geom
