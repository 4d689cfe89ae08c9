#include "terra/geometry.hpp"

#include <cmath>

#include "terra/kernels.hpp"

namespace terra::geom {

double norm(const float* v, size_t dim) {
  double acc = 0.0;
  for (size_t i = 0; i < dim; ++i) acc += static_cast<double>(v[i]) * v[i];
  return std::sqrt(acc);
}

double dot(const float* a, const float* b, size_t dim) {
  double acc = 0.0;
  for (size_t i = 0; i < dim; ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

void normalize_inplace(float* v, size_t dim) {
  double n = norm(v, dim);
  check_input(n > 1e-12, "normalize: zero vector");
  auto inv = static_cast<float>(1.0 / n);
  for (size_t i = 0; i < dim; ++i) v[i] *= inv;
}

std::vector<float> normalize(const std::vector<float>& v) {
  std::vector<float> out = v;
  normalize_inplace(out.data(), out.size());
  return out;
}

void VmfParams::validate() const {
  check_input(!mu.empty(), "vmf: empty mean direction");
  check_input(std::isfinite(kappa) && kappa >= 0.0, "vmf: kappa must be finite and >= 0");
  double n = norm(mu.data(), mu.size());
  check_input(std::abs(n - 1.0) < 1e-4, "vmf: mean direction must be unit norm");
}

double vmf_tangent_weight(double kappa, size_t dim, Rng& rng) {
  check_input(dim >= 2, "vmf: dimension must be at least 2");
  double dm1 = static_cast<double>(dim) - 1.0;
  if (kappa == 0.0) {
    // uniform sphere marginal
    return 1.0 - 2.0 * rng.beta(dm1 / 2.0, dm1 / 2.0);
  }
  // Wood's scheme; b written in the catastrophic-cancellation-free form.
  double b = dm1 / (2.0 * kappa + std::sqrt(4.0 * kappa * kappa + dm1 * dm1));
  double x0 = (1.0 - b) / (1.0 + b);
  double c = kappa * x0 + dm1 * std::log(1.0 - x0 * x0);
  for (;;) {
    double z = rng.beta(dm1 / 2.0, dm1 / 2.0);
    double u;
    do {
      u = rng.uniform();
    } while (u <= 0.0);
    double w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
    if (kappa * w + dm1 * std::log(1.0 - x0 * w) - c >= std::log(u)) return w;
  }
}

std::vector<float> vmf_sample(const VmfParams& params, Rng& rng) {
  params.validate();
  size_t dim = params.mu.size();
  double w = vmf_tangent_weight(params.kappa, dim, rng);

  // Uniform direction in mu's orthogonal complement: project a Gaussian
  // draw off mu and renormalize.
  std::vector<double> tangent(dim);
  double tnorm = 0.0;
  do {
    for (auto& t : tangent) t = rng.normal();
    double along = 0.0;
    for (size_t i = 0; i < dim; ++i) along += tangent[i] * params.mu[i];
    tnorm = 0.0;
    for (size_t i = 0; i < dim; ++i) {
      tangent[i] -= along * params.mu[i];
      tnorm += tangent[i] * tangent[i];
    }
    tnorm = std::sqrt(tnorm);
  } while (tnorm < 1e-12);

  double tfac = std::sqrt(std::max(0.0, 1.0 - w * w)) / tnorm;
  std::vector<float> out(dim);
  for (size_t i = 0; i < dim; ++i) {
    out[i] = static_cast<float>(w * params.mu[i] + tfac * tangent[i]);
  }
  normalize_inplace(out.data(), dim);
  return out;
}

double batch_uniformity(const std::vector<std::vector<float>>& batch, UniformityMode mode) {
  check_input(batch.size() >= 2, "batch_uniformity: need at least 2 embeddings");
  size_t b = batch.size();
  double total = 0.0;
  for (size_t i = 0; i < b; ++i) {
    const auto& u = batch[i];
    const auto& rotated = batch[(i + 1) % b];
    check_input(u.size() == rotated.size(), "batch_uniformity: dimension mismatch");
    total += std::abs(dot(u.data(), rotated.data(), u.size()));
  }
  return mode == UniformityMode::mean ? total / static_cast<double>(b) : total;
}

double change_magnitude(const std::vector<float>& before, const std::vector<float>& after) {
  check_input(before.size() == after.size(), "change_magnitude: dimension mismatch");
  return (1.0 - dot(before.data(), after.data(), before.size())) / 2.0;
}

// ---------------------------------------------------------------------------
// Quantization
// ---------------------------------------------------------------------------

void QuantizationParams::validate() const {
  check_input(power > 0.0 && std::isfinite(power), "quantization: power must be positive");
  check_input(scale > 0.0 && std::isfinite(scale), "quantization: scale must be positive");
  check_input(min_value == -max_value, "quantization: min_value must equal -max_value");
  check_input(scale == static_cast<double>(max_value) + 0.5,
              "quantization: scale must be max_value + 0.5");
  check_input(width_bits == 8 || width_bits == 16, "quantization: width must be 8 or 16 bits");
}

int32_t quantize(double x, const QuantizationParams& params) {
  check_input(std::isfinite(x), "quantize: non-finite input");
  auto xf = static_cast<float>(x);
  float root = params.power == 2.0
                   ? std::sqrt(std::fabs(xf))
                   : std::pow(std::fabs(xf), static_cast<float>(1.0 / params.power));
  float snapped = std::nearbyintf(std::copysignf(root * static_cast<float>(params.scale), xf));
  snapped = std::min(std::max(snapped, static_cast<float>(params.min_value)),
                     static_cast<float>(params.max_value));
  return static_cast<int32_t>(snapped);
}

double dequantize(int32_t y, const QuantizationParams& params) {
  check_input(y >= params.min_value && y <= params.max_value, "dequantize: value out of range");
  float r = static_cast<float>(y) / static_cast<float>(params.scale);
  float mag = params.power == 2.0 ? r * r
                                  : std::pow(std::fabs(r), static_cast<float>(params.power));
  return std::copysignf(mag, r);
}

void quantize_array_i8(const float* x, int8_t* out, size_t n, const QuantizationParams& params) {
  check_input(params.width_bits == 8, "quantize_array_i8: params are not 8-bit");
  for (size_t i = 0; i < n; ++i) {
    check_input(std::isfinite(x[i]), "quantize: non-finite input");
  }
  if (params.power == 2.0) {
    kernels::active().quantize_pow2_i8(x, out, n, static_cast<float>(params.scale),
                                       params.min_value, params.max_value);
    return;
  }
  for (size_t i = 0; i < n; ++i) out[i] = static_cast<int8_t>(quantize(x[i], params));
}

void dequantize_array_i8(const int8_t* y, float* out, size_t n,
                         const QuantizationParams& params) {
  if (params.power == 2.0) {
    kernels::active().dequantize_pow2_i8(y, out, n, static_cast<float>(params.scale));
    return;
  }
  for (size_t i = 0; i < n; ++i) out[i] = static_cast<float>(dequantize(y[i], params));
}

void quantize_array_i16(const float* x, int16_t* out, size_t n,
                        const QuantizationParams& params) {
  check_input(params.width_bits == 16, "quantize_array_i16: params are not 16-bit");
  for (size_t i = 0; i < n; ++i) {
    check_input(std::isfinite(x[i]), "quantize: non-finite input");
  }
  if (params.power == 2.0) {
    kernels::active().quantize_pow2_i16(x, out, n, static_cast<float>(params.scale),
                                        params.min_value, params.max_value);
    return;
  }
  for (size_t i = 0; i < n; ++i) out[i] = static_cast<int16_t>(quantize(x[i], params));
}

void dequantize_array_i16(const int16_t* y, float* out, size_t n,
                          const QuantizationParams& params) {
  if (params.power == 2.0) {
    kernels::active().dequantize_pow2_i16(y, out, n, static_cast<float>(params.scale));
    return;
  }
  for (size_t i = 0; i < n; ++i) out[i] = static_cast<float>(dequantize(y[i], params));
}

// ---------------------------------------------------------------------------
// Overtiling
// ---------------------------------------------------------------------------

std::vector<TilePlanEntry> tile_plan(const RectM& zone_extent, double tile_m, double buffer_m,
                                     double trim_m) {
  check_input(zone_extent.width > 0 && zone_extent.height > 0,
              "tile_plan: extent must be positive");
  check_input(tile_m > 0, "tile_plan: tile size must be positive");
  check_input(buffer_m >= 0 && trim_m >= 0, "tile_plan: negative margins");
  check_input(tile_m + 2.0 * (buffer_m - trim_m) > 0, "tile_plan: trim erases the tile");

  auto nx = static_cast<int64_t>(std::ceil(zone_extent.width / tile_m));
  auto ny = static_cast<int64_t>(std::ceil(zone_extent.height / tile_m));
  std::vector<TilePlanEntry> plan;
  plan.reserve(static_cast<size_t>(nx * ny));
  for (int64_t j = 0; j < ny; ++j) {
    for (int64_t i = 0; i < nx; ++i) {
      double tx = zone_extent.x + static_cast<double>(i) * tile_m;
      double ty = zone_extent.y + static_cast<double>(j) * tile_m;
      TilePlanEntry entry;
      entry.inference = {tx - buffer_m, ty - buffer_m, tile_m + 2 * buffer_m,
                         tile_m + 2 * buffer_m};
      double grow = buffer_m - trim_m;
      entry.render = {tx - grow, ty - grow, tile_m + 2 * grow, tile_m + 2 * grow};
      plan.push_back(entry);
    }
  }
  return plan;
}

}  // namespace terra::geom
