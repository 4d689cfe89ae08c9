#pragma once

#include <string>
#include <vector>

#include "terra/geometry.hpp"

namespace terra::geom {

enum class TileDType : uint8_t { f32 = 0, i8 = 1, i16 = 2 };

// Embedding-field tile file: header (magic, version, origin in meters, grid
// extents, cell size, embedding dim, dtype, quantization params), then the
// row-major payload, little-endian throughout.
inline constexpr char kTileMagic[4] = {'T', 'F', 'T', 'L'};
inline constexpr uint32_t kTileVersion = 1;

struct EmbeddingTile {
  double origin_x = 0.0;  // meters
  double origin_y = 0.0;
  double cell_size_m = 0.0;
  uint32_t grid_w = 0;
  uint32_t grid_h = 0;
  uint32_t dim = kEmbedDim;
  TileDType dtype = TileDType::i8;
  QuantizationParams quant;  // meaningful for integer dtypes

  std::vector<float> f32;   // populated when dtype == f32
  std::vector<int8_t> i8;   // populated when dtype == i8
  std::vector<int16_t> i16;

  size_t cells() const { return static_cast<size_t>(grid_w) * grid_h; }
  size_t values() const { return cells() * dim; }

  // Dequantized (or copied) float payload.
  std::vector<float> to_float() const;
};

// Quantizes (for integer dtypes) and writes a field of `grid_w*grid_h`
// cells, each `dim` floats.
void write_tile(const std::string& path, const std::vector<float>& field, uint32_t grid_w,
                uint32_t grid_h, uint32_t dim, double origin_x, double origin_y,
                double cell_size_m, TileDType dtype,
                const QuantizationParams& quant = QuantizationParams::int8_pow2());

EmbeddingTile read_tile(const std::string& path);

}  // namespace terra::geom
