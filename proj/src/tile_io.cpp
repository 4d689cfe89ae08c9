#include "terra/tile_io.hpp"

#include <cstring>
#include <fstream>

namespace terra::geom {

namespace {

template <class T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) raise_io("tile: truncated file");
  return v;
}

}  // namespace

std::vector<float> EmbeddingTile::to_float() const {
  std::vector<float> out(values());
  switch (dtype) {
    case TileDType::f32:
      out = f32;
      break;
    case TileDType::i8:
      dequantize_array_i8(i8.data(), out.data(), out.size(), quant);
      break;
    case TileDType::i16:
      dequantize_array_i16(i16.data(), out.data(), out.size(), quant);
      break;
  }
  return out;
}

void write_tile(const std::string& path, const std::vector<float>& field, uint32_t grid_w,
                uint32_t grid_h, uint32_t dim, double origin_x, double origin_y,
                double cell_size_m, TileDType dtype, const QuantizationParams& quant) {
  size_t values = static_cast<size_t>(grid_w) * grid_h * dim;
  check_input(field.size() == values, "tile: field size does not match grid");
  if (dtype != TileDType::f32) quant.validate();
  if (dtype == TileDType::i8) check_input(quant.width_bits == 8, "tile: dtype/params mismatch");
  if (dtype == TileDType::i16) check_input(quant.width_bits == 16, "tile: dtype/params mismatch");

  std::ofstream out(path, std::ios::binary);
  if (!out) raise_io("tile: cannot open for writing: " + path);
  out.write(kTileMagic, 4);
  write_pod<uint32_t>(out, kTileVersion);
  write_pod<double>(out, origin_x);
  write_pod<double>(out, origin_y);
  write_pod<double>(out, cell_size_m);
  write_pod<uint32_t>(out, grid_w);
  write_pod<uint32_t>(out, grid_h);
  write_pod<uint32_t>(out, dim);
  write_pod<uint8_t>(out, static_cast<uint8_t>(dtype));
  write_pod<double>(out, quant.power);
  write_pod<double>(out, quant.scale);
  write_pod<int32_t>(out, quant.min_value);
  write_pod<int32_t>(out, quant.max_value);
  write_pod<int32_t>(out, quant.width_bits);

  switch (dtype) {
    case TileDType::f32:
      out.write(reinterpret_cast<const char*>(field.data()),
                static_cast<std::streamsize>(values * sizeof(float)));
      break;
    case TileDType::i8: {
      std::vector<int8_t> q(values);
      quantize_array_i8(field.data(), q.data(), values, quant);
      out.write(reinterpret_cast<const char*>(q.data()), static_cast<std::streamsize>(values));
      break;
    }
    case TileDType::i16: {
      std::vector<int16_t> q(values);
      quantize_array_i16(field.data(), q.data(), values, quant);
      out.write(reinterpret_cast<const char*>(q.data()),
                static_cast<std::streamsize>(values * sizeof(int16_t)));
      break;
    }
  }
  if (!out) raise_io("tile: write failed: " + path);
}

EmbeddingTile read_tile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise_io("tile: cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kTileMagic, 4) != 0) raise_io("tile: bad magic in " + path);
  auto version = read_pod<uint32_t>(in);
  if (version != kTileVersion) raise_io("tile: unsupported version");

  EmbeddingTile tile;
  tile.origin_x = read_pod<double>(in);
  tile.origin_y = read_pod<double>(in);
  tile.cell_size_m = read_pod<double>(in);
  tile.grid_w = read_pod<uint32_t>(in);
  tile.grid_h = read_pod<uint32_t>(in);
  tile.dim = read_pod<uint32_t>(in);
  tile.dtype = static_cast<TileDType>(read_pod<uint8_t>(in));
  tile.quant.power = read_pod<double>(in);
  tile.quant.scale = read_pod<double>(in);
  tile.quant.min_value = read_pod<int32_t>(in);
  tile.quant.max_value = read_pod<int32_t>(in);
  tile.quant.width_bits = read_pod<int32_t>(in);

  size_t values = tile.values();
  switch (tile.dtype) {
    case TileDType::f32:
      tile.f32.resize(values);
      in.read(reinterpret_cast<char*>(tile.f32.data()),
              static_cast<std::streamsize>(values * sizeof(float)));
      break;
    case TileDType::i8:
      tile.i8.resize(values);
      in.read(reinterpret_cast<char*>(tile.i8.data()), static_cast<std::streamsize>(values));
      break;
    case TileDType::i16:
      tile.i16.resize(values);
      in.read(reinterpret_cast<char*>(tile.i16.data()),
              static_cast<std::streamsize>(values * sizeof(int16_t)));
      break;
    default:
      raise_io("tile: unknown dtype");
  }
  if (!in) raise_io("tile: truncated payload in " + path);
  return tile;
}

}  // namespace terra::geom
