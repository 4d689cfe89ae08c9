#include <cmath>
#include <cstring>
#include <fstream>

#include "terra/eval_io.hpp"

namespace terra::eval {

TableSource::TableSource(std::vector<Embedding> rows, uint32_t dim)
    : rows_(std::move(rows)), dim_(dim) {
  for (const auto& r : rows_) {
    check_input(r.size() == dim_ || r.size() == 2 * static_cast<size_t>(dim_),
                "table: row width must be dim or 2*dim");
  }
}

Embedding TableSource::embedding(const EvalRow& row, size_t row_index) const {
  (void)row;
  check_input(row_index < rows_.size(), "table: row index out of range");
  const auto& r = rows_[row_index];
  check_input(r.size() == dim_, "table: row holds a change pair, not a single embedding");
  return r;
}

EmbeddingPair TableSource::pair(const EvalRow& row, size_t row_index) const {
  (void)row;
  check_input(row_index < rows_.size(), "table: row index out of range");
  const auto& r = rows_[row_index];
  check_input(r.size() == 2 * static_cast<size_t>(dim_),
              "table: row does not hold a before/after pair");
  EmbeddingPair p;
  p.before.assign(r.begin(), r.begin() + dim_);
  p.after.assign(r.begin() + dim_, r.end());
  return p;
}

void write_table(const std::string& path, const std::vector<Embedding>& rows, uint32_t dim) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise_io("table: cannot open for writing: " + path);
  out.write(kTableMagic, 4);
  uint32_t version = kTableVersion;
  out.write(reinterpret_cast<const char*>(&version), 4);
  auto count = static_cast<uint64_t>(rows.size());
  out.write(reinterpret_cast<const char*>(&count), 8);
  out.write(reinterpret_cast<const char*>(&dim), 4);
  for (const auto& r : rows) {
    check_input(r.size() == dim || r.size() == 2 * static_cast<size_t>(dim),
                "table: row width must be dim or 2*dim");
    auto width = static_cast<uint32_t>(r.size());
    out.write(reinterpret_cast<const char*>(&width), 4);
    out.write(reinterpret_cast<const char*>(r.data()),
              static_cast<std::streamsize>(r.size() * sizeof(float)));
  }
  if (!out) raise_io("table: write failed: " + path);
}

TableSource load_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise_io("table: cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kTableMagic, 4) != 0) raise_io("table: bad magic in " + path);
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  if (version != kTableVersion) raise_io("table: unsupported version");
  uint64_t count = 0;
  uint32_t dim = 0;
  in.read(reinterpret_cast<char*>(&count), 8);
  in.read(reinterpret_cast<char*>(&dim), 4);
  std::vector<Embedding> rows;
  rows.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t width = 0;
    in.read(reinterpret_cast<char*>(&width), 4);
    Embedding r(width);
    in.read(reinterpret_cast<char*>(r.data()),
            static_cast<std::streamsize>(width * sizeof(float)));
    if (!in) raise_io("table: truncated payload in " + path);
    rows.push_back(std::move(r));
  }
  return TableSource(std::move(rows), dim);
}

// ---------------------------------------------------------------------------
// Tile-backed lookup
// ---------------------------------------------------------------------------

TileSource::TileSource(geom::EmbeddingTile tile) : tile_(std::move(tile)) {
  values_ = tile_.to_float();
}

double TileSource::lon_to_m(double lon_deg) { return lon_deg * 111320.0; }
double TileSource::lat_to_m(double lat_deg) { return lat_deg * 110540.0; }

Embedding TileSource::embedding(const EvalRow& row, size_t row_index) const {
  (void)row_index;
  double mx = lon_to_m(row.x) - tile_.origin_x;
  double my = lat_to_m(row.y) - tile_.origin_y;
  auto col = static_cast<int64_t>(std::floor(mx / tile_.cell_size_m));
  auto r = static_cast<int64_t>(std::floor(my / tile_.cell_size_m));
  check_input(col >= 0 && col < tile_.grid_w && r >= 0 && r < tile_.grid_h,
              "tile source: coordinate outside the tile extent");
  const float* cell = values_.data() + (static_cast<size_t>(r) * tile_.grid_w + col) * tile_.dim;
  return Embedding(cell, cell + tile_.dim);
}

}  // namespace terra::eval
