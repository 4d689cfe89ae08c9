#pragma once

#include <memory>

#include "terra/eval.hpp"
#include "terra/tile_io.hpp"

namespace terra::eval {

// Plain embedding table: one embedding (or a before/after pair) per dataset
// row, by row index. Binary layout: magic, version, row count, dim, f32
// little-endian payload.
inline constexpr char kTableMagic[4] = {'T', 'F', 'E', 'T'};
inline constexpr uint32_t kTableVersion = 1;

class TableSource : public EmbeddingProvider {
 public:
  TableSource(std::vector<Embedding> rows, uint32_t dim);

  Embedding embedding(const EvalRow& row, size_t row_index) const override;
  EmbeddingPair pair(const EvalRow& row, size_t row_index) const override;

  size_t rows() const { return rows_.size(); }
  uint32_t dim() const { return dim_; }

 private:
  std::vector<Embedding> rows_;  // dim (plain) or 2*dim (change pairs)
  uint32_t dim_;
};

void write_table(const std::string& path, const std::vector<Embedding>& rows, uint32_t dim);
TableSource load_table(const std::string& path);

// Embedding lookup from a quantized field tile: dataset coordinates map
// onto the tile's planar grid through an equirectangular projection
// anchored at the tile origin.
class TileSource : public EmbeddingProvider {
 public:
  explicit TileSource(geom::EmbeddingTile tile);

  Embedding embedding(const EvalRow& row, size_t row_index) const override;

  // degrees -> meters in the tile plane
  static double lon_to_m(double lon_deg);
  static double lat_to_m(double lat_deg);

 private:
  geom::EmbeddingTile tile_;
  std::vector<float> values_;  // dequantized payload
};

// ---------------------------------------------------------------------------
// Reports and plots
// ---------------------------------------------------------------------------

std::string report_to_json(const MetricReport& report);
void append_report(const std::string& path, const MetricReport& report);
std::vector<MetricReport> read_reports(const std::string& path);

// Bar chart with 1-sigma whiskers, one bar per report, as a static SVG
// image; the underlying numbers land in a CSV next to it.
void write_report_plot(const std::string& svg_path, const std::string& csv_path,
                       const std::vector<MetricReport>& reports, const std::string& title);

}  // namespace terra::eval
