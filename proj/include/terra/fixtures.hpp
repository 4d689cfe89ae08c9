#pragma once

#include "terra/eval.hpp"

namespace terra::eval {

// Synthetic evaluation fixtures: labeled point sets with embeddings whose
// label structure is controllable (cluster classification, affine
// regression, before/after change pairs). Stands in for published datasets
// the harness would otherwise ingest.
struct FixtureSpec {
  uint64_t seed = 1;
  int classes = 4;          // ignored for regression
  int train_per_class = 40;
  int test_per_class = 60;
  double cluster_spread = 0.25;  // embedding noise around class centers
  bool regression = false;
  bool change = false;
  double change_fraction = 0.5;
  double min_distance_km = 1.28;  // coordinates respect proximity filtering
};

struct Fixture {
  Dataset dataset;
  std::vector<Embedding> table;  // aligned with dataset rows (dim or 2*dim)
};

Fixture make_fixture(const FixtureSpec& spec);

// Writes the dataset as CSV (Table-standard field names) and the embedding
// table next to it.
void write_fixture(const Fixture& fixture, const std::string& dataset_csv,
                   const std::string& table_path);

}  // namespace terra::eval
