#include <cmath>
#include <fstream>

#include "terra/eval_io.hpp"
#include "terra/fixtures.hpp"
#include "terra/geometry.hpp"

namespace terra::eval {

namespace {

Embedding random_unit(Rng& rng, size_t dim) {
  Embedding e(dim);
  for (auto& v : e) v = static_cast<float>(rng.normal());
  geom::normalize_inplace(e.data(), e.size());
  return e;
}

Embedding jitter(const Embedding& center, double spread, Rng& rng) {
  Embedding e = center;
  for (auto& v : e) v += static_cast<float>(spread * rng.normal());
  geom::normalize_inplace(e.data(), e.size());
  return e;
}

}  // namespace

Fixture make_fixture(const FixtureSpec& spec) {
  check_input(spec.classes >= 2 || spec.regression, "fixture: need at least 2 classes");
  check_input(spec.train_per_class >= 1 && spec.test_per_class >= 1, "fixture: empty splits");
  Rng rng(spec.seed);
  Fixture out;
  out.dataset.change = spec.change;
  out.dataset.labels_integral = !spec.regression;

  const size_t dim = static_cast<size_t>(geom::kEmbedDim);
  std::vector<Embedding> centers;
  int n_centers = spec.regression ? 1 : spec.classes;
  for (int c = 0; c < n_centers; ++c) centers.push_back(random_unit(rng, dim));
  Embedding reg_w = random_unit(rng, dim);

  // coordinates on a coarse grid so every pair clears the proximity bound
  double step_deg = spec.min_distance_km / 111.0 * 1.5;
  int grid = 0;
  auto place = [&](EvalRow& row) {
    int gx = grid % 512, gy = grid / 512;
    ++grid;
    row.x = -120.0 + gx * step_deg + 0.00005;
    row.y = 20.0 + gy * step_deg + 0.00005;
  };

  int64_t t0 = 1'600'000'000'000;
  auto emit = [&](int cls, bool train, int index) {
    EvalRow row;
    place(row);
    row.split = train ? "train" : "test";
    row.support_start_ms = t0;
    row.support_end_ms = t0 + 300LL * temporal::kMsPerDay;
    row.valid_start_ms = t0 + 30LL * temporal::kMsPerDay;
    row.valid_end_ms = t0 + 270LL * temporal::kMsPerDay;

    if (spec.change) {
      row.is_change = true;
      row.support_before_start_ms = t0;
      row.support_before_end_ms = t0 + 300LL * temporal::kMsPerDay;
      row.support_after_start_ms = t0 + 400LL * temporal::kMsPerDay;
      row.support_after_end_ms = t0 + 700LL * temporal::kMsPerDay;
      row.valid_before_start_ms = t0 + 30LL * temporal::kMsPerDay;
      row.valid_before_end_ms = t0 + 270LL * temporal::kMsPerDay;
      row.valid_after_start_ms = t0 + 430LL * temporal::kMsPerDay;
      row.valid_after_end_ms = t0 + 670LL * temporal::kMsPerDay;

      bool changed = rng.uniform() < spec.change_fraction;
      auto before = jitter(centers[static_cast<size_t>(cls % centers.size())],
                           spec.cluster_spread, rng);
      Embedding after =
          changed ? jitter(centers[static_cast<size_t>((cls + 1) % centers.size())],
                           spec.cluster_spread, rng)
                  : jitter(before, spec.cluster_spread * 0.3, rng);
      row.label = changed ? 1.0 : 0.0;
      row.label_before = cls;
      row.label_after = changed ? (cls + 1) % spec.classes : cls;
      Embedding both = before;
      both.insert(both.end(), after.begin(), after.end());
      out.table.push_back(std::move(both));
    } else if (spec.regression) {
      auto e = jitter(centers[0], 1.0, rng);  // spread over the sphere
      double label = 0.0;
      for (size_t i = 0; i < dim; ++i) label += reg_w[i] * e[i];
      row.label = 3.0 * label + 0.5;
      out.table.push_back(std::move(e));
    } else {
      auto e = jitter(centers[static_cast<size_t>(cls)], spec.cluster_spread, rng);
      row.label = cls;
      out.table.push_back(std::move(e));
    }
    (void)index;
    out.dataset.rows.push_back(std::move(row));
  };

  int effective_classes = spec.regression ? 1 : spec.classes;
  for (int cls = 0; cls < effective_classes; ++cls) {
    for (int i = 0; i < spec.train_per_class; ++i) emit(cls, true, i);
  }
  for (int cls = 0; cls < effective_classes; ++cls) {
    for (int i = 0; i < spec.test_per_class; ++i) emit(cls, false, i);
  }
  return out;
}

void write_fixture(const Fixture& fixture, const std::string& dataset_csv,
                   const std::string& table_path) {
  std::ofstream out(dataset_csv);
  if (!out) raise_io("fixture: cannot open for writing: " + dataset_csv);
  bool change = fixture.dataset.change;
  if (change) {
    out << "x,y,label,split,"
           "valid_time_start_before_ms,valid_time_end_before_ms,"
           "valid_time_start_after_ms,valid_time_end_after_ms,"
           "support_time_start_before_ms,support_time_end_before_ms,"
           "support_time_start_after_ms,support_time_end_after_ms,"
           "label_before,label_after\n";
  } else {
    out << "x,y,label,split,valid_time_start_ms,valid_time_end_ms,"
           "support_time_start_ms,support_time_end_ms\n";
  }
  char buf[640];
  for (const auto& r : fixture.dataset.rows) {
    if (change) {
      std::snprintf(buf, sizeof(buf),
                    "%.5f,%.5f,%g,%s,%lld,%lld,%lld,%lld,%lld,%lld,%lld,%lld,%g,%g\n", r.x, r.y,
                    r.label, r.split.c_str(), static_cast<long long>(r.valid_before_start_ms),
                    static_cast<long long>(r.valid_before_end_ms),
                    static_cast<long long>(r.valid_after_start_ms),
                    static_cast<long long>(r.valid_after_end_ms),
                    static_cast<long long>(r.support_before_start_ms),
                    static_cast<long long>(r.support_before_end_ms),
                    static_cast<long long>(r.support_after_start_ms),
                    static_cast<long long>(r.support_after_end_ms), r.label_before,
                    r.label_after);
    } else {
      std::snprintf(buf, sizeof(buf), "%.5f,%.5f,%g,%s,%lld,%lld,%lld,%lld\n", r.x, r.y, r.label,
                    r.split.c_str(), static_cast<long long>(r.valid_start_ms),
                    static_cast<long long>(r.valid_end_ms),
                    static_cast<long long>(r.support_start_ms),
                    static_cast<long long>(r.support_end_ms));
    }
    out << buf;
  }
  write_table(table_path, fixture.table, geom::kEmbedDim);
}

}  // namespace terra::eval
