#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "terra/eval.hpp"

namespace terra::eval {

double haversine_km(double lon_a, double lat_a, double lon_b, double lat_b) {
  constexpr double kRadiusKm = 6371.0;
  constexpr double kDegToRad = 0.01745329251994329577;
  double phi1 = lat_a * kDegToRad, phi2 = lat_b * kDegToRad;
  double dphi = (lat_b - lat_a) * kDegToRad;
  double dlam = (lon_b - lon_a) * kDegToRad;
  double s1 = std::sin(dphi / 2.0), s2 = std::sin(dlam / 2.0);
  double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
  return 2.0 * kRadiusKm * std::asin(std::min(1.0, std::sqrt(h)));
}

std::vector<size_t> proximity_filter(const std::vector<EvalRow>& rows, double min_km) {
  check_input(min_km >= 0, "proximity_filter: negative distance");
  std::vector<size_t> retained;
  for (size_t i = 0; i < rows.size(); ++i) {
    bool keep = true;
    for (size_t r : retained) {
      if (haversine_km(rows[i].x, rows[i].y, rows[r].x, rows[r].y) < min_km) {
        keep = false;
        break;
      }
    }
    if (keep) retained.push_back(i);
  }
  return retained;
}

namespace {

struct UnionFind {
  std::vector<size_t> parent;

  explicit UnionFind(size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }

  size_t find(size_t a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  }

  void join(size_t a, size_t b) { parent[find(a)] = find(b); }
};

}  // namespace

std::vector<Split> component_split(const std::vector<EvalRow>& rows, double radius_km,
                                   double train_frac) {
  check_input(!rows.empty(), "component_split: no rows");
  check_input(train_frac > 0 && train_frac < 1, "component_split: train_frac must be in (0,1)");

  UnionFind uf(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    for (size_t j = i + 1; j < rows.size(); ++j) {
      if (haversine_km(rows[i].x, rows[i].y, rows[j].x, rows[j].y) <= radius_km) uf.join(i, j);
    }
  }

  std::map<size_t, std::vector<size_t>> components;
  for (size_t i = 0; i < rows.size(); ++i) components[uf.find(i)].push_back(i);

  std::map<double, size_t> class_totals;
  for (const auto& r : rows) class_totals[r.label] += 1;

  // biggest components first; each goes to whichever split moves the
  // per-class train fractions closest to the target
  std::vector<const std::vector<size_t>*> order;
  for (const auto& [root, members] : components) order.push_back(&members);
  std::stable_sort(order.begin(), order.end(),
                   [](const auto* a, const auto* b) { return a->size() > b->size(); });

  std::map<double, size_t> train_counts;
  std::vector<Split> assignment(rows.size(), Split::test);
  for (const auto* members : order) {
    std::map<double, size_t> delta;
    for (size_t i : *members) delta[rows[i].label] += 1;
    auto objective = [&](bool to_train) {
      double err = 0.0;
      for (const auto& [cls, total] : class_totals) {
        double count = static_cast<double>(train_counts[cls]);
        if (to_train && delta.count(cls)) count += static_cast<double>(delta[cls]);
        double frac = count / static_cast<double>(total);
        err += (frac - train_frac) * (frac - train_frac);
      }
      return err;
    };
    bool to_train = objective(true) < objective(false);
    for (size_t i : *members) assignment[i] = to_train ? Split::train : Split::test;
    if (to_train) {
      for (const auto& [cls, d] : delta) train_counts[cls] += d;
    }
  }
  return assignment;
}

}  // namespace terra::eval
