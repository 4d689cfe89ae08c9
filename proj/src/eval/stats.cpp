#include <algorithm>
#include <cmath>

#include "terra/eval.hpp"

namespace terra::eval {

int64_t kfold_count(int64_t c_min) {
  check_input(c_min >= 1, "kfold_count: least class count must be positive");
  double exponent = std::log10(static_cast<double>(c_min));
  return static_cast<int64_t>(std::ceil(1000.0 / std::pow(2.0, exponent)));
}

int64_t kfold_count(const std::vector<int64_t>& class_counts) {
  check_input(!class_counts.empty(), "kfold_count: no classes");
  int64_t c_min = class_counts[0];
  bool balanced = true;
  for (int64_t c : class_counts) {
    balanced &= c == class_counts[0];
    c_min = std::min(c_min, c);
  }
  return balanced ? 1 : kfold_count(c_min);
}

std::vector<double> bootstrap_resample_weights(size_t m, Rng& rng) {
  std::vector<double> weights(m, 0.0);
  for (size_t draw = 0; draw < m; ++draw) {
    weights[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(m) - 1))] += 1.0;
  }
  return weights;
}

MetricReport kfold_stats(const std::vector<double>& fold_metrics) {
  check_input(!fold_metrics.empty(), "kfold_stats: no fold metrics");
  MetricReport report;
  report.method = "kfold";
  report.folds = static_cast<int64_t>(fold_metrics.size());
  double mean = 0.0;
  for (double m : fold_metrics) mean += m;
  mean /= static_cast<double>(fold_metrics.size());
  report.mean = mean;
  if (fold_metrics.size() >= 2) {
    double ss = 0.0;
    for (double m : fold_metrics) ss += (m - mean) * (m - mean);
    report.sigma = std::sqrt(ss / static_cast<double>(fold_metrics.size() - 1));
  }
  return report;
}

MetricReport bootstrap_stats(const std::vector<double>& predictions,
                             const std::vector<double>& truths, MetricKind kind, int64_t b,
                             Rng& rng) {
  check_input(!predictions.empty() && predictions.size() == truths.size(),
              "bootstrap_stats: predictions and truths must align");
  check_input(b >= 1, "bootstrap_stats: need at least one resample");
  size_t m = truths.size();
  std::vector<double> samples;
  samples.reserve(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) {
    auto weights = bootstrap_resample_weights(m, rng);
    samples.push_back(metric(predictions, truths, kind, &weights));
  }
  MetricReport report = kfold_stats(samples);
  report.method = "bootstrap";
  report.folds = 0;
  report.bootstraps = b;
  return report;
}

}  // namespace terra::eval
