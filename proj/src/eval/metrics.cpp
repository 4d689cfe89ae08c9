#include <cmath>
#include <map>

#include "terra/eval.hpp"

namespace terra::eval {

const char* metric_name(MetricKind kind) {
  switch (kind) {
    case MetricKind::balanced_accuracy:
      return "balanced_accuracy";
    case MetricKind::ber:
      return "ber";
    case MetricKind::ber_kappa:
      return "ber_kappa";
    case MetricKind::r_squared:
      return "r_squared";
    case MetricKind::mae:
      return "mae";
  }
  return "unknown";
}

double metric(const std::vector<double>& predictions, const std::vector<double>& truths,
              MetricKind kind, const std::vector<double>* weights) {
  check_input(!predictions.empty() && predictions.size() == truths.size(),
              "metric: predictions and truths must align and be nonempty");
  if (weights) {
    check_input(weights->size() == truths.size(), "metric: weight count mismatch");
  }
  auto w_at = [&](size_t i) { return weights ? (*weights)[i] : 1.0; };

  switch (kind) {
    case MetricKind::balanced_accuracy:
    case MetricKind::ber:
    case MetricKind::ber_kappa: {
      std::map<double, std::pair<double, double>> per_class;  // weight correct, weight total
      for (size_t i = 0; i < truths.size(); ++i) {
        auto& [correct, total] = per_class[truths[i]];
        total += w_at(i);
        if (predictions[i] == truths[i]) correct += w_at(i);
      }
      // drop classes with zero resample weight
      double acc = 0.0;
      size_t classes = 0;
      for (const auto& [cls, ct] : per_class) {
        if (ct.second <= 0.0) continue;
        acc += ct.first / ct.second;
        ++classes;
      }
      check_input(per_class.size() >= 2, "metric: balanced accuracy needs at least 2 classes");
      check_input(classes >= 1, "metric: no class carries weight");
      double ba = acc / static_cast<double>(classes);
      if (kind == MetricKind::balanced_accuracy) return ba;
      double ber = 1.0 - ba;
      if (kind == MetricKind::ber) return ber;
      // kappa adjustment: 1 remaps to a random predictor's BER, clamped at 1
      double ber_random = 1.0 - 1.0 / static_cast<double>(per_class.size());
      return std::min(std::max(ber / ber_random, 0.0), 1.0);
    }
    case MetricKind::r_squared: {
      double wsum = 0.0, mean = 0.0;
      for (size_t i = 0; i < truths.size(); ++i) {
        wsum += w_at(i);
        mean += w_at(i) * truths[i];
      }
      check_input(wsum > 0.0, "metric: zero total weight");
      mean /= wsum;
      double ss_res = 0.0, ss_tot = 0.0;
      for (size_t i = 0; i < truths.size(); ++i) {
        ss_res += w_at(i) * (truths[i] - predictions[i]) * (truths[i] - predictions[i]);
        ss_tot += w_at(i) * (truths[i] - mean) * (truths[i] - mean);
      }
      check_input(ss_tot > 0.0, "metric: constant truths make r_squared undefined");
      return 1.0 - ss_res / ss_tot;
    }
    case MetricKind::mae: {
      double wsum = 0.0, acc = 0.0;
      for (size_t i = 0; i < truths.size(); ++i) {
        wsum += w_at(i);
        acc += w_at(i) * std::abs(truths[i] - predictions[i]);
      }
      check_input(wsum > 0.0, "metric: zero total weight");
      return acc / wsum;
    }
  }
  raise_invalid("metric: unknown kind");
}

}  // namespace terra::eval
