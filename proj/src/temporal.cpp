#include "terra/temporal.hpp"

#include <cmath>

namespace terra::temporal {

Timecode make_timecode(double x, int frequencies) {
  check_input(frequencies >= 1, "make_timecode: need at least one frequency");
  Timecode tc;
  tc.frequencies = frequencies;
  tc.values.resize(static_cast<size_t>(2 * frequencies));
  constexpr double two_pi = 6.283185307179586476925;
  double freq = 1.0;
  for (int k = 0; k < frequencies; ++k) {
    double angle = two_pi * freq * x;
    tc.values[static_cast<size_t>(2 * k)] = std::sin(angle);
    tc.values[static_cast<size_t>(2 * k + 1)] = std::cos(angle);
    freq *= 2.0;
  }
  return tc;
}

Period sample_summary_period(const Period& annual, double min_len_days, Rng& rng) {
  check_input(annual.start < annual.end, "sample_summary_period: degenerate period");
  auto min_len_ms = static_cast<int64_t>(min_len_days * kMsPerDay);
  int64_t annual_len = annual.length_ms();
  check_input(annual_len >= min_len_ms + kMsPerDay,
              "sample_summary_period: period too short for the length bound");
  // length strictly greater than the bound, up to the full period
  int64_t length = min_len_ms + 1 + rng.uniform_int(0, annual_len - min_len_ms - 1);
  int64_t start = annual.start + rng.uniform_int(0, annual_len - length);
  return Period{start, start + length};
}

}  // namespace terra::temporal
