#pragma once

#include <cstdint>
#include <vector>

#include "terra/rng.hpp"

namespace terra::temporal {

// Timestamps are milliseconds since the Unix epoch, signed 64-bit; the same
// convention all file formats use (little-endian on disk).
using TimestampMs = int64_t;

inline constexpr int64_t kMsPerDay = 86'400'000;

// Half-open interval [start, end), used both as support period (where
// observations come from) and valid period (what an embedding summarizes).
struct Period {
  TimestampMs start = 0;
  TimestampMs end = 0;

  int64_t length_ms() const { return end - start; }
  bool contains(TimestampMs t) const { return t >= start && t < end; }
  bool intersects(const Period& o) const { return start < o.end && o.start < end; }
  bool operator==(const Period& o) const = default;

  static Period checked(TimestampMs start, TimestampMs end) {
    check_input(start < end, "period: start must precede end");
    return Period{start, end};
  }
};

struct NormalizedTime {
  double value = 0.0;
  bool extrapolated = false;  // outside [0, 1)
};

// Affine map of t onto the period: start -> 0, end -> 1. Values outside
// [0, 1) are permitted (extrapolation) and flagged.
inline NormalizedTime normalize_to_period(TimestampMs t, const Period& p) {
  check_input(p.start < p.end, "normalize_to_period: degenerate period");
  double x = static_cast<double>(t - p.start) / static_cast<double>(p.end - p.start);
  return {x, x < 0.0 || x >= 1.0};
}

// Sinusoidal timecode: interleaved (sin, cos) pairs at geometric frequencies
// f_k = 2^k over the normalized coordinate. The frequency count is a
// configuration choice, default 8 (annual down to ~day resolution on a
// year-normalized axis).
inline constexpr int kDefaultTimecodeFrequencies = 8;

struct Timecode {
  std::vector<double> values;  // [sin f0 x, cos f0 x, sin f1 x, cos f1 x, ...]
  int frequencies = 0;

  int dim() const { return 2 * frequencies; }
};

Timecode make_timecode(double x, int frequencies = kDefaultTimecodeFrequencies);

// Uniformly random sub-period of `annual` strictly longer than min_len_days.
// The annual period must be at least one day longer than the bound so a
// valid draw exists.
Period sample_summary_period(const Period& annual, double min_len_days, Rng& rng);

}  // namespace terra::temporal
