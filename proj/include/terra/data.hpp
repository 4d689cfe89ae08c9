#pragma once

#include <map>
#include <string>
#include <vector>

#include "terra/rng.hpp"
#include "terra/temporal.hpp"

namespace terra::data {

enum class LossKind { l1, cross_entropy };
enum class PixelTransform { none, reflectance, db };

// One observation source: channel count, role, loss configuration and the
// conditioning metadata it carries.
struct SourceSpec {
  std::string name;
  int id = 0;
  int channels = 1;  // class count for categorical sources
  bool is_input = false;
  LossKind loss_kind = LossKind::l1;
  double loss_weight = 1.0;
  int shift_tolerance_px = 0;  // 0 disables the shift-invariant variant
  int regrid_ratio = 1;        // 1 disables the regridding variant
  int metadata_dims = 0;
  bool radar = false;  // gap augmentation applies
  PixelTransform transform = PixelTransform::none;

  void validate() const {
    check_input(!name.empty(), "source: empty name");
    check_input(channels >= 1, "source: channels must be positive");
    check_input(loss_weight > 0.0, "source: loss weight must be positive");
    check_input(shift_tolerance_px >= 0, "source: negative shift tolerance");
    check_input(regrid_ratio >= 1, "source: regrid ratio must be >= 1");
    check_input(metadata_dims >= 0, "source: negative metadata dims");
    check_input(!(shift_tolerance_px > 0 && regrid_ratio > 1),
                "source: shift and regrid variants are mutually exclusive");
  }
};

struct Frame {
  int source_id = 0;
  temporal::TimestampMs t = 0;
  int height = 0, width = 0, channels = 0;
  std::vector<float> pixels;   // H*W*C row-major; masked pixels hold finite placeholders
  std::vector<uint8_t> mask;   // H*W, 1 = valid
  std::vector<float> metadata;
  bool processed = false;  // per-source preprocessing applied exactly once

  size_t pixel_count() const { return static_cast<size_t>(height) * width; }
  float* px(int r, int c) { return pixels.data() + (static_cast<size_t>(r) * width + c) * channels; }
  const float* px(int r, int c) const {
    return pixels.data() + (static_cast<size_t>(r) * width + c) * channels;
  }

  void validate(const SourceSpec& spec) const;
};

// Time-ordered multi-source frame stack over one support period.
struct ObservationSequence {
  uint64_t site_id = 0;
  int period_index = 0;
  temporal::Period support;
  std::vector<Frame> frames;  // sorted by timestamp, all within support

  void validate(const std::vector<SourceSpec>& specs) const;
  std::vector<size_t> frames_of(int source_id) const;
};

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

// log(x + 1) / 10 for raw optical intensities.
float reflectance_transform(float x);

// 10 log10(dn^2) - 83 for radar digital numbers.
float palsar_db(float dn);

struct ChannelStats {
  float mean = 0.0f;
  float stddev = 1.0f;
};

struct SourceStats {
  std::vector<ChannelStats> channels;
};

using CorpusStats = std::map<int, SourceStats>;  // keyed by source id

// (x - mean) / std clipped to [-6, 6]; masked pixels are zeroed afterwards.
// Rejects frames already processed and non-positive stddevs.
void standardize_frame(Frame& frame, const SourceStats& stats);

// Pixel transform followed by standardization (skipped for categorical
// sources, whose frames are one-hot). Sets the processed flag either way.
void preprocess_frame(Frame& frame, const SourceSpec& spec, const CorpusStats& stats);
void preprocess_sequence(ObservationSequence& seq, const std::vector<SourceSpec>& specs,
                         const CorpusStats& stats);

// Statistics over valid pixels of transformed frames, frozen once per corpus.
CorpusStats compute_stats(const std::vector<ObservationSequence>& corpus,
                          const std::vector<SourceSpec>& specs);
void save_stats(const std::string& path, const CorpusStats& stats,
                const std::vector<SourceSpec>& specs);
CorpusStats load_stats(const std::string& path);

// ---------------------------------------------------------------------------
// Gap augmentation
// ---------------------------------------------------------------------------

// Clears mask bits along a band around a line: pixel centers within
// width/2 of the line (anti-aliased coverage thresholded at one half).
void apply_gap_line(Frame& frame, double angle, double px, double py, double width);

// One random line (angle uniform, width uniform in [0.5, 2] px) cleared from
// the masks of every radar frame; sequences without radar frames pass
// through unchanged.
void gap_augment(ObservationSequence& seq, const std::vector<SourceSpec>& specs, Rng& rng);

// ---------------------------------------------------------------------------
// Synthetic observation generator
// ---------------------------------------------------------------------------

struct SynthConfig {
  uint64_t world_seed = 1;
  int sites = 100;
  int image_px = 32;  // L
  double optical_mask_rate = 0.30;
  double noise_sigma = 0.05;
  int thematic_classes = 5;
  int year_days = 360;
  std::vector<int> frames_per_source;  // aligned with the roster; filled by default_roster
};

struct Roster {
  std::vector<SourceSpec> specs;
};

// Desk-scale mirror of the production source mix: two optical-like inputs,
// one radar-like input, plus target-only sources covering every loss
// configuration (plain, shift-invariant, regridded, coarse/low-weight,
// categorical).
Roster default_roster(int thematic_classes = 5);
SynthConfig default_synth_config();

// Ground truth behind a site's observations, kept for oracle checks.
struct SiteTruth {
  int latent_channels = 0;
  int px = 0;
  std::vector<float> static_field;    // L*L*K
  std::vector<float> seasonal_amp;    // L*L*K
  std::vector<float> seasonal_phase;  // L*L

  // Latent vector at (r, c) and absolute time t.
  void latent_at(int r, int c, temporal::TimestampMs t, int year_days, float* out) const;
};

SiteTruth synth_truth(const SynthConfig& cfg, uint64_t site);

// The two non-overlapping, approximately year-length support periods of a site.
temporal::Period site_period(const SynthConfig& cfg, uint64_t site, int period_index);

// Deterministic synthetic sequence for (world_seed, site, period). Raw pixel
// values (pre-transform) are stored; preprocessing happens at load time.
ObservationSequence synth_generate(const SynthConfig& cfg, uint64_t site, int period_index,
                                   const Roster& roster);

}  // namespace terra::data
