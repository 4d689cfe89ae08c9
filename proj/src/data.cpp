#include "terra/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace terra::data {

using temporal::kMsPerDay;
using temporal::Period;
using temporal::TimestampMs;

void Frame::validate(const SourceSpec& spec) const {
  check_input(source_id == spec.id, "frame: source id mismatch");
  check_input(height > 0 && width > 0, "frame: empty raster");
  check_input(channels == spec.channels, "frame: channel count mismatch");
  check_input(pixels.size() == pixel_count() * static_cast<size_t>(channels),
              "frame: pixel buffer size mismatch");
  check_input(mask.size() == pixel_count(), "frame: mask size mismatch");
  check_input(metadata.size() == static_cast<size_t>(spec.metadata_dims),
              "frame: metadata length mismatch");
  for (float v : pixels) {
    check_input(std::isfinite(v), "frame: non-finite pixel");
  }
}

void ObservationSequence::validate(const std::vector<SourceSpec>& specs) const {
  check_input(support.start < support.end, "sequence: degenerate support period");
  TimestampMs prev = support.start;
  for (const auto& frame : frames) {
    check_input(frame.t >= support.start && frame.t < support.end,
                "sequence: frame outside support period");
    check_input(frame.t >= prev, "sequence: frames not sorted by timestamp");
    prev = frame.t;
    const SourceSpec* spec = nullptr;
    for (const auto& s : specs) {
      if (s.id == frame.source_id) spec = &s;
    }
    check_input(spec != nullptr, "sequence: frame references unknown source");
    frame.validate(*spec);
  }
}

std::vector<size_t> ObservationSequence::frames_of(int source_id) const {
  std::vector<size_t> out;
  for (size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].source_id == source_id) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

float reflectance_transform(float x) {
  check_input(x >= 0.0f, "reflectance_transform: negative intensity");
  return std::log(x + 1.0f) / 10.0f;
}

float palsar_db(float dn) {
  check_input(dn > 0.0f, "palsar_db: digital number must be positive");
  return 10.0f * std::log10(dn * dn) - 83.0f;
}

void standardize_frame(Frame& frame, const SourceStats& stats) {
  check_input(!frame.processed, "standardize: frame already processed");
  check_input(stats.channels.size() == static_cast<size_t>(frame.channels),
              "standardize: stats channel count mismatch");
  for (const auto& ch : stats.channels) {
    check_input(ch.stddev > 0.0f, "standardize: non-positive stddev");
  }
  size_t np = frame.pixel_count();
  for (size_t p = 0; p < np; ++p) {
    float* px = frame.pixels.data() + p * frame.channels;
    for (int c = 0; c < frame.channels; ++c) {
      float v = (px[c] - stats.channels[static_cast<size_t>(c)].mean) /
                stats.channels[static_cast<size_t>(c)].stddev;
      px[c] = std::clamp(v, -6.0f, 6.0f);
    }
    if (!frame.mask[p]) {
      for (int c = 0; c < frame.channels; ++c) px[c] = 0.0f;
    }
  }
  frame.processed = true;
}

void preprocess_frame(Frame& frame, const SourceSpec& spec, const CorpusStats& stats) {
  check_input(!frame.processed, "preprocess: frame already processed");
  if (spec.loss_kind == LossKind::cross_entropy) {
    // categorical frames are one-hot; only masking applies
    size_t np = frame.pixel_count();
    for (size_t p = 0; p < np; ++p) {
      if (!frame.mask[p]) {
        float* px = frame.pixels.data() + p * frame.channels;
        for (int c = 0; c < frame.channels; ++c) px[c] = 0.0f;
      }
    }
    frame.processed = true;
    return;
  }
  switch (spec.transform) {
    case PixelTransform::none:
      break;
    case PixelTransform::reflectance:
      for (auto& v : frame.pixels) v = reflectance_transform(v);
      break;
    case PixelTransform::db:
      for (auto& v : frame.pixels) v = palsar_db(v);
      break;
  }
  auto it = stats.find(spec.id);
  check_input(it != stats.end(), "preprocess: no statistics for source " + spec.name);
  standardize_frame(frame, it->second);
}

void preprocess_sequence(ObservationSequence& seq, const std::vector<SourceSpec>& specs,
                         const CorpusStats& stats) {
  for (auto& frame : seq.frames) {
    for (const auto& spec : specs) {
      if (spec.id == frame.source_id) {
        preprocess_frame(frame, spec, stats);
        break;
      }
    }
  }
}

CorpusStats compute_stats(const std::vector<ObservationSequence>& corpus,
                          const std::vector<SourceSpec>& specs) {
  struct Acc {
    std::vector<double> sum, sumsq;
    std::vector<int64_t> count;
  };
  std::map<int, Acc> accs;
  for (const auto& spec : specs) {
    if (spec.loss_kind == LossKind::cross_entropy) continue;
    Acc a;
    a.sum.assign(static_cast<size_t>(spec.channels), 0.0);
    a.sumsq.assign(static_cast<size_t>(spec.channels), 0.0);
    a.count.assign(static_cast<size_t>(spec.channels), 0);
    accs[spec.id] = std::move(a);
  }
  for (const auto& seq : corpus) {
    for (const auto& frame : seq.frames) {
      auto it = accs.find(frame.source_id);
      if (it == accs.end()) continue;
      const SourceSpec* spec = nullptr;
      for (const auto& s : specs) {
        if (s.id == frame.source_id) spec = &s;
      }
      size_t np = frame.pixel_count();
      for (size_t p = 0; p < np; ++p) {
        if (!frame.mask[p]) continue;
        const float* px = frame.pixels.data() + p * frame.channels;
        for (int c = 0; c < frame.channels; ++c) {
          float v = px[c];
          switch (spec->transform) {
            case PixelTransform::none:
              break;
            case PixelTransform::reflectance:
              v = reflectance_transform(v);
              break;
            case PixelTransform::db:
              v = palsar_db(v);
              break;
          }
          it->second.sum[static_cast<size_t>(c)] += v;
          it->second.sumsq[static_cast<size_t>(c)] += static_cast<double>(v) * v;
          it->second.count[static_cast<size_t>(c)] += 1;
        }
      }
    }
  }
  CorpusStats stats;
  for (const auto& spec : specs) {
    SourceStats ss;
    if (spec.loss_kind == LossKind::cross_entropy) {
      ss.channels.assign(static_cast<size_t>(spec.channels), ChannelStats{0.0f, 1.0f});
    } else {
      const Acc& a = accs[spec.id];
      for (int c = 0; c < spec.channels; ++c) {
        auto i = static_cast<size_t>(c);
        check_input(a.count[i] > 1, "compute_stats: source " + spec.name + " has no valid pixels");
        double mean = a.sum[i] / static_cast<double>(a.count[i]);
        double var = a.sumsq[i] / static_cast<double>(a.count[i]) - mean * mean;
        double sd = std::sqrt(std::max(var, 1e-12));
        ss.channels.push_back({static_cast<float>(mean), static_cast<float>(sd)});
      }
    }
    stats[spec.id] = std::move(ss);
  }
  return stats;
}

void save_stats(const std::string& path, const CorpusStats& stats,
                const std::vector<SourceSpec>& specs) {
  std::ofstream out(path);
  if (!out) raise_io("stats: cannot open for writing: " + path);
  out << "source_id,source,channel,mean,std\n";
  for (const auto& spec : specs) {
    auto it = stats.find(spec.id);
    if (it == stats.end()) continue;
    for (size_t c = 0; c < it->second.channels.size(); ++c) {
      const auto& ch = it->second.channels[c];
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%d,%s,%zu,%.9g,%.9g\n", spec.id, spec.name.c_str(), c,
                    static_cast<double>(ch.mean), static_cast<double>(ch.stddev));
      out << buf;
    }
  }
}

CorpusStats load_stats(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise_io("stats: cannot open: " + path);
  std::string line;
  std::getline(in, line);  // header
  CorpusStats stats;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    int id = std::stoi(field);
    std::getline(ss, field, ',');  // name, unused
    std::getline(ss, field, ',');
    auto channel = static_cast<size_t>(std::stoul(field));
    std::getline(ss, field, ',');
    float mean = std::stof(field);
    std::getline(ss, field, ',');
    float stddev = std::stof(field);
    auto& ss_entry = stats[id];
    if (ss_entry.channels.size() <= channel) ss_entry.channels.resize(channel + 1);
    ss_entry.channels[channel] = {mean, stddev};
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Gap augmentation
// ---------------------------------------------------------------------------

void apply_gap_line(Frame& frame, double angle, double px, double py, double width) {
  double nx = -std::sin(angle), ny = std::cos(angle);
  for (int r = 0; r < frame.height; ++r) {
    for (int c = 0; c < frame.width; ++c) {
      double cx = c + 0.5, cy = r + 0.5;
      double d = std::abs(nx * (cx - px) + ny * (cy - py));
      if (d <= width / 2.0) {
        frame.mask[static_cast<size_t>(r) * frame.width + c] = 0;
      }
    }
  }
}

void gap_augment(ObservationSequence& seq, const std::vector<SourceSpec>& specs, Rng& rng) {
  std::vector<int> radar_ids;
  for (const auto& spec : specs) {
    if (spec.radar) radar_ids.push_back(spec.id);
  }
  bool any = false;
  for (const auto& frame : seq.frames) {
    for (int id : radar_ids) {
      if (frame.source_id == id) any = true;
    }
  }
  if (!any) return;  // vacuous application

  double angle = rng.uniform(0.0, 3.14159265358979323846);
  double width = rng.uniform(0.5, 2.0);
  // the line passes through a random point of the raster
  int h = 0, w = 0;
  for (const auto& frame : seq.frames) {
    h = std::max(h, frame.height);
    w = std::max(w, frame.width);
  }
  double px = rng.uniform(0.0, static_cast<double>(w));
  double py = rng.uniform(0.0, static_cast<double>(h));

  for (auto& frame : seq.frames) {
    bool radar = false;
    for (int id : radar_ids) {
      if (frame.source_id == id) radar = true;
    }
    if (radar) apply_gap_line(frame, angle, px, py, width);
  }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

namespace {

constexpr int kLatentChannels = 4;
constexpr TimestampMs kEpochBase = 1'500'000'000'000;  // arbitrary fixed origin

// Sum of a few random low-frequency plane waves: smooth, roughly unit scale.
std::vector<float> smooth_field(Rng& rng, int px, double amplitude = 1.0) {
  constexpr int waves = 6;
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> ws(waves);
  for (auto& w : ws) {
    w.fx = rng.uniform(0.3, 2.5);
    w.fy = rng.uniform(0.3, 2.5);
    w.phase = rng.uniform(0.0, 6.28318530717958647692);
    w.amp = rng.normal() / std::sqrt(static_cast<double>(waves));
  }
  std::vector<float> field(static_cast<size_t>(px) * px);
  for (int r = 0; r < px; ++r) {
    for (int c = 0; c < px; ++c) {
      double v = 0.0;
      for (const auto& w : ws) {
        v += w.amp * std::cos(6.28318530717958647692 * (w.fx * c + w.fy * r) / px + w.phase);
      }
      field[static_cast<size_t>(r) * px + c] = static_cast<float>(amplitude * v);
    }
  }
  return field;
}

uint64_t tag(uint64_t a, uint64_t b) { return splitmix64(a * 0x9e3779b97f4a7c15ull + b); }

// Per-source latent-to-channel mixing, shared by every site.
std::vector<float> mixing_matrix(uint64_t world_seed, int source_id, int channels) {
  Rng rng(tag(world_seed, 0xA11CE000u + static_cast<uint64_t>(source_id)));
  std::vector<float> m(static_cast<size_t>(channels) * kLatentChannels);
  for (auto& v : m) {
    v = static_cast<float>(rng.normal() / std::sqrt(static_cast<double>(kLatentChannels)));
  }
  return m;
}

}  // namespace

Roster default_roster(int thematic_classes) {
  Roster r;
  auto push = [&](SourceSpec s) {
    s.id = static_cast<int>(r.specs.size());
    s.validate();
    r.specs.push_back(std::move(s));
  };
  // inputs
  push({.name = "optical_a", .channels = 4, .is_input = true, .loss_kind = LossKind::l1,
        .loss_weight = 1.0, .shift_tolerance_px = 2, .regrid_ratio = 1, .metadata_dims = 1,
        .radar = false, .transform = PixelTransform::reflectance});
  push({.name = "optical_b", .channels = 3, .is_input = true, .loss_kind = LossKind::l1,
        .loss_weight = 1.0, .shift_tolerance_px = 0, .regrid_ratio = 3, .metadata_dims = 1,
        .radar = false, .transform = PixelTransform::reflectance});
  push({.name = "radar", .channels = 2, .is_input = true, .loss_kind = LossKind::l1,
        .loss_weight = 1.0, .shift_tolerance_px = 2, .regrid_ratio = 1, .metadata_dims = 2,
        .radar = true, .transform = PixelTransform::db});
  // target-only
  push({.name = "lidar_like", .channels = 1, .is_input = false, .loss_kind = LossKind::l1,
        .loss_weight = 1.0, .shift_tolerance_px = 2, .regrid_ratio = 1, .metadata_dims = 1,
        .radar = false, .transform = PixelTransform::none});
  push({.name = "climate_like", .channels = 2, .is_input = false, .loss_kind = LossKind::l1,
        .loss_weight = 1.0, .shift_tolerance_px = 0, .regrid_ratio = 1, .metadata_dims = 0,
        .radar = false, .transform = PixelTransform::none});
  push({.name = "mass_like", .channels = 1, .is_input = false, .loss_kind = LossKind::l1,
        .loss_weight = 0.5, .shift_tolerance_px = 0, .regrid_ratio = 8, .metadata_dims = 0,
        .radar = false, .transform = PixelTransform::none});
  push({.name = "thematic", .channels = thematic_classes, .is_input = false,
        .loss_kind = LossKind::cross_entropy, .loss_weight = 0.5, .shift_tolerance_px = 0,
        .regrid_ratio = 1, .metadata_dims = 0, .radar = false,
        .transform = PixelTransform::none});
  return r;
}

SynthConfig default_synth_config() {
  SynthConfig cfg;
  cfg.frames_per_source = {4, 2, 2, 2, 2, 2, 2};
  return cfg;
}

void SiteTruth::latent_at(int r, int c, TimestampMs t, int year_days, float* out) const {
  double tau = static_cast<double>(t) / (static_cast<double>(year_days) * kMsPerDay);
  size_t p = static_cast<size_t>(r) * px + c;
  double s = std::sin(6.28318530717958647692 * tau + seasonal_phase[p]);
  for (int k = 0; k < latent_channels; ++k) {
    size_t i = p * static_cast<size_t>(latent_channels) + static_cast<size_t>(k);
    out[k] = static_cast<float>(static_field[i] + seasonal_amp[i] * s);
  }
}

SiteTruth synth_truth(const SynthConfig& cfg, uint64_t site) {
  SiteTruth truth;
  truth.latent_channels = kLatentChannels;
  truth.px = cfg.image_px;
  Rng rng(tag(cfg.world_seed, 0x51335000u + site));
  size_t np = static_cast<size_t>(cfg.image_px) * cfg.image_px;
  truth.static_field.resize(np * kLatentChannels);
  truth.seasonal_amp.resize(np * kLatentChannels);
  for (int k = 0; k < kLatentChannels; ++k) {
    auto st = smooth_field(rng, cfg.image_px);
    auto amp = smooth_field(rng, cfg.image_px, 0.8);
    for (size_t p = 0; p < np; ++p) {
      truth.static_field[p * kLatentChannels + static_cast<size_t>(k)] = st[p];
      truth.seasonal_amp[p * kLatentChannels + static_cast<size_t>(k)] = amp[p];
    }
  }
  auto phase = smooth_field(rng, cfg.image_px, 2.0);
  truth.seasonal_phase.assign(phase.begin(), phase.end());
  return truth;
}

Period site_period(const SynthConfig& cfg, uint64_t site, int period_index) {
  check_input(period_index == 0 || period_index == 1, "site_period: index must be 0 or 1");
  Rng rng(tag(cfg.world_seed, 0x9E810D00u + site));
  int64_t year = static_cast<int64_t>(cfg.year_days) * kMsPerDay;
  TimestampMs start0 = kEpochBase + rng.uniform_int(0, 30 * kMsPerDay);
  int64_t len0 = year + rng.uniform_int(-5 * kMsPerDay, 5 * kMsPerDay);
  int64_t gap = rng.uniform_int(5 * kMsPerDay, 15 * kMsPerDay);
  int64_t len1 = year + rng.uniform_int(-5 * kMsPerDay, 5 * kMsPerDay);
  if (period_index == 0) return Period{start0, start0 + len0};
  TimestampMs start1 = start0 + len0 + gap;
  return Period{start1, start1 + len1};
}

ObservationSequence synth_generate(const SynthConfig& cfg, uint64_t site, int period_index,
                                   const Roster& roster) {
  check_input(!roster.specs.empty(), "synth_generate: empty roster");
  check_input(cfg.frames_per_source.size() == roster.specs.size(),
              "synth_generate: frames_per_source does not match roster");
  bool any_input = false;
  for (const auto& s : roster.specs) any_input |= s.is_input;
  check_input(any_input, "synth_generate: roster needs at least one input source");

  SiteTruth truth = synth_truth(cfg, site);
  Period support = site_period(cfg, site, period_index);
  int L = cfg.image_px;
  size_t np = static_cast<size_t>(L) * L;

  ObservationSequence seq;
  seq.site_id = site;
  seq.period_index = period_index;
  seq.support = support;

  std::vector<float> latent(kLatentChannels);
  for (size_t si = 0; si < roster.specs.size(); ++si) {
    const SourceSpec& spec = roster.specs[si];
    auto mix = mixing_matrix(cfg.world_seed, spec.id, spec.channels);
    Rng rng(tag(cfg.world_seed,
                0xF7A3E000u + site * 131 + static_cast<uint64_t>(period_index) * 31 +
                    static_cast<uint64_t>(spec.id)));
    int n = cfg.frames_per_source[si];
    std::vector<TimestampMs> times(static_cast<size_t>(n));
    for (auto& t : times) t = support.start + rng.uniform_int(0, support.length_ms() - 1);
    std::sort(times.begin(), times.end());

    for (TimestampMs t : times) {
      Frame frame;
      frame.source_id = spec.id;
      frame.t = t;
      frame.height = L;
      frame.width = L;
      frame.channels = spec.channels;
      frame.pixels.resize(np * static_cast<size_t>(spec.channels));
      frame.mask.assign(np, 1);
      frame.metadata.resize(static_cast<size_t>(spec.metadata_dims));
      for (auto& m : frame.metadata) m = static_cast<float>(rng.uniform());
      double meta_gain = spec.metadata_dims > 0 ? 2.0 * (frame.metadata[0] - 0.5) : 0.0;

      for (int r = 0; r < L; ++r) {
        for (int c = 0; c < L; ++c) {
          truth.latent_at(r, c, t, cfg.year_days, latent.data());
          float* px = frame.px(r, c);
          if (spec.loss_kind == LossKind::cross_entropy) {
            // one-hot class from a fixed projection of the latent
            int best = 0;
            double best_v = -1e30;
            for (int cls = 0; cls < spec.channels; ++cls) {
              double v = 0.0;
              for (int k = 0; k < kLatentChannels; ++k) {
                v += mix[static_cast<size_t>(cls) * kLatentChannels + static_cast<size_t>(k)] *
                     latent[static_cast<size_t>(k)];
              }
              if (v > best_v) {
                best_v = v;
                best = cls;
              }
            }
            for (int cls = 0; cls < spec.channels; ++cls) px[cls] = cls == best ? 1.0f : 0.0f;
            continue;
          }
          for (int ch = 0; ch < spec.channels; ++ch) {
            double m = 0.0;
            for (int k = 0; k < kLatentChannels; ++k) {
              m += mix[static_cast<size_t>(ch) * kLatentChannels + static_cast<size_t>(k)] *
                   latent[static_cast<size_t>(k)];
            }
            double noisy = m + cfg.noise_sigma * rng.normal();
            switch (spec.transform) {
              case PixelTransform::reflectance:
                // raw positive intensity whose log transform is linear in the latent
                px[ch] = static_cast<float>(std::exp(6.9 + 0.5 * noisy) - 1.0);
                break;
              case PixelTransform::db: {
                double gamma = 5.0 * noisy - 20.0 + meta_gain;
                px[ch] = static_cast<float>(std::pow(10.0, (gamma + 83.0) / 20.0));
                break;
              }
              case PixelTransform::none:
                px[ch] = static_cast<float>(noisy);
                break;
            }
          }
        }
      }

      // masks: cloud-like blobs over optical sources, sparse points for the
      // lidar-like source, full validity elsewhere
      if (spec.transform == PixelTransform::reflectance) {
        auto cloud = smooth_field(rng, L);
        double rate = std::clamp(cfg.optical_mask_rate * rng.uniform(0.5, 1.5), 0.0, 0.9);
        auto n_masked = static_cast<size_t>(std::llround(rate * static_cast<double>(np)));
        if (n_masked > 0) {
          std::vector<float> sorted(cloud.begin(), cloud.end());
          std::nth_element(sorted.begin(), sorted.end() - static_cast<int64_t>(n_masked),
                           sorted.end());
          float thr = sorted[np - n_masked];
          for (size_t p = 0; p < np; ++p) {
            if (cloud[p] >= thr) frame.mask[p] = 0;
          }
        }
      } else if (spec.name == "lidar_like") {
        for (size_t p = 0; p < np; ++p) frame.mask[p] = rng.uniform() < 0.1 ? 1 : 0;
        frame.mask[0] = 1;  // never fully masked
      }
      // masked pixels keep their finite values; losses consume the mask
      seq.frames.push_back(std::move(frame));
    }
  }

  std::stable_sort(seq.frames.begin(), seq.frames.end(),
                   [](const Frame& a, const Frame& b) { return a.t < b.t; });
  seq.validate(roster.specs);
  return seq;
}

}  // namespace terra::data
