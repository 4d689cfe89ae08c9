#pragma once

#include <map>
#include <string>

#include "terra/config.hpp"
#include "terra/data.hpp"
#include "terra/geometry.hpp"
#include "terra/grad_check.hpp"
#include "terra/ops.hpp"
#include "terra/temporal.hpp"

// Desk-scale Space-Time-Precision encoder: repeated blocks of three parallel
// operators (spatial self-attention at L/16, time-axial self-attention at
// L/8, 3x3 convolutions at L/2) joined by learned cross-resolution
// exchanges, followed by valid-period-conditioned attention pooling, a unit
// sphere bottleneck with von Mises-Fisher noise, and per-source implicit
// decoders.

namespace terra::model {

struct StpConfig {
  int image_px = 32;  // L; paths run at L/16, L/8, L/2
  int blocks = 3;
  int d_precision = 16;
  int d_time = 32;
  int d_space = 64;
  int summary_width = 32;  // width of the pooled per-frame maps
  int embed_dim = 64;      // fixed by the embedding geometry
  double kappa = 8e3;
  int decoder_width = 64;
  int decoder_depth = 2;
  int timecode_frequencies = temporal::kDefaultTimecodeFrequencies;

  int space_px() const { return std::max(1, image_px / 16); }
  int time_px() const { return std::max(1, image_px / 8); }
  int precision_px() const { return std::max(1, image_px / 2); }
  int field_px() const { return precision_px(); }
  int field_cells() const { return field_px() * field_px(); }
  int timecode_dim() const { return 2 * timecode_frequencies; }

  void validate() const {
    check_input(image_px >= 4 && image_px % 4 == 0, "stp: image_px must be a multiple of 4");
    check_input(blocks >= 1, "stp: need at least one block");
    check_input(embed_dim == geom::kEmbedDim, "stp: embed_dim is fixed at 64");
    check_input(d_precision >= 4 && d_time >= 4 && d_space >= 4, "stp: path widths too small");
    check_input(d_space % heads(d_space) == 0 && d_time % heads(d_time) == 0,
                "stp: widths must split into heads");
    check_input(kappa >= 0.0, "stp: kappa must be non-negative");
    check_input(decoder_depth == 2, "stp: decoders are two-hidden-layer MLPs");
    check_input(timecode_frequencies >= 1, "stp: need at least one timecode frequency");
  }

  // One head per 16 channels, at least one.
  static int heads(int width) { return std::max(1, width / 16); }
};

Config stp_to_config(const StpConfig& cfg);
StpConfig stp_from_config(const Config& c);

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <class T>
struct ParamsT {
  std::map<std::string, core::TensorT<T>> tensors;

  core::TensorT<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    check_input(it != tensors.end(), "params: unknown tensor " + name);
    return it->second;
  }
  const core::TensorT<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    check_input(it != tensors.end(), "params: unknown tensor " + name);
    return it->second;
  }

  template <class U>
  ParamsT<U> cast() const {
    ParamsT<U> out;
    for (const auto& [k, v] : tensors) out.tensors.emplace(k, v.template cast<U>());
    return out;
  }
};

using Params = ParamsT<float>;

namespace detail {

// Each tensor draws from its own stream keyed by name, so initialization is
// independent of creation order and stable across runs.
template <class T>
core::TensorT<T> init_tensor(uint64_t seed, const std::string& name,
                             std::vector<int64_t> shape, double scale, double bias_value = 0.0) {
  Rng rng(splitmix64(seed ^ fnv1a(name)));
  core::TensorT<T> t(std::move(shape));
  if (scale == 0.0) {
    for (auto& v : t.data) v = static_cast<T>(bias_value);
  } else {
    for (auto& v : t.data) v = static_cast<T>(scale * rng.normal());
  }
  return t;
}

}  // namespace detail

// Declared per (config, source roster); every parameter the forward pass
// reads is created here.
template <class T>
ParamsT<T> init_params(const StpConfig& cfg, const std::vector<data::SourceSpec>& specs,
                       uint64_t seed) {
  cfg.validate();
  ParamsT<T> params;
  auto add = [&](const std::string& name, std::vector<int64_t> shape, double scale,
                 double bias = 0.0) {
    params.tensors.emplace(name, detail::init_tensor<T>(seed, name, std::move(shape), scale, bias));
  };
  auto linear = [&](const std::string& stem, int64_t in, int64_t out) {
    add(stem + ".w", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
    add(stem + ".b", {out}, 0.0);
  };
  auto conv = [&](const std::string& stem, int64_t cin, int64_t cout) {
    add(stem + ".w", {3, 3, cin, cout}, 1.0 / std::sqrt(9.0 * static_cast<double>(cin)));
    add(stem + ".b", {cout}, 0.0);
  };
  auto norm = [&](const std::string& stem, int64_t dim) {
    add(stem + ".g", {dim}, 0.0, 1.0);
    add(stem + ".b", {dim}, 0.0, 0.0);
  };

  int tc = cfg.timecode_dim();
  // per-source stems
  for (const auto& spec : specs) {
    if (!spec.is_input) continue;
    linear("stem." + spec.name + ".proj", spec.channels + tc + spec.metadata_dims,
           cfg.d_precision);
  }
  conv("stem.to_space", cfg.d_precision, cfg.d_space);
  conv("stem.to_time", cfg.d_precision, cfg.d_time);
  conv("stem.to_prec", cfg.d_precision, cfg.d_precision);

  // Branches that close a residual start at zero, so a fresh trunk is a
  // stack of near-identities over the stem features and the embedding field
  // is input-correlated from the first step.
  auto zero_linear = [&](const std::string& stem, int64_t in, int64_t out) {
    add(stem + ".w", {in, out}, 0.0);
    add(stem + ".b", {out}, 0.0);
  };
  auto zero_conv = [&](const std::string& stem, int64_t cin, int64_t cout) {
    add(stem + ".w", {3, 3, cin, cout}, 0.0);
    add(stem + ".b", {cout}, 0.0);
  };

  for (int b = 0; b < cfg.blocks; ++b) {
    std::string blk = "blk" + std::to_string(b);
    // space: ViT-like self-attention over (L/16)^2 tokens
    norm(blk + ".space.ln1", cfg.d_space);
    linear(blk + ".space.qkv", cfg.d_space, 3 * cfg.d_space);
    zero_linear(blk + ".space.attn_out", cfg.d_space, cfg.d_space);
    norm(blk + ".space.ln2", cfg.d_space);
    linear(blk + ".space.mlp1", cfg.d_space, 4 * cfg.d_space);
    zero_linear(blk + ".space.mlp2", 4 * cfg.d_space, cfg.d_space);
    // time: per-pixel self-attention across frames, keyed by timecodes
    norm(blk + ".time.ln1", cfg.d_time);
    add(blk + ".time.tc.w", {tc, cfg.d_time}, 1.0 / std::sqrt(static_cast<double>(tc)));
    linear(blk + ".time.qkv", cfg.d_time, 3 * cfg.d_time);
    zero_linear(blk + ".time.attn_out", cfg.d_time, cfg.d_time);
    norm(blk + ".time.ln2", cfg.d_time);
    linear(blk + ".time.mlp1", cfg.d_time, 4 * cfg.d_time);
    zero_linear(blk + ".time.mlp2", 4 * cfg.d_time, cfg.d_time);
    // precision: two 3x3 convolutions
    norm(blk + ".prec.ln", cfg.d_precision);
    conv(blk + ".prec.conv1", cfg.d_precision, cfg.d_precision);
    zero_conv(blk + ".prec.conv2", cfg.d_precision, cfg.d_precision);
    // Laplacian-pyramid style exchange: each path feeds every other path
    zero_conv(blk + ".ex.space_time", cfg.d_space, cfg.d_time);
    zero_conv(blk + ".ex.space_prec", cfg.d_space, cfg.d_precision);
    zero_conv(blk + ".ex.time_space", cfg.d_time, cfg.d_space);
    zero_conv(blk + ".ex.time_prec", cfg.d_time, cfg.d_prec_alias());
    zero_conv(blk + ".ex.prec_space", cfg.d_precision, cfg.d_space);
    zero_conv(blk + ".ex.prec_time", cfg.d_precision, cfg.d_time);
    norm(blk + ".ex.space.ln", cfg.d_space);
    norm(blk + ".ex.time.ln", cfg.d_time);
    norm(blk + ".ex.prec.ln", cfg.d_precision);
  }

  // final learned resample of every path to L/2
  conv("final.from_space", cfg.d_space, cfg.summary_width);
  conv("final.from_time", cfg.d_time, cfg.summary_width);
  conv("final.from_prec", cfg.d_precision, cfg.summary_width);
  norm("final.ln", cfg.summary_width);

  // time-conditional summarization
  linear("pool.key", cfg.summary_width, cfg.summary_width);
  linear("pool.value", cfg.summary_width, cfg.summary_width);
  add("pool.tc.w", {tc, cfg.summary_width}, 1.0 / std::sqrt(static_cast<double>(tc)));
  linear("pool.query", 2 * tc, cfg.summary_width);
  conv("pool.kernel", cfg.summary_width, cfg.summary_width);
  linear("pool.out", cfg.summary_width, cfg.embed_dim);

  // implicit decoders, one per source
  for (const auto& spec : specs) {
    std::string stem = "dec." + spec.name;
    linear(stem + ".l1", cfg.embed_dim + tc + spec.metadata_dims, cfg.decoder_width);
    linear(stem + ".l2", cfg.decoder_width, cfg.decoder_width);
    linear(stem + ".out", cfg.decoder_width, spec.channels);
  }

  // text alignment head over frozen text vectors
  linear("text.l1", cfg.embed_dim + 2 * tc, cfg.decoder_width);
  linear("text.l2", cfg.decoder_width, cfg.decoder_width);
  linear("text.out", cfg.decoder_width, cfg.embed_dim);
  add("text.logit_scale", {1}, 0.0, std::log(1.0 / 0.07));

  return params;
}

// ---------------------------------------------------------------------------
// Graph-building helpers
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
core::TensorT<T> timecode_tensor(double x, int frequencies) {
  auto tc = temporal::make_timecode(x, frequencies);
  core::TensorT<T> t({static_cast<int64_t>(tc.values.size())});
  for (size_t i = 0; i < tc.values.size(); ++i) t.data[i] = static_cast<T>(tc.values[i]);
  return t;
}

template <class T>
core::TensorT<T> tile_rows(const core::TensorT<T>& row, int64_t rows) {
  core::TensorT<T> out({rows, row.numel()});
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(row.data.begin(), row.data.end(), out.data.begin() + r * row.numel());
  }
  return out;
}

// Fixed 2-D sinusoidal positional encoding for the spatial operator.
template <class T>
core::TensorT<T> pos_enc_2d(int h, int w, int dim) {
  core::TensorT<T> out({static_cast<int64_t>(h), static_cast<int64_t>(w),
                        static_cast<int64_t>(dim)});
  int quarter = std::max(1, dim / 4);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      T* cell = out.data.data() + (static_cast<size_t>(r) * w + c) * dim;
      for (int k = 0; k < dim; ++k) {
        int slot = k / quarter;          // 0: sin r, 1: cos r, 2: sin c, 3: cos c
        int idx = k % quarter;
        double freq = std::pow(2.0, idx);
        double pos = (slot < 2 ? r : c) / std::max(1.0, static_cast<double>(slot < 2 ? h : w));
        double angle = 6.28318530717958647692 * freq * pos;
        cell[k] = static_cast<T>((slot % 2 == 0) ? std::sin(angle) : std::cos(angle));
      }
    }
  }
  return out;
}

// Learned resampler: the 3x3 convolution runs at the smaller of the two
// resolutions, bilinear transport covers the rest.
template <class T>
core::ValT<T> resample(core::ValT<T> x, int64_t target_px, core::ValT<T> w, core::ValT<T> b) {
  int64_t src_px = x.shape()[0];
  if (target_px == src_px) return core::conv2d_3x3(x, w, b);
  if (target_px < src_px) {
    return core::conv2d_3x3(core::bilinear_resize(x, target_px, target_px), w, b);
  }
  return core::bilinear_resize(core::conv2d_3x3(x, w, b), target_px, target_px);
}

}  // namespace detail

// Parameter leaves for one tape pass, with name -> node id for gradients.
template <class T>
struct BoundParams {
  core::TapeT<T>* tape = nullptr;
  std::map<std::string, core::ValT<T>> vals;

  core::ValT<T> operator[](const std::string& name) const {
    auto it = vals.find(name);
    check_input(it != vals.end(), "bound params: unknown tensor " + name);
    return it->second;
  }
};

template <class T>
BoundParams<T> bind_params(core::TapeT<T>& tape, const ParamsT<T>& params) {
  BoundParams<T> bound;
  bound.tape = &tape;
  for (const auto& [name, tensor] : params.tensors) {
    bound.vals.emplace(name, tape.leaf(tensor));
  }
  return bound;
}

template <class T>
core::ValT<T> apply_linear(const BoundParams<T>& p, const std::string& stem, core::ValT<T> x) {
  return core::add(core::matmul(x, p[stem + ".w"]), p[stem + ".b"]);
}

template <class T>
core::ValT<T> apply_layer_norm(const BoundParams<T>& p, const std::string& stem,
                               core::ValT<T> x) {
  return core::layer_norm_last(x, p[stem + ".g"], p[stem + ".b"]);
}

// Multi-head self-attention over tokens (N, D) with `heads` heads.
template <class T>
core::ValT<T> self_attention(const BoundParams<T>& p, const std::string& stem, core::ValT<T> x,
                             int heads) {
  int64_t n = x.shape()[0];
  int64_t d = x.shape()[1];
  int64_t dh = d / heads;
  auto qkv = apply_linear(p, stem + ".qkv", x);  // (N, 3D)
  auto split = [&](int64_t offset) {
    // (N, 3D) -> (N, heads, dh) slice -> (heads, N, dh)
    auto part = core::crop2d(core::reshape(qkv, {n, 3, d}), 0, offset, n, 1);
    auto tokens = core::reshape(part, {n, static_cast<int64_t>(heads), dh});
    return core::reshape(core::permute(tokens, {1, 0, 2}),
                         {static_cast<int64_t>(heads), n, dh});
  };
  auto q = split(0), k = split(1), v = split(2);
  auto mixed = core::attention(q, k, v);  // (heads, N, dh)
  auto merged = core::reshape(core::permute(mixed, {1, 0, 2}), {n, d});
  return apply_linear(p, stem + ".attn_out", merged);
}

// Pre-norm transformer block over tokens (N, D).
template <class T>
core::ValT<T> transformer_block(const BoundParams<T>& p, const std::string& stem,
                                core::ValT<T> x, int heads) {
  auto attended = self_attention(p, stem, apply_layer_norm(p, stem + ".ln1", x), heads);
  x = core::add(x, attended);
  auto h = apply_linear(p, stem + ".mlp1", apply_layer_norm(p, stem + ".ln2", x));
  auto m = apply_linear(p, stem + ".mlp2", core::gelu(h));
  return core::add(x, m);
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

template <class T>
struct EncodeOut {
  std::vector<core::ValT<T>> frame_feats;  // per input frame, (P, P, summary_width)
  std::vector<temporal::TimestampMs> times;
  temporal::Period support;
};

// Runs the STP trunk over the input-role frames of a preprocessed sequence.
template <class T>
EncodeOut<T> encode(core::TapeT<T>& tape, const BoundParams<T>& p, const StpConfig& cfg,
                    const std::vector<data::SourceSpec>& specs,
                    const data::ObservationSequence& seq) {
  int L = cfg.image_px;
  int sp = cfg.space_px(), tp = cfg.time_px(), pp = cfg.precision_px();
  int tc_dim = cfg.timecode_dim();

  std::vector<const data::Frame*> inputs;
  for (const auto& frame : seq.frames) {
    for (const auto& spec : specs) {
      if (spec.id == frame.source_id && spec.is_input) inputs.push_back(&frame);
    }
  }
  check_input(!inputs.empty(), "encode: sequence has no input frames");

  const auto pos_enc = tape.constant(detail::pos_enc_2d<T>(sp, sp, cfg.d_space));

  // stems + per-path initial states, one per frame
  std::vector<core::ValT<T>> space_s, time_s, prec_s;
  std::vector<core::TensorT<T>> frame_tcs;
  for (const data::Frame* frame : inputs) {
    check_input(frame->height == L && frame->width == L, "encode: frame is not L x L");
    check_input(frame->processed, "encode: frame not preprocessed");
    const data::SourceSpec* spec = nullptr;
    for (const auto& s : specs) {
      if (s.id == frame->source_id) spec = &s;
    }
    double x_norm = temporal::normalize_to_period(frame->t, seq.support).value;
    auto tc = detail::timecode_tensor<T>(x_norm, cfg.timecode_frequencies);
    frame_tcs.push_back(tc);

    int64_t np = static_cast<int64_t>(L) * L;
    core::TensorT<T> px({np, static_cast<int64_t>(frame->channels)});
    for (size_t i = 0; i < frame->pixels.size(); ++i) px.data[i] = static_cast<T>(frame->pixels[i]);
    core::TensorT<T> meta({static_cast<int64_t>(frame->metadata.size())});
    for (size_t i = 0; i < frame->metadata.size(); ++i) {
      meta.data[i] = static_cast<T>(frame->metadata[i]);
    }

    std::vector<core::ValT<T>> parts;
    parts.push_back(tape.constant(std::move(px)));
    parts.push_back(tape.constant(detail::tile_rows(tc, np)));
    if (meta.numel() > 0) parts.push_back(tape.constant(detail::tile_rows(meta, np)));
    auto stacked = core::concat<T>(parts, 1);
    auto h = apply_linear(p, "stem." + spec->name + ".proj", stacked);
    auto grid = core::reshape(h, {L, L, cfg.d_precision});

    space_s.push_back(core::add(detail::resample(grid, sp, p["stem.to_space.w"],
                                                 p["stem.to_space.b"]),
                                pos_enc));
    time_s.push_back(detail::resample(grid, tp, p["stem.to_time.w"], p["stem.to_time.b"]));
    prec_s.push_back(detail::resample(grid, pp, p["stem.to_prec.w"], p["stem.to_prec.b"]));
  }

  int64_t n = static_cast<int64_t>(inputs.size());
  int space_heads = StpConfig::heads(cfg.d_space);
  int time_heads = StpConfig::heads(cfg.d_time);

  for (int b = 0; b < cfg.blocks; ++b) {
    std::string blk = "blk" + std::to_string(b);

    // space operator, per frame
    std::vector<core::ValT<T>> space_o(inputs.size());
    for (size_t j = 0; j < inputs.size(); ++j) {
      auto tokens = core::reshape(space_s[j], {static_cast<int64_t>(sp) * sp, cfg.d_space});
      auto out = transformer_block(p, blk + ".space", tokens, space_heads);
      space_o[j] = core::reshape(out, {sp, sp, cfg.d_space});
    }

    // time operator: attention across frames at each pixel of the L/8 grid
    std::vector<core::ValT<T>> time_o(inputs.size());
    {
      int64_t npix = static_cast<int64_t>(tp) * tp;
      std::vector<core::ValT<T>> cols;
      for (size_t j = 0; j < inputs.size(); ++j) {
        auto inj = core::matmul(
            core::reshape(tape.constant(frame_tcs[j]), {1, tc_dim}), p[blk + ".time.tc.w"]);
        auto conditioned = core::add(core::reshape(time_s[j], {npix, cfg.d_time}),
                                     core::reshape(inj, {cfg.d_time}));
        cols.push_back(core::reshape(conditioned, {npix, 1, cfg.d_time}));
      }
      auto stack = core::concat<T>(cols, 1);  // (npix, N, Dt)
      auto normed = apply_layer_norm(p, blk + ".time.ln1", stack);
      // heads over the token matrix (npix*N, Dt)
      auto qkv = apply_linear(p, blk + ".time.qkv",
                              core::reshape(normed, {npix * n, cfg.d_time}));
      int64_t dh = cfg.d_time / time_heads;
      auto split = [&](int64_t offset) {
        auto part = core::crop2d(core::reshape(qkv, {npix * n, 3, cfg.d_time}), 0, offset,
                                 npix * n, 1);
        auto tokens = core::reshape(part, {npix, n, static_cast<int64_t>(time_heads), dh});
        return core::reshape(core::permute(tokens, {0, 2, 1, 3}),
                             {npix * time_heads, n, dh});
      };
      auto mixed = core::attention(split(0), split(1), split(2));  // (npix*H, N, dh)
      auto grouped = core::reshape(mixed, {npix, static_cast<int64_t>(time_heads), n, dh});
      auto merged = core::reshape(core::permute(grouped, {0, 2, 1, 3}), {npix * n, cfg.d_time});
      auto attn = apply_linear(p, blk + ".time.attn_out", merged);
      auto res = core::add(core::reshape(stack, {npix * n, cfg.d_time}), attn);
      auto h = apply_linear(p, blk + ".time.mlp1", apply_layer_norm(p, blk + ".time.ln2", res));
      auto out = core::add(res, apply_linear(p, blk + ".time.mlp2", core::gelu(h)));
      auto back = core::reshape(out, {npix, n, cfg.d_time});
      for (size_t j = 0; j < inputs.size(); ++j) {
        auto col = core::crop2d(back, 0, static_cast<int64_t>(j), npix, 1);
        time_o[j] = core::reshape(col, {tp, tp, cfg.d_time});
      }
    }

    // precision operator, per frame
    std::vector<core::ValT<T>> prec_o(inputs.size());
    for (size_t j = 0; j < inputs.size(); ++j) {
      auto normed = apply_layer_norm(p, blk + ".prec.ln", prec_s[j]);
      auto c1 = core::gelu(core::conv2d_3x3(normed, p[blk + ".prec.conv1.w"],
                                            p[blk + ".prec.conv1.b"]));
      auto c2 = core::conv2d_3x3(c1, p[blk + ".prec.conv2.w"], p[blk + ".prec.conv2.b"]);
      prec_o[j] = core::add(prec_s[j], c2);
    }

    // exchange: every path contributes to every other path's next state
    for (size_t j = 0; j < inputs.size(); ++j) {
      auto sx = core::add(
          space_o[j],
          core::add(detail::resample(time_o[j], sp, p[blk + ".ex.time_space.w"],
                                     p[blk + ".ex.time_space.b"]),
                    detail::resample(prec_o[j], sp, p[blk + ".ex.prec_space.w"],
                                     p[blk + ".ex.prec_space.b"])));
      auto tx = core::add(
          time_o[j],
          core::add(detail::resample(space_o[j], tp, p[blk + ".ex.space_time.w"],
                                     p[blk + ".ex.space_time.b"]),
                    detail::resample(prec_o[j], tp, p[blk + ".ex.prec_time.w"],
                                     p[blk + ".ex.prec_time.b"])));
      auto px = core::add(
          prec_o[j],
          core::add(detail::resample(space_o[j], pp, p[blk + ".ex.space_prec.w"],
                                     p[blk + ".ex.space_prec.b"]),
                    detail::resample(time_o[j], pp, p[blk + ".ex.time_prec.w"],
                                     p[blk + ".ex.time_prec.b"])));
      space_s[j] = apply_layer_norm(p, blk + ".ex.space.ln", sx);
      time_s[j] = apply_layer_norm(p, blk + ".ex.time.ln", tx);
      prec_s[j] = apply_layer_norm(p, blk + ".ex.prec.ln", px);
    }
  }

  // terminal learned resample of every path to the precision resolution
  EncodeOut<T> out;
  out.support = seq.support;
  for (size_t j = 0; j < inputs.size(); ++j) {
    auto f = core::add(
        detail::resample(space_s[j], pp, p["final.from_space.w"], p["final.from_space.b"]),
        core::add(
            detail::resample(time_s[j], pp, p["final.from_time.w"], p["final.from_time.b"]),
            detail::resample(prec_s[j], pp, p["final.from_prec.w"], p["final.from_prec.b"])));
    out.frame_feats.push_back(apply_layer_norm(p, "final.ln", f));
    out.times.push_back(inputs[j]->t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Time-conditional summarization
// ---------------------------------------------------------------------------

// Keys/values over the frame axis are shared by every summarize call on one
// encoder output; valid periods only change the query.
template <class T>
struct SummaryContext {
  core::ValT<T> keys;    // (P^2, N, W)
  core::ValT<T> values;  // (P^2, N, W)
  temporal::Period support;
  int64_t cells = 0;
  int64_t frames = 0;
};

template <class T>
SummaryContext<T> build_summary_context(core::TapeT<T>& tape, const BoundParams<T>& p,
                                        const StpConfig& cfg, const EncodeOut<T>& enc) {
  int64_t cells = cfg.field_cells();
  int64_t n = static_cast<int64_t>(enc.frame_feats.size());
  std::vector<core::ValT<T>> kcols, vcols;
  for (size_t j = 0; j < enc.frame_feats.size(); ++j) {
    auto flat = core::reshape(enc.frame_feats[j], {cells, cfg.summary_width});
    double x_norm = temporal::normalize_to_period(enc.times[j], enc.support).value;
    auto tc = detail::timecode_tensor<T>(x_norm, cfg.timecode_frequencies);
    auto inj = core::matmul(core::reshape(tape.constant(tc), {1, cfg.timecode_dim()}),
                            p["pool.tc.w"]);
    auto keyed = core::add(apply_linear(p, "pool.key", flat),
                           core::reshape(inj, {cfg.summary_width}));
    kcols.push_back(core::reshape(keyed, {cells, 1, cfg.summary_width}));
    vcols.push_back(
        core::reshape(apply_linear(p, "pool.value", flat), {cells, 1, cfg.summary_width}));
  }
  SummaryContext<T> ctx;
  ctx.keys = core::concat<T>(kcols, 1);
  ctx.values = core::concat<T>(vcols, 1);
  ctx.support = enc.support;
  ctx.cells = cells;
  ctx.frames = n;
  return ctx;
}

// One learned query from the valid-period timecodes pools the frame axis at
// each cell; a learned 3x3 kernel smooths the pooled map, which is then
// projected to 64 dimensions and normalized onto the sphere.
template <class T>
core::ValT<T> summarize(core::TapeT<T>& tape, const BoundParams<T>& p, const StpConfig& cfg,
                        const SummaryContext<T>& ctx, const temporal::Period& valid) {
  check_input(valid.start < valid.end, "summarize: invalid valid period");
  double xs = temporal::normalize_to_period(valid.start, ctx.support).value;
  double xe = temporal::normalize_to_period(valid.end, ctx.support).value;
  auto tcs = detail::timecode_tensor<T>(xs, cfg.timecode_frequencies);
  auto tce = detail::timecode_tensor<T>(xe, cfg.timecode_frequencies);
  core::TensorT<T> qin({1, 2 * cfg.timecode_dim()});
  std::copy(tcs.data.begin(), tcs.data.end(), qin.data.begin());
  std::copy(tce.data.begin(), tce.data.end(), qin.data.begin() + cfg.timecode_dim());

  auto query = apply_linear(p, "pool.query", tape.constant(std::move(qin)));  // (1, W)
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.summary_width));
  auto kflat = core::reshape(ctx.keys, {ctx.cells * ctx.frames, cfg.summary_width});
  auto scores = core::scale(core::matmul(kflat, core::reshape(query, {cfg.summary_width, 1})),
                            inv_sqrt);
  auto weights = core::softmax_last(core::reshape(scores, {ctx.cells, ctx.frames}));
  auto pooled = core::bmm(core::reshape(weights, {ctx.cells, 1, ctx.frames}), ctx.values);
  int pp = cfg.field_px();
  auto grid = core::reshape(pooled, {pp, pp, cfg.summary_width});
  auto smoothed = core::conv2d_3x3(grid, p["pool.kernel.w"], p["pool.kernel.b"]);
  auto flat = core::reshape(smoothed, {ctx.cells, cfg.summary_width});
  auto embedded = apply_linear(p, "pool.out", flat);
  return core::l2_normalize_last(embedded);  // (P^2, 64)
}

// ---------------------------------------------------------------------------
// Bottleneck and decoders
// ---------------------------------------------------------------------------

// Training-mode bottleneck: each cell's mean direction is replaced by a
// reparameterized VMF draw (Wood tangent weight, uniform tangent direction),
// keeping the graph differentiable with respect to the mean. Evaluation mode
// passes mean directions through unchanged.
template <class T>
core::ValT<T> bottleneck(core::TapeT<T>& tape, core::ValT<T> field, double kappa, Rng& rng,
                         bool train_mode) {
  if (!train_mode) return field;
  int64_t cells = field.shape()[0];
  int64_t dim = field.shape()[1];
  core::TensorT<T> w_along({cells});
  core::TensorT<T> w_tangent({cells});
  core::TensorT<T> raw({cells, dim});
  for (int64_t c = 0; c < cells; ++c) {
    double w = geom::vmf_tangent_weight(kappa, static_cast<size_t>(dim), rng);
    w_along.data[static_cast<size_t>(c)] = static_cast<T>(w);
    w_tangent.data[static_cast<size_t>(c)] = static_cast<T>(std::sqrt(std::max(0.0, 1.0 - w * w)));
    for (int64_t d = 0; d < dim; ++d) {
      raw.data[static_cast<size_t>(c * dim + d)] = static_cast<T>(rng.normal());
    }
  }
  auto r = tape.constant(std::move(raw));
  auto along = core::sum_last(core::mul(r, field));            // (cells)
  auto tangent = core::sub(r, core::scale_rows(field, along));  // r - (r.mu) mu
  auto tangent_unit = core::l2_normalize_last(tangent);
  auto sample = core::add(core::scale_rows(field, tape.constant(std::move(w_along))),
                          core::scale_rows(tangent_unit, tape.constant(std::move(w_tangent))));
  return core::l2_normalize_last(sample);
}

// Per-cell implicit decoder: embedding + target timecode + sensor metadata
// through a two-hidden-layer MLP to C_i channels (logits when categorical).
template <class T>
core::ValT<T> decode(core::TapeT<T>& tape, const BoundParams<T>& p, const StpConfig& cfg,
                     core::ValT<T> field, const data::SourceSpec& spec, double time_in_valid,
                     const std::vector<float>& metadata) {
  check_input(metadata.size() == static_cast<size_t>(spec.metadata_dims),
              "decode: metadata length mismatch");
  int64_t cells = field.shape()[0];
  auto tc = detail::timecode_tensor<T>(time_in_valid, cfg.timecode_frequencies);
  std::vector<core::ValT<T>> parts{field, tape.constant(detail::tile_rows(tc, cells))};
  if (!metadata.empty()) {
    core::TensorT<T> meta({static_cast<int64_t>(metadata.size())});
    for (size_t i = 0; i < metadata.size(); ++i) meta.data[i] = static_cast<T>(metadata[i]);
    parts.push_back(tape.constant(detail::tile_rows(meta, cells)));
  }
  std::string stem = "dec." + spec.name;
  auto h = core::gelu(apply_linear(p, stem + ".l1", core::concat<T>(parts, 1)));
  auto h2 = core::gelu(apply_linear(p, stem + ".l2", h));
  return apply_linear(p, stem + ".out", h2);  // (cells, C)
}

// Text head: frozen text vector conditioned on a summary-period timecode,
// projected onto the sphere.
template <class T>
core::ValT<T> text_embed(core::TapeT<T>& tape, const BoundParams<T>& p, const StpConfig& cfg,
                         const std::vector<float>& text_vec, const temporal::Period& summary,
                         const temporal::Period& support) {
  check_input(text_vec.size() == static_cast<size_t>(cfg.embed_dim),
              "text_embed: text vector must be 64-d");
  double xs = temporal::normalize_to_period(summary.start, support).value;
  double xe = temporal::normalize_to_period(summary.end, support).value;
  auto tcs = detail::timecode_tensor<T>(xs, cfg.timecode_frequencies);
  auto tce = detail::timecode_tensor<T>(xe, cfg.timecode_frequencies);
  core::TensorT<T> in({1, cfg.embed_dim + 2 * cfg.timecode_dim()});
  for (int i = 0; i < cfg.embed_dim; ++i) in.data[static_cast<size_t>(i)] = static_cast<T>(text_vec[static_cast<size_t>(i)]);
  std::copy(tcs.data.begin(), tcs.data.end(), in.data.begin() + cfg.embed_dim);
  std::copy(tce.data.begin(), tce.data.end(),
            in.data.begin() + cfg.embed_dim + cfg.timecode_dim());
  auto h = core::gelu(apply_linear(p, "text.l1", tape.constant(std::move(in))));
  auto h2 = core::gelu(apply_linear(p, "text.l2", h));
  return core::l2_normalize_last(apply_linear(p, "text.out", h2));  // (1, 64)
}

// ---------------------------------------------------------------------------
// Inference convenience
// ---------------------------------------------------------------------------

// Eval-mode embedding field as plain floats, (P*P, 64) row-major.
core::Tensor embed_field(const Params& params, const StpConfig& cfg,
                         const std::vector<data::SourceSpec>& specs,
                         const data::ObservationSequence& seq, const temporal::Period& valid);

}  // namespace terra::model
