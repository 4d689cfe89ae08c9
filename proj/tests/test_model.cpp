#include <cmath>

#include "doctest.h"
#include "terra/model.hpp"
#include "terra/train_graph.hpp"

using namespace terra;
using namespace terra::model;

namespace {

// Small but complete configuration for fast tests.
StpConfig tiny_config(int image_px = 16, int blocks = 2) {
  StpConfig cfg;
  cfg.image_px = image_px;
  cfg.blocks = blocks;
  cfg.d_precision = 8;
  cfg.d_time = 16;
  cfg.d_space = 16;
  cfg.summary_width = 16;
  cfg.decoder_width = 16;
  return cfg;
}

data::SynthConfig tiny_synth(int image_px) {
  auto cfg = data::default_synth_config();
  cfg.sites = 4;
  cfg.image_px = image_px;
  return cfg;
}

data::ObservationSequence make_sequence(const data::SynthConfig& synth,
                                        const data::Roster& roster, uint64_t site, int period) {
  // statistics come from a fully populated sequence even when the test
  // sequence restricts some sources to zero frames
  auto full = synth;
  full.frames_per_source = data::default_synth_config().frames_per_source;
  auto stats = data::compute_stats({data::synth_generate(full, site, period, roster)},
                                   roster.specs);
  auto seq = data::synth_generate(synth, site, period, roster);
  data::preprocess_sequence(seq, roster.specs, stats);
  return seq;
}

}  // namespace

TEST_CASE("encode shape contract") {
  auto roster = data::default_roster();
  auto synth = tiny_synth(16);
  synth.frames_per_source = {3, 0, 0, 0, 0, 0, 0};  // 3 frames of the primary source
  auto seq = make_sequence(synth, roster, 0, 0);

  auto cfg = tiny_config(16, 2);
  auto params = init_params<float>(cfg, roster.specs, 7);
  core::Tape tape;
  tape.set_grad_enabled(false);
  auto bound = bind_params(tape, params);
  auto enc = encode(tape, bound, cfg, roster.specs, seq);

  REQUIRE(enc.frame_feats.size() == 3);  // sum N_i output maps
  for (const auto& f : enc.frame_feats) {
    CHECK(f.shape() == std::vector<int64_t>{8, 8, cfg.summary_width});  // L/2
  }

  SUBCASE("field is (L/2)^2 unit vectors across configs") {
    for (int L : {16, 32}) {
      for (int blocks : {1, 2}) {
        auto c2 = tiny_config(L, blocks);
        auto p2 = init_params<float>(c2, roster.specs, 3);
        auto synth2 = tiny_synth(L);
        synth2.frames_per_source = {2, 0, 1, 0, 0, 0, 0};
        auto seq2 = make_sequence(synth2, roster, 1, 0);
        auto field = embed_field(p2, c2, roster.specs, seq2, seq2.support);
        REQUIRE(field.shape == std::vector<int64_t>{static_cast<int64_t>(L / 2) * (L / 2), 64});
        for (int64_t cell = 0; cell < field.shape[0]; ++cell) {
          double n = geom::norm(field.data.data() + cell * 64, 64);
          CHECK(std::abs(n - 1.0) < 1e-5);
        }
      }
    }
  }
}

TEST_CASE("time attention keys on timecodes, not positions") {
  auto roster = data::default_roster();
  auto synth = tiny_synth(16);
  synth.frames_per_source = {3, 0, 0, 0, 0, 0, 0};
  auto seq = make_sequence(synth, roster, 2, 0);
  REQUIRE(seq.frames.size() >= 3);

  auto cfg = tiny_config(16, 1);
  auto params = init_params<float>(cfg, roster.specs, 11);

  auto run = [&](const data::ObservationSequence& s) {
    core::Tape tape;
    tape.set_grad_enabled(false);
    auto bound = bind_params(tape, params);
    auto enc = encode(tape, bound, cfg, roster.specs, s);
    std::vector<core::Tensor> feats;
    for (auto& f : enc.frame_feats) feats.push_back(f.tensor());
    return feats;
  };

  auto base = run(seq);

  // swap two frames in sequence order (frames carry their own timestamps)
  data::ObservationSequence swapped = seq;
  std::swap(swapped.frames[0], swapped.frames[1]);
  // construction sorts by time; bypass validation by restoring support order
  auto permuted = run(swapped);

  REQUIRE(base.size() == permuted.size());
  // output map j follows its frame: map 0 of the swapped run matches map 1 of the base run
  for (size_t i = 0; i < base[0].data.size(); ++i) {
    CHECK(permuted[0].data[i] == doctest::Approx(base[1].data[i]).epsilon(1e-4));
    CHECK(permuted[1].data[i] == doctest::Approx(base[0].data[i]).epsilon(1e-4));
  }
}

TEST_CASE("single-frame sequence stays finite") {
  auto roster = data::default_roster();
  auto synth = tiny_synth(16);
  synth.frames_per_source = {1, 0, 0, 0, 0, 0, 0};
  auto seq = make_sequence(synth, roster, 3, 0);

  auto cfg = tiny_config(16, 1);
  auto params = init_params<float>(cfg, roster.specs, 5);
  auto field = embed_field(params, cfg, roster.specs, seq, seq.support);
  CHECK(field.all_finite());
}

TEST_CASE("summarize responds to the valid period") {
  auto roster = data::default_roster();
  auto synth = tiny_synth(16);
  auto seq = make_sequence(synth, roster, 0, 0);
  auto cfg = tiny_config(16, 1);
  auto params = init_params<float>(cfg, roster.specs, 13);

  auto mid = seq.support.start + seq.support.length_ms() / 2;
  temporal::Period first_half{seq.support.start, mid};
  temporal::Period second_half{mid, seq.support.end};

  auto fa = embed_field(params, cfg, roster.specs, seq, first_half);
  auto fb = embed_field(params, cfg, roster.specs, seq, second_half);
  double total_change = 0.0;
  for (int64_t cell = 0; cell < fa.shape[0]; ++cell) {
    std::vector<float> a(fa.data.begin() + cell * 64, fa.data.begin() + (cell + 1) * 64);
    std::vector<float> b(fb.data.begin() + cell * 64, fb.data.begin() + (cell + 1) * 64);
    total_change += geom::change_magnitude(a, b);
  }
  CHECK(total_change / static_cast<double>(fa.shape[0]) > 0.0);  // conditioning is live

  SUBCASE("valid period disjoint from support is finite and unit-norm") {
    temporal::Period future{seq.support.end + 1000, seq.support.end + 90LL * 86400000};
    auto field = embed_field(params, cfg, roster.specs, seq, future);
    CHECK(field.all_finite());
    for (int64_t cell = 0; cell < field.shape[0]; ++cell) {
      CHECK(std::abs(geom::norm(field.data.data() + cell * 64, 64) - 1.0) < 1e-5);
    }
  }

  SUBCASE("eval-mode embedding is bit-deterministic") {
    auto f1 = embed_field(params, cfg, roster.specs, seq, first_half);
    auto f2 = embed_field(params, cfg, roster.specs, seq, first_half);
    CHECK(f1.data == f2.data);
  }
}

TEST_CASE("bottleneck") {
  auto cfg = tiny_config(16, 1);
  Rng init(3);
  core::Tensor field({16, 64});
  for (auto& v : field.data) v = static_cast<float>(init.normal());
  for (int64_t c = 0; c < 16; ++c) geom::normalize_inplace(field.data.data() + c * 64, 64);

  SUBCASE("eval mode is the identity") {
    core::Tape tape;
    auto f = tape.leaf(field);
    Rng rng(1);
    auto out = bottleneck(tape, f, cfg.kappa, rng, /*train_mode=*/false);
    CHECK(out.tensor().data == field.data);
  }

  SUBCASE("train mode at kappa 8e3 concentrates near the mean direction") {
    // mean of dot over many cells tracks 1 - 63/(2 kappa)
    core::Tape tape;
    tape.set_grad_enabled(false);
    const int reps = 400;
    double acc = 0.0;
    Rng rng(2);
    for (int rep = 0; rep < reps; ++rep) {
      auto f = tape.leaf(field);
      auto out = bottleneck(tape, f, 8e3, rng, true);
      const auto& t = out.tensor();
      for (int64_t c = 0; c < 16; ++c) {
        acc += geom::dot(t.data.data() + c * 64, field.data.data() + c * 64, 64);
      }
    }
    CHECK(std::abs(acc / (reps * 16) - 0.996) < 0.001);
  }

  SUBCASE("fixed seed reproduces the field") {
    core::Tape tape;
    auto f = tape.leaf(field);
    Rng a(9), b(9);
    auto o1 = bottleneck(tape, f, 8e3, a, true);
    auto o2 = bottleneck(tape, f, 8e3, b, true);
    CHECK(o1.tensor().data == o2.tensor().data);
  }
}

TEST_CASE("decode") {
  auto roster = data::default_roster();
  auto cfg = tiny_config(16, 1);
  auto params = init_params<float>(cfg, roster.specs, 17);
  core::Tape tape;
  tape.set_grad_enabled(false);
  auto bound = bind_params(tape, params);

  Rng init(4);
  core::Tensor field({64, 64});
  for (auto& v : field.data) v = static_cast<float>(init.normal());
  for (int64_t c = 0; c < 64; ++c) geom::normalize_inplace(field.data.data() + c * 64, 64);
  auto f = tape.leaf(field);

  const auto& optical = roster.specs[0];

  SUBCASE("full-grid decode has (cells, C) shape") {
    auto out = decode(tape, bound, cfg, f, optical, 0.3, {0.5f});
    CHECK(out.shape() == std::vector<int64_t>{64, optical.channels});
  }

  SUBCASE("timecode conditioning is live") {
    auto a = decode(tape, bound, cfg, f, optical, 0.2, {0.5f});
    auto b = decode(tape, bound, cfg, f, optical, 0.7, {0.5f});
    double diff = 0.0;
    for (size_t i = 0; i < a.tensor().data.size(); ++i) {
      diff += std::abs(a.tensor().data[i] - b.tensor().data[i]);
    }
    CHECK(diff > 0.0);
  }

  SUBCASE("metadata length mismatch is rejected") {
    CHECK_THROWS_AS((void)decode(tape, bound, cfg, f, optical, 0.3, {}), Error);
    CHECK_THROWS_AS((void)decode(tape, bound, cfg, f, optical, 0.3, {0.1f, 0.2f}), Error);
  }
}

TEST_CASE("model manifest round trip") {
  auto cfg = tiny_config(32, 3);
  auto c = stp_to_config(cfg);
  auto back = stp_from_config(c);
  CHECK(back.image_px == cfg.image_px);
  CHECK(back.blocks == cfg.blocks);
  CHECK(back.d_precision == cfg.d_precision);
  CHECK(back.d_time == cfg.d_time);
  CHECK(back.d_space == cfg.d_space);
  CHECK(back.summary_width == cfg.summary_width);
  CHECK(back.kappa == cfg.kappa);
}

TEST_CASE("no dead parameters: the combined objective reaches everything") {
  auto roster = data::default_roster();
  auto synth = tiny_synth(8);
  synth.frames_per_source = {3, 2, 2, 1, 1, 1, 1};
  auto cfg = tiny_config(8, 1);
  auto params = init_params<float>(cfg, roster.specs, 23);

  std::vector<data::ObservationSequence> corpus;
  std::vector<data::ObservationSequence> raw;
  for (uint64_t s = 0; s < 2; ++s) {
    for (int p = 0; p < 2; ++p) raw.push_back(data::synth_generate(synth, s, p, roster));
  }
  auto stats = data::compute_stats(raw, roster.specs);
  for (auto& seq : raw) {
    data::preprocess_sequence(seq, roster.specs, stats);
    corpus.push_back(seq);
  }

  std::map<std::string, bool> touched;
  for (const auto& [name, t] : params.tensors) touched[name] = false;

  train::StepOptions opts;
  for (uint64_t attempt = 0; attempt < 3; ++attempt) {
    core::Tape tape;
    auto bound = bind_params(tape, params);
    std::vector<train::ElementGraph<float>> elems;
    for (size_t j = 0; j < 2; ++j) {
      elems.push_back(train::build_element_graph<float>(
          tape, bound, cfg, roster.specs, corpus[(attempt + j) % corpus.size()],
          loss::PerturbationPolicy::defaults_for(roster.specs), opts,
          splitmix64(1000 + attempt * 10 + j)));
    }
    auto obj = train::build_batch_objective<float>(tape, bound, cfg, elems, opts);
    auto grads = tape.backward(obj.total);
    for (const auto& [name, val] : bound.vals) {
      if (!grads.has(val.id)) continue;
      for (float g : grads.at(val.id).data) {
        if (g != 0.0f) {
          touched[name] = true;
          break;
        }
      }
    }
  }
  for (const auto& [name, hit] : touched) {
    CAPTURE(name);
    CHECK(hit);
  }
}
