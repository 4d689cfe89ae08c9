#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "terra/train.hpp"
#include "terra/train_graph.hpp"

using namespace terra;
using namespace terra::train;  // NOLINT

TEST_CASE("learning-rate schedule") {
  // production knots
  CHECK(lr_schedule(0, 1e-4, 1000, 100000) == 0.0);
  CHECK(lr_schedule(1000, 1e-4, 1000, 100000) == 1e-4);
  CHECK(lr_schedule(100000, 1e-4, 1000, 100000) == 0.0);
  CHECK(std::abs(lr_schedule(50500, 1e-4, 1000, 100000) - 5.0e-5) < 1e-9);

  SUBCASE("piecewise linear to 1e-12, continuous at the peak") {
    for (int64_t s : {10, 250, 999}) {
      double mid = lr_schedule(s, 1e-4, 1000, 100000);
      CHECK(std::abs(mid - 1e-4 * s / 1000.0) < 1e-12);
    }
    for (int64_t s : {2000, 42000, 99999}) {
      double mid = lr_schedule(s, 1e-4, 1000, 100000);
      CHECK(std::abs(mid - 1e-4 * (100000.0 - s) / 99000.0) < 1e-12);
    }
    CHECK(std::abs(lr_schedule(999, 1e-4, 1000, 100000) - lr_schedule(1001, 1e-4, 1000, 100000)) <
          3e-7);  // continuity across the knot
    CHECK(lr_schedule(100001, 1e-4, 1000, 100000) == 0.0);
  }
}

TEST_CASE("adam") {
  model::Params params;
  params.tensors["w"] = core::Tensor({4}, {1.0f, -2.0f, 0.5f, 3.0f});
  AdamState state;

  SUBCASE("zero gradient leaves parameters unchanged") {
    std::map<std::string, core::Tensor> grads{{"w", core::Tensor({4})}};
    auto before = params.tensors["w"].data;
    CHECK(adam_step(params, grads, state, 1e-3));
    CHECK(params.tensors["w"].data == before);
  }

  SUBCASE("zero rate leaves parameters unchanged") {
    std::map<std::string, core::Tensor> grads{{"w", core::Tensor({4}, {1.0f, 1.0f, 1.0f, 1.0f})}};
    auto before = params.tensors["w"].data;
    CHECK(adam_step(params, grads, state, 0.0));
    CHECK(params.tensors["w"].data == before);
  }

  SUBCASE("constant gradient drives the step size toward the rate") {
    std::map<std::string, core::Tensor> grads{
        {"w", core::Tensor({4}, {0.3f, 0.3f, 0.3f, 0.3f})}};
    double rate = 1e-3;
    float prev = params.tensors["w"].data[0];
    double step_size = 0.0;
    for (int i = 0; i < 500; ++i) {
      CHECK(adam_step(params, grads, state, rate));
      step_size = std::abs(params.tensors["w"].data[0] - prev);
      prev = params.tensors["w"].data[0];
    }
    CHECK(step_size == doctest::Approx(rate).epsilon(0.01));
  }

  SUBCASE("non-finite gradients skip the update") {
    std::map<std::string, core::Tensor> grads{
        {"w", core::Tensor({4}, {0.1f, std::nanf(""), 0.1f, 0.1f})}};
    auto before = params.tensors["w"].data;
    CHECK_FALSE(adam_step(params, grads, state, 1e-3));
    CHECK(params.tensors["w"].data == before);
    CHECK(state.t == 0);
  }
}

namespace {

struct TinySetup {
  model::StpConfig mcfg;
  data::Roster roster;
  std::vector<data::ObservationSequence> corpus;
};

TinySetup tiny_setup() {
  TinySetup s;
  s.roster = data::default_roster();
  s.mcfg.image_px = 8;
  s.mcfg.blocks = 1;
  s.mcfg.d_precision = 8;
  s.mcfg.d_time = 16;
  s.mcfg.d_space = 16;
  s.mcfg.summary_width = 16;
  s.mcfg.decoder_width = 16;

  auto synth = data::default_synth_config();
  synth.sites = 3;
  synth.image_px = 8;
  synth.frames_per_source = {3, 2, 2, 1, 1, 1, 1};
  std::vector<data::ObservationSequence> raw;
  for (uint64_t site = 0; site < 3; ++site) {
    for (int period = 0; period < 2; ++period) {
      raw.push_back(data::synth_generate(synth, site, period, s.roster));
    }
  }
  auto stats = data::compute_stats(raw, s.roster.specs);
  for (auto& seq : raw) {
    data::preprocess_sequence(seq, s.roster.specs, stats);
    s.corpus.push_back(std::move(seq));
  }
  return s;
}

}  // namespace

TEST_CASE("training loop") {
  auto setup = tiny_setup();
  TrainConfig cfg;
  cfg.steps = 6;
  cfg.batch_size = 2;
  cfg.warmup_steps = 2;
  cfg.total_steps = 6;
  cfg.seed = 33;
  cfg.checkpoint_every = 3;

  auto params = model::init_params<float>(setup.mcfg, setup.roster.specs, cfg.seed);

  SUBCASE("runs, emits one telemetry row per step, checkpoints on schedule") {
    int checkpoints = 0;
    TrainHooks hooks;
    hooks.on_checkpoint = [&](int64_t, const model::Params&, const AdamState&) { ++checkpoints; };
    auto result = terra::train::train(cfg, setup.mcfg, setup.roster, setup.corpus, params, AdamState{}, 0,
                        hooks);
    CHECK(result.telemetry.size() == 6);
    for (const auto& row : result.telemetry) {
      CHECK(std::isfinite(row.total));
      CHECK(row.recon_per_source.size() == setup.roster.specs.size());
    }
    CHECK(checkpoints == 2);  // steps 3 and 6
    CHECK(result.skipped_updates == 0);
  }

  SUBCASE("fixed seed reproduces telemetry bit for bit") {
    auto a = terra::train::train(cfg, setup.mcfg, setup.roster, setup.corpus, params, AdamState{}, 0);
    auto b = terra::train::train(cfg, setup.mcfg, setup.roster, setup.corpus, params, AdamState{}, 0);
    REQUIRE(a.telemetry.size() == b.telemetry.size());
    for (size_t i = 0; i < a.telemetry.size(); ++i) {
      CHECK(telemetry_row(a.telemetry[i]) == telemetry_row(b.telemetry[i]));
    }
    for (const auto& [name, t] : a.params.tensors) {
      CHECK(t.data == b.params.tensors.at(name).data);
    }
  }

  SUBCASE("resume from a checkpoint reproduces the uninterrupted run") {
    auto full = terra::train::train(cfg, setup.mcfg, setup.roster, setup.corpus, params, AdamState{}, 0);

    model::Params mid_params;
    AdamState mid_opt;
    TrainHooks catcher;
    catcher.on_checkpoint = [&](int64_t step, const model::Params& p, const AdamState& o) {
      if (step == 3) {
        mid_params = p;
        mid_opt = o;
      }
    };
    TrainConfig first = cfg;
    first.steps = 3;
    (void)terra::train::train(first, setup.mcfg, setup.roster, setup.corpus, params, AdamState{}, 0, catcher);

    auto resumed = terra::train::train(cfg, setup.mcfg, setup.roster, setup.corpus, mid_params, mid_opt, 3);
    REQUIRE(resumed.telemetry.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
      CHECK(telemetry_row(resumed.telemetry[i]) == telemetry_row(full.telemetry[i + 3]));
    }
    for (const auto& [name, t] : full.params.tensors) {
      CHECK(t.data == resumed.params.tensors.at(name).data);
    }
  }

  SUBCASE("parallel execution matches the single-thread result") {
    TrainConfig serial = cfg;
    serial.threads = 1;
    TrainConfig parallel = cfg;
    parallel.threads = 4;
    auto a = terra::train::train(serial, setup.mcfg, setup.roster, setup.corpus, params, AdamState{}, 0);
    auto b = terra::train::train(parallel, setup.mcfg, setup.roster, setup.corpus, params, AdamState{}, 0);
    for (size_t i = 0; i < a.telemetry.size(); ++i) {
      CHECK(telemetry_row(a.telemetry[i]) == telemetry_row(b.telemetry[i]));
    }
    for (const auto& [name, t] : a.params.tensors) {
      CHECK(t.data == b.params.tensors.at(name).data);
    }
  }
}

TEST_CASE("telemetry formatting") {
  auto roster = data::default_roster();
  auto header = telemetry_header(roster.specs);
  CHECK(header.find("step,recon_optical_a") == 0);
  CHECK(header.find("uniformity,consistency,text,total,lr") != std::string::npos);

  StepRow row;
  row.step = 3;
  row.recon_per_source = {0.5, 0.25};
  row.uniformity = 0.1;
  row.consistency = 0.2;
  row.text = 0.3;
  row.total = 0.9;
  row.lr = 1e-4;
  auto line = telemetry_row(row);
  CHECK(line.substr(0, 2) == "3,");
  CHECK(std::count(line.begin(), line.end(), ',') == 7);
}
