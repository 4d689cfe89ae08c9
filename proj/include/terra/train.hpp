#pragma once

#include <functional>
#include <optional>

#include "terra/loss.hpp"
#include "terra/model.hpp"

namespace terra::train {

struct TrainConfig {
  int64_t steps = 2000;
  int batch_size = 8;
  // schedule; production values are 1e-4 peak over [0, 1e3) up then [1e3, 1e5] down
  double lr_peak = 1e-4;
  int64_t warmup_steps = 20;
  int64_t total_steps = 2000;
  loss::LossWeights weights{};
  bool uniformity_sum_mode = false;
  double holdout_prob = 0.5;  // chance a target frame is withheld from the inputs
  uint64_t seed = 1;
  int threads = 0;  // 0 = hardware default
  int64_t checkpoint_every = 500;

  void validate() const {
    check_input(steps >= 1, "train: steps must be positive");
    check_input(batch_size >= 2, "train: batch uniformity requires batch_size >= 2");
    check_input(lr_peak > 0, "train: lr_peak must be positive");
    check_input(warmup_steps >= 1 && warmup_steps < total_steps,
                "train: warmup must precede total");
    check_input(holdout_prob >= 0 && holdout_prob <= 1, "train: bad holdout probability");
    weights.validate();
  }
};

Config train_to_config(const TrainConfig& cfg);
TrainConfig train_from_config(const Config& c);

// Piecewise linear: 0 -> lr_peak over [0, warmup), lr_peak -> 0 over
// [warmup, total], 0 after.
double lr_schedule(int64_t step, double lr_peak, int64_t warmup_steps, int64_t total_steps);

inline double lr_schedule(int64_t step, const TrainConfig& cfg) {
  return lr_schedule(step, cfg.lr_peak, cfg.warmup_steps, cfg.total_steps);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::map<std::string, core::Tensor> m;
  std::map<std::string, core::Tensor> v;
  int64_t t = 0;
};

// Standard bias-corrected Adam update. Returns false (and leaves parameters
// and state untouched) when any gradient entry is non-finite.
bool adam_step(model::Params& params, const std::map<std::string, core::Tensor>& grads,
               AdamState& state, double rate, const AdamConfig& acfg = {});

// ---------------------------------------------------------------------------
// Step graph
// ---------------------------------------------------------------------------

// Everything the objective needs beyond the weights.
struct StepOptions {
  loss::LossWeights weights{};
  bool uniformity_sum_mode = false;
  double holdout_prob = 0.5;
  double min_summary_days = 4.0;
};

// Frozen synthetic stand-ins for geotagged text: a fixed unit vector and a
// field cell per site.
std::vector<float> site_text_vector(uint64_t site);
std::pair<int, int> site_text_cell(uint64_t site, int field_px);

// Per-element graph outputs feeding the batch-level objective.
template <class T>
struct ElementGraph {
  core::ValT<T> recon;       // mean weighted reconstruction over decoded sources
  core::ValT<T> consistency; // teacher/student agreement
  core::ValT<T> pooled;      // (1, 64) teacher mean direction for uniformity
  core::ValT<T> img_text;    // (1, 64) teacher pooled at the site's text cell
  temporal::Period text_period;
  temporal::Period support;
  uint64_t site_id = 0;
  std::vector<std::pair<int, double>> recon_by_source;  // (source id, value)
  int zero_mask_warnings = 0;
};

// Builds teacher + student forward passes, per-source reconstructions and
// the per-element embeddings on `tape`. Randomness is fully determined by
// `element_seed`.
template <class T>
ElementGraph<T> build_element_graph(core::TapeT<T>& tape, const model::BoundParams<T>& bound,
                                    const model::StpConfig& cfg,
                                    const std::vector<data::SourceSpec>& specs,
                                    const data::ObservationSequence& seq,
                                    const loss::PerturbationPolicy& policy,
                                    const StepOptions& opts, uint64_t element_seed);

template <class T>
struct BatchObjective {
  core::ValT<T> total;
  double recon = 0, uniformity = 0, consistency = 0, text = 0;
  double uniformity_mean_stat = 0;  // mean-mode statistic, for telemetry
};

// Joins element graphs into the four-term objective. The text head runs
// here so its parameters sit on the joining tape.
template <class T>
BatchObjective<T> build_batch_objective(core::TapeT<T>& tape,
                                        const model::BoundParams<T>& bound,
                                        const model::StpConfig& cfg,
                                        const std::vector<ElementGraph<T>>& elements,
                                        const StepOptions& opts);

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct StepRow {
  int64_t step = 0;
  std::vector<double> recon_per_source;  // aligned with the roster
  double uniformity = 0;  // mean-mode statistic
  double consistency = 0;
  double text = 0;
  double total = 0;
  double lr = 0;
};

std::string telemetry_header(const std::vector<data::SourceSpec>& specs);
std::string telemetry_row(const StepRow& row);

struct TrainHooks {
  std::function<void(const StepRow&)> on_step;
  std::function<void(int64_t step, const model::Params&, const AdamState&)> on_checkpoint;
};

struct TrainResult {
  model::Params params;
  AdamState opt;
  std::vector<StepRow> telemetry;
  int64_t skipped_updates = 0;  // non-finite gradients
  int64_t zero_mask_warnings = 0;
};

// Runs steps [start_step, cfg.steps) over a preprocessed corpus. Fully
// deterministic for a fixed seed: every random choice is keyed by
// (seed, step, element), so parallel and resumed runs reproduce the
// sequential run bit for bit.
TrainResult train(const TrainConfig& cfg, const model::StpConfig& mcfg,
                  const data::Roster& roster,
                  const std::vector<data::ObservationSequence>& corpus, model::Params params,
                  AdamState opt, int64_t start_step = 0, const TrainHooks& hooks = {});

}  // namespace terra::train
