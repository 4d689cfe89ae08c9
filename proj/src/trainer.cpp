#include "terra/train.hpp"

#include <cmath>
#include <sstream>

#include "terra/thread_pool.hpp"
#include "terra/train_graph.hpp"

namespace terra::train {

Config train_to_config(const TrainConfig& cfg) {
  Config c;
  auto fmt = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return std::string(buf);
  };
  c.set("train.steps", std::to_string(cfg.steps));
  c.set("train.batch_size", std::to_string(cfg.batch_size));
  c.set("train.lr_peak", fmt(cfg.lr_peak));
  c.set("train.warmup_steps", std::to_string(cfg.warmup_steps));
  c.set("train.total_steps", std::to_string(cfg.total_steps));
  c.set("train.weight_a", fmt(cfg.weights.a));
  c.set("train.weight_b", fmt(cfg.weights.b));
  c.set("train.weight_c", fmt(cfg.weights.c));
  c.set("train.weight_d", fmt(cfg.weights.d));
  c.set("train.uniformity_sum_mode", cfg.uniformity_sum_mode ? "1" : "0");
  c.set("train.holdout_prob", fmt(cfg.holdout_prob));
  c.set("train.seed", std::to_string(cfg.seed));
  c.set("train.threads", std::to_string(cfg.threads));
  c.set("train.checkpoint_every", std::to_string(cfg.checkpoint_every));
  return c;
}

TrainConfig train_from_config(const Config& c) {
  TrainConfig cfg;
  cfg.steps = c.get_int("train.steps", cfg.steps);
  cfg.batch_size = static_cast<int>(c.get_int("train.batch_size", cfg.batch_size));
  cfg.lr_peak = c.get_double("train.lr_peak", cfg.lr_peak);
  cfg.warmup_steps = c.get_int("train.warmup_steps", cfg.warmup_steps);
  cfg.total_steps = c.get_int("train.total_steps", cfg.total_steps);
  cfg.weights.a = c.get_double("train.weight_a", cfg.weights.a);
  cfg.weights.b = c.get_double("train.weight_b", cfg.weights.b);
  cfg.weights.c = c.get_double("train.weight_c", cfg.weights.c);
  cfg.weights.d = c.get_double("train.weight_d", cfg.weights.d);
  cfg.uniformity_sum_mode = c.get_bool("train.uniformity_sum_mode", cfg.uniformity_sum_mode);
  cfg.holdout_prob = c.get_double("train.holdout_prob", cfg.holdout_prob);
  cfg.seed = static_cast<uint64_t>(c.get_int("train.seed", static_cast<int64_t>(cfg.seed)));
  cfg.threads = static_cast<int>(c.get_int("train.threads", cfg.threads));
  cfg.checkpoint_every = c.get_int("train.checkpoint_every", cfg.checkpoint_every);
  cfg.validate();
  return cfg;
}

double lr_schedule(int64_t step, double lr_peak, int64_t warmup_steps, int64_t total_steps) {
  check_input(step >= 0, "lr_schedule: negative step");
  check_input(warmup_steps >= 1 && warmup_steps < total_steps, "lr_schedule: bad knots");
  if (step >= total_steps) return 0.0;
  if (step < warmup_steps) {
    return lr_peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  return lr_peak * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup_steps);
}

bool adam_step(model::Params& params, const std::map<std::string, core::Tensor>& grads,
               AdamState& state, double rate, const AdamConfig& acfg) {
  for (const auto& [name, grad] : grads) {
    (void)name;
    if (!grad.all_finite()) return false;
  }
  state.t += 1;
  double bc1 = 1.0 - std::pow(acfg.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(acfg.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params.tensors) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const core::Tensor& g = git->second;
    check_input(g.shape == p.shape, "adam: gradient shape mismatch for " + name);
    auto& m = state.m.try_emplace(name, core::Tensor(p.shape)).first->second;
    auto& v = state.v.try_emplace(name, core::Tensor(p.shape)).first->second;
    for (size_t i = 0; i < p.data.size(); ++i) {
      double gi = g.data[i];
      double mi = acfg.beta1 * m.data[i] + (1.0 - acfg.beta1) * gi;
      double vi = acfg.beta2 * v.data[i] + (1.0 - acfg.beta2) * gi * gi;
      m.data[i] = static_cast<float>(mi);
      v.data[i] = static_cast<float>(vi);
      double update = rate * (mi / bc1) / (std::sqrt(vi / bc2) + acfg.eps);
      p.data[i] = static_cast<float>(p.data[i] - update);
    }
  }
  return true;
}

std::vector<float> site_text_vector(uint64_t site) {
  Rng rng(splitmix64(site ^ 0x7E47C0DEull));
  std::vector<float> v(static_cast<size_t>(geom::kEmbedDim));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  geom::normalize_inplace(v.data(), v.size());
  return v;
}

std::pair<int, int> site_text_cell(uint64_t site, int field_px) {
  Rng rng(splitmix64(site ^ 0x7E47CE11ull));
  int r = static_cast<int>(rng.uniform_int(0, field_px - 1));
  int c = static_cast<int>(rng.uniform_int(0, field_px - 1));
  return {r, c};
}

std::string telemetry_header(const std::vector<data::SourceSpec>& specs) {
  std::string out = "step";
  for (const auto& s : specs) out += ",recon_" + s.name;
  out += ",uniformity,consistency,text,total,lr";
  return out;
}

std::string telemetry_row(const StepRow& row) {
  std::ostringstream ss;
  ss.precision(9);
  ss << row.step;
  for (double r : row.recon_per_source) ss << ',' << r;
  ss << ',' << row.uniformity << ',' << row.consistency << ',' << row.text << ',' << row.total
     << ',' << row.lr;
  return ss.str();
}

namespace {

uint64_t mix3(uint64_t seed, uint64_t step, uint64_t lane) {
  return splitmix64(seed ^ splitmix64(step * 0x9e3779b97f4a7c15ull + lane));
}

struct ElementWork {
  core::Tape tape;
  std::optional<model::BoundParams<float>> bound;
  std::optional<ElementGraph<float>> graph;
};

}  // namespace

TrainResult train(const TrainConfig& cfg, const model::StpConfig& mcfg,
                  const data::Roster& roster,
                  const std::vector<data::ObservationSequence>& corpus, model::Params params,
                  AdamState opt, int64_t start_step, const TrainHooks& hooks) {
  cfg.validate();
  mcfg.validate();
  check_input(!corpus.empty(), "train: empty corpus");

  auto policy = loss::PerturbationPolicy::defaults_for(roster.specs);
  StepOptions opts;
  opts.weights = cfg.weights;
  opts.uniformity_sum_mode = cfg.uniformity_sum_mode;
  opts.holdout_prob = cfg.holdout_prob;

  unsigned threads = cfg.threads > 0 ? static_cast<unsigned>(cfg.threads)
                                     : ThreadPool::default_threads();
  ThreadPool pool(std::min<unsigned>(threads, static_cast<unsigned>(cfg.batch_size)));

  TrainResult result;
  result.telemetry.reserve(static_cast<size_t>(cfg.steps - start_step));
  int consecutive_failures = 0;

  for (int64_t step = start_step; step < cfg.steps; ++step) {
    // batch assembly, keyed by the absolute step
    Rng batch_rng(mix3(cfg.seed, static_cast<uint64_t>(step), 0xBA7C4));
    std::vector<size_t> batch(static_cast<size_t>(cfg.batch_size));
    for (auto& idx : batch) {
      idx = static_cast<size_t>(
          batch_rng.uniform_int(0, static_cast<int64_t>(corpus.size()) - 1));
    }

    StepRow row;
    row.step = step;
    row.lr = lr_schedule(step, cfg);
    bool step_ok = true;
    std::string failure;

    std::map<std::string, core::Tensor> total_grads;
    try {
      // per-element forward graphs, parallel across the batch
      std::vector<ElementWork> work(batch.size());
      std::exception_ptr element_error;
      pool.parallel_for(batch.size(), [&](size_t j) {
        work[j].bound.emplace(model::bind_params(work[j].tape, params));
        work[j].graph.emplace(build_element_graph<float>(
            work[j].tape, *work[j].bound, mcfg, roster.specs, corpus[batch[j]], policy, opts,
            mix3(cfg.seed, static_cast<uint64_t>(step), 1000 + j)));
      });

      // joining tape: leaves mirror the element outputs
      core::Tape join;
      auto join_bound = model::bind_params(join, params);
      std::vector<ElementGraph<float>> leaves;
      struct LeafIds {
        core::Val recon, cons, pooled, img;
      };
      std::vector<LeafIds> ids(batch.size());
      for (size_t j = 0; j < batch.size(); ++j) {
        const auto& g = *work[j].graph;
        ElementGraph<float> leaf;
        ids[j].recon = join.leaf(g.recon.tensor());
        ids[j].cons = join.leaf(g.consistency.tensor());
        ids[j].pooled = join.leaf(g.pooled.tensor());
        ids[j].img = join.leaf(g.img_text.tensor());
        leaf.recon = ids[j].recon;
        leaf.consistency = ids[j].cons;
        leaf.pooled = ids[j].pooled;
        leaf.img_text = ids[j].img;
        leaf.text_period = g.text_period;
        leaf.support = g.support;
        leaf.site_id = g.site_id;
        leaves.push_back(leaf);
        result.zero_mask_warnings += g.zero_mask_warnings;
      }
      auto objective = build_batch_objective<float>(join, join_bound, mcfg, leaves, opts);

      row.total = objective.total.tensor().data[0];
      row.uniformity = objective.uniformity_mean_stat;
      row.consistency = objective.consistency;
      row.text = objective.text;
      row.recon_per_source.assign(roster.specs.size(), 0.0);
      {
        std::vector<int> counts(roster.specs.size(), 0);
        for (const auto& w : work) {
          for (const auto& [sid, value] : w.graph->recon_by_source) {
            row.recon_per_source[static_cast<size_t>(sid)] += value;
            counts[static_cast<size_t>(sid)] += 1;
          }
        }
        for (size_t s = 0; s < counts.size(); ++s) {
          if (counts[s] > 0) row.recon_per_source[s] /= counts[s];
        }
      }

      auto join_grads = join.backward(objective.total);

      // seed element backward passes with the join cotangents, in parallel
      std::vector<std::map<std::string, core::Tensor>> elem_grads(batch.size());
      pool.parallel_for(batch.size(), [&](size_t j) {
        std::vector<std::pair<core::Val, core::Tensor>> seeds;
        auto push_seed = [&](core::Val leaf, core::Val source) {
          if (join_grads.has(leaf.id)) seeds.emplace_back(source, join_grads.at(leaf.id));
        };
        push_seed(ids[j].recon, work[j].graph->recon);
        push_seed(ids[j].cons, work[j].graph->consistency);
        push_seed(ids[j].pooled, work[j].graph->pooled);
        push_seed(ids[j].img, work[j].graph->img_text);
        auto grads = work[j].tape.backward_seeded(seeds);
        for (const auto& [name, val] : work[j].bound->vals) {
          if (grads.has(val.id)) elem_grads[j].emplace(name, grads.at(val.id));
        }
      });

      // fixed-order reduction: elements first, then the joining tape
      for (size_t j = 0; j < batch.size(); ++j) {
        for (auto& [name, g] : elem_grads[j]) {
          auto it = total_grads.find(name);
          if (it == total_grads.end()) {
            total_grads.emplace(name, g);
          } else {
            for (size_t i = 0; i < g.data.size(); ++i) it->second.data[i] += g.data[i];
          }
        }
      }
      for (const auto& [name, val] : join_bound.vals) {
        if (!join_grads.has(val.id)) continue;
        const auto& g = join_grads.at(val.id);
        auto it = total_grads.find(name);
        if (it == total_grads.end()) {
          total_grads.emplace(name, g);
        } else {
          for (size_t i = 0; i < g.data.size(); ++i) it->second.data[i] += g.data[i];
        }
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::numeric) throw;
      step_ok = false;
      failure = e.what();
    }

    if (step_ok && std::isfinite(row.total)) {
      consecutive_failures = 0;
      if (!adam_step(params, total_grads, opt, row.lr)) {
        ++result.skipped_updates;
      }
    } else {
      ++consecutive_failures;
      ++result.skipped_updates;
      if (consecutive_failures > 3) {
        raise_numeric("train: non-finite loss in more than 3 consecutive steps at step " +
                      std::to_string(step) + (failure.empty() ? "" : ": " + failure));
      }
    }

    result.telemetry.push_back(row);
    if (hooks.on_step) hooks.on_step(row);
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 &&
        ((step + 1) % cfg.checkpoint_every == 0 || step + 1 == cfg.steps)) {
      hooks.on_checkpoint(step + 1, params, opt);
    }
  }

  result.params = std::move(params);
  result.opt = std::move(opt);
  return result;
}

}  // namespace terra::train
