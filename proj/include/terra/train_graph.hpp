#pragma once

#include "terra/train.hpp"

// Template definitions for the step graph; included by the trainer and by
// tests that drive the objective at double precision.

namespace terra::train {

namespace detail {

// Mask-aware area pooling of a target frame onto the coarse loss grid: the
// value is the valid-area-weighted mean, the loss weight the valid-area
// fraction. Frames are an integer multiple of the loss grid, so the blocks
// are exact.
template <class T>
void pool_target(const data::Frame& frame, int out_px, core::TensorT<T>& target_out,
                 core::TensorT<T>& weight_out) {
  int64_t h = frame.height, w = frame.width, ch = frame.channels;
  check_input(h % out_px == 0 && w % out_px == 0,
              "pool_target: frame extents must be multiples of the loss grid");
  int64_t br = h / out_px, bc = w / out_px;
  target_out = core::TensorT<T>({static_cast<int64_t>(out_px), static_cast<int64_t>(out_px), ch});
  weight_out = core::TensorT<T>({static_cast<int64_t>(out_px) * out_px});
  std::vector<double> acc(static_cast<size_t>(ch));
  for (int64_t kr = 0; kr < out_px; ++kr) {
    for (int64_t kc = 0; kc < out_px; ++kc) {
      std::fill(acc.begin(), acc.end(), 0.0);
      int64_t valid = 0;
      for (int64_t r = kr * br; r < (kr + 1) * br; ++r) {
        for (int64_t c = kc * bc; c < (kc + 1) * bc; ++c) {
          if (!frame.mask[static_cast<size_t>(r * w + c)]) continue;
          ++valid;
          const float* px = frame.pixels.data() + (r * w + c) * ch;
          for (int64_t k = 0; k < ch; ++k) acc[static_cast<size_t>(k)] += px[k];
        }
      }
      int64_t cell = kr * out_px + kc;
      weight_out.data[static_cast<size_t>(cell)] =
          static_cast<T>(static_cast<double>(valid) / static_cast<double>(br * bc));
      for (int64_t k = 0; k < ch; ++k) {
        target_out.data[static_cast<size_t>(cell * ch + k)] =
            valid > 0 ? static_cast<T>(acc[static_cast<size_t>(k)] / valid) : T(0);
      }
    }
  }
}

// Summary period of length > min_len days containing `t`, inside `support`.
inline temporal::Period period_containing(temporal::TimestampMs t,
                                          const temporal::Period& support, double min_len_days,
                                          Rng& rng) {
  auto min_len = static_cast<int64_t>(min_len_days * temporal::kMsPerDay);
  int64_t span = support.length_ms();
  check_input(span >= min_len + temporal::kMsPerDay, "period_containing: support too short");
  int64_t length = min_len + 1 + rng.uniform_int(0, span - min_len - 1);
  int64_t lo = std::max(support.start, t - length + 1);
  int64_t hi = std::min(t, support.end - length);
  int64_t start = lo + (hi > lo ? rng.uniform_int(0, hi - lo) : 0);
  return temporal::Period{start, start + length};
}

}  // namespace detail

template <class T>
ElementGraph<T> build_element_graph(core::TapeT<T>& tape, const model::BoundParams<T>& bound,
                                    const model::StpConfig& cfg,
                                    const std::vector<data::SourceSpec>& specs,
                                    const data::ObservationSequence& seq,
                                    const loss::PerturbationPolicy& policy,
                                    const StepOptions& opts, uint64_t element_seed) {
  Rng root(element_seed);
  Rng gap_rng = root.split(1);
  Rng target_rng = root.split(2);
  Rng perturb_rng = root.split(3);
  Rng vmf_rng = root.split(4);
  Rng text_rng = root.split(5);

  data::ObservationSequence work = seq;
  data::gap_augment(work, specs, gap_rng);

  struct TargetSel {
    const data::SourceSpec* spec;
    data::Frame frame;  // copy survives holdout removal
    temporal::Period period;
    bool held_out;
  };
  std::vector<TargetSel> targets;
  std::vector<size_t> held_out_frames;
  for (const auto& spec : specs) {
    auto idxs = work.frames_of(spec.id);
    if (idxs.empty()) continue;
    size_t pick = idxs[static_cast<size_t>(
        target_rng.uniform_int(0, static_cast<int64_t>(idxs.size()) - 1))];
    TargetSel sel;
    sel.spec = &spec;
    sel.frame = work.frames[pick];
    sel.period = detail::period_containing(sel.frame.t, work.support, opts.min_summary_days,
                                           target_rng);
    sel.held_out = spec.is_input && target_rng.uniform() < opts.holdout_prob;
    if (sel.held_out) held_out_frames.push_back(pick);
    targets.push_back(std::move(sel));
  }

  data::ObservationSequence teacher_seq;
  teacher_seq.site_id = work.site_id;
  teacher_seq.period_index = work.period_index;
  teacher_seq.support = work.support;
  for (size_t i = 0; i < work.frames.size(); ++i) {
    bool held = false;
    for (size_t h : held_out_frames) held |= h == i;
    if (!held) teacher_seq.frames.push_back(std::move(work.frames[i]));
  }

  // Desk-scale sequences are short enough that a perturbation draw can
  // empty the inputs; draw a fresh stream when that happens. Retries are
  // keyed by the element seed, so runs stay bit-reproducible.
  loss::Perturbed student;
  for (int retry = 0;; ++retry) {
    try {
      Rng attempt = retry == 0 ? perturb_rng : root.split(100 + retry);
      student = loss::perturb(teacher_seq, specs, policy, attempt);
      break;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::invalid_input || retry >= 16) throw;
    }
  }

  ElementGraph<T> out;
  out.support = teacher_seq.support;
  out.site_id = teacher_seq.site_id;

  auto enc_t = model::encode(tape, bound, cfg, specs, teacher_seq);
  auto ctx_t = model::build_summary_context(tape, bound, cfg, enc_t);
  auto enc_s = model::encode(tape, bound, cfg, specs, student.seq);
  auto ctx_s = model::build_summary_context(tape, bound, cfg, enc_s);

  auto u_teacher = model::summarize(tape, bound, cfg, ctx_t, student.summary);
  auto u_student = model::summarize(tape, bound, cfg, ctx_s, student.summary);
  out.consistency = loss::consistency_loss(u_teacher, u_student);

  int pp = cfg.field_px();
  core::ValT<T> recon_sum;
  for (const auto& sel : targets) {
    auto field = model::summarize(tape, bound, cfg, ctx_t, sel.period);
    field = model::bottleneck(tape, field, cfg.kappa, vmf_rng, /*train_mode=*/true);
    double x = temporal::normalize_to_period(sel.frame.t, sel.period).value;
    auto pred = model::decode(tape, bound, cfg, field, *sel.spec, x, sel.frame.metadata);
    auto pred_grid = core::reshape(pred, {pp, pp, sel.spec->channels});
    core::TensorT<T> target, weights;
    detail::pool_target(sel.frame, pp, target, weights);
    auto term = loss::recon_loss(pred_grid, target, weights, *sel.spec,
                                 &out.zero_mask_warnings);
    out.recon_by_source.emplace_back(sel.spec->id,
                                     static_cast<double>(term.tensor().data[0]));
    recon_sum = recon_sum.valid() ? core::add(recon_sum, term) : term;
  }
  check_input(recon_sum.valid(), "element graph: no reconstruction targets");
  out.recon = core::scale(recon_sum, 1.0 / static_cast<double>(targets.size()));

  out.pooled = loss::pooled_embedding(u_teacher);

  out.text_period =
      temporal::sample_summary_period(teacher_seq.support, opts.min_summary_days, text_rng);
  auto text_field = model::summarize(tape, bound, cfg, ctx_t, out.text_period);
  auto grid = core::reshape(text_field, {pp, pp, cfg.embed_dim});
  auto [tr, tc] = site_text_cell(teacher_seq.site_id, pp);
  out.img_text = loss::pooled_at(grid, tr, tc);
  return out;
}

template <class T>
BatchObjective<T> build_batch_objective(core::TapeT<T>& tape,
                                        const model::BoundParams<T>& bound,
                                        const model::StpConfig& cfg,
                                        const std::vector<ElementGraph<T>>& elements,
                                        const StepOptions& opts) {
  check_input(elements.size() >= 2, "batch objective: batch must be >= 2");
  auto b = static_cast<double>(elements.size());

  core::ValT<T> recon_sum, cons_sum;
  std::vector<core::ValT<T>> pooled;
  std::vector<core::ValT<T>> img_parts, txt_parts;
  for (const auto& e : elements) {
    recon_sum = recon_sum.valid() ? core::add(recon_sum, e.recon) : e.recon;
    cons_sum = cons_sum.valid() ? core::add(cons_sum, e.consistency) : e.consistency;
    pooled.push_back(e.pooled);
    img_parts.push_back(e.img_text);
    txt_parts.push_back(model::text_embed(tape, bound, cfg, site_text_vector(e.site_id),
                                          e.text_period, e.support));
  }

  loss::LossParts<T> parts;
  parts.reconstruction = core::scale(recon_sum, 1.0 / b);
  parts.consistency = core::scale(cons_sum, 1.0 / b);
  parts.uniformity = loss::batch_uniformity_loss(pooled, opts.uniformity_sum_mode);
  parts.text = loss::text_contrastive_loss(core::concat<T>(img_parts, 0),
                                           core::concat<T>(txt_parts, 0),
                                           bound["text.logit_scale"]);

  BatchObjective<T> out;
  out.total = loss::total_loss(parts, opts.weights);
  out.recon = static_cast<double>(parts.reconstruction.tensor().data[0]);
  out.consistency = static_cast<double>(parts.consistency.tensor().data[0]);
  out.text = static_cast<double>(parts.text.tensor().data[0]);
  out.uniformity = static_cast<double>(parts.uniformity.tensor().data[0]);

  std::vector<std::vector<float>> pooled_f;
  for (const auto& p : pooled) {
    const auto& t = p.tensor();
    std::vector<float> v(t.data.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(t.data[i]);
    pooled_f.push_back(std::move(v));
  }
  out.uniformity_mean_stat = geom::batch_uniformity(pooled_f);
  return out;
}

}  // namespace terra::train
