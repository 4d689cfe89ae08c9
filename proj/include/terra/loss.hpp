#pragma once

#include "terra/data.hpp"
#include "terra/ops.hpp"
#include "terra/temporal.hpp"

// The four-term training objective: masked reconstructions (plain,
// shift-invariant, regridded, categorical), batch uniformity, teacher-student
// consistency, and text alignment; plus the student perturbation policy.

namespace terra::loss {

struct LossWeights {
  double a = 1.0;    // reconstruction
  double b = 0.05;   // batch uniformity
  double c = 0.02;   // consistency
  double d = 0.001;  // text contrastive

  void validate() const {
    check_input(a >= 0 && b >= 0 && c >= 0 && d >= 0, "loss weights must be non-negative");
    check_input(a + b + c + d > 0, "loss weights must not all vanish");
  }

  // Weights are normalized to sum 1 before training.
  LossWeights normalized() const {
    validate();
    double s = a + b + c + d;
    return {a / s, b / s, c / s, d / s};
  }
};

// ---------------------------------------------------------------------------
// Reconstruction losses
// ---------------------------------------------------------------------------

// Per-pixel weights in [0, 1]; a zero total weight contributes a zero loss
// and bumps `zero_mask_count` instead of dividing by zero.
template <class T>
core::ValT<T> masked_l1(core::ValT<T> pred, const core::TensorT<T>& target,
                        const core::TensorT<T>& weights, int* zero_mask_count = nullptr) {
  const auto& tp = pred.tensor();
  check_input(tp.shape == target.shape, "masked_l1: prediction/target shape mismatch");
  int64_t cols = tp.shape.back();
  int64_t rows = tp.numel() / cols;
  check_input(weights.numel() == rows, "masked_l1: weight count mismatch");
  double wsum = 0.0;
  for (T w : weights.data) wsum += static_cast<double>(w);
  if (wsum <= 0.0) {
    if (zero_mask_count) ++*zero_mask_count;
    return pred.tape->emit(core::TensorT<T>::scalar(T(0)), {}, nullptr);
  }
  auto diff = core::abs_op(core::sub(pred, pred.tape->constant(target)));
  auto per_row = core::reshape(core::sum_last(diff), {rows});
  auto weighted = core::mul(per_row, pred.tape->constant(weights));
  return core::scale(core::sum_all(weighted), 1.0 / (wsum * static_cast<double>(cols)));
}

// Cross-entropy against one-hot targets, masked-pixel-weighted mean.
template <class T>
core::ValT<T> masked_cross_entropy(core::ValT<T> logits, const core::TensorT<T>& onehot,
                                   const core::TensorT<T>& weights,
                                   int* zero_mask_count = nullptr) {
  const auto& tl = logits.tensor();
  check_input(tl.shape == onehot.shape, "masked_ce: logits/target shape mismatch");
  int64_t cols = tl.shape.back();
  int64_t rows = tl.numel() / cols;
  check_input(weights.numel() == rows, "masked_ce: weight count mismatch");
  double wsum = 0.0;
  for (T w : weights.data) wsum += static_cast<double>(w);
  if (wsum <= 0.0) {
    if (zero_mask_count) ++*zero_mask_count;
    return logits.tape->emit(core::TensorT<T>::scalar(T(0)), {}, nullptr);
  }
  auto logp = core::log_softmax_last(logits);
  auto picked = core::reshape(core::sum_last(core::mul(logp, logits.tape->constant(onehot))),
                              {rows});
  auto weighted = core::mul(picked, logits.tape->constant(weights));
  return core::scale(core::sum_all(weighted), -1.0 / wsum);
}

// Minimum masked L1 over integer planar shifts of the reconstruction with
// max(|dx|, |dy|) <= max_shift_px. The argmin shift is chosen from forward
// values; only the chosen shift enters the graph (the minimum is piecewise
// smooth in the prediction). Operands are (H, W, C) grids.
template <class T>
core::ValT<T> shift_invariant_loss(core::ValT<T> pred, const core::TensorT<T>& target,
                                   const core::TensorT<T>& weights, int max_shift_px,
                                   int* zero_mask_count = nullptr) {
  const auto& tp = pred.tensor();
  check_input(tp.ndim() == 3, "shift_invariant: prediction must be (H, W, C)");
  check_input(tp.shape == target.shape, "shift_invariant: shape mismatch");
  check_input(max_shift_px >= 0, "shift_invariant: negative tolerance");
  int64_t h = tp.shape[0], w = tp.shape[1], ch = tp.shape[2];
  check_input(weights.numel() == h * w, "shift_invariant: weight count mismatch");
  check_input(h > max_shift_px && w > max_shift_px, "shift_invariant: tolerance exceeds raster");

  // shifts ordered by radius so ties resolve toward the zero shift
  std::vector<std::pair<int, int>> shifts;
  for (int dy = -max_shift_px; dy <= max_shift_px; ++dy) {
    for (int dx = -max_shift_px; dx <= max_shift_px; ++dx) shifts.emplace_back(dy, dx);
  }
  std::stable_sort(shifts.begin(), shifts.end(), [](auto a, auto b) {
    return std::max(std::abs(a.first), std::abs(a.second)) <
           std::max(std::abs(b.first), std::abs(b.second));
  });

  double best_score = 0.0;
  int best = -1;
  for (size_t si = 0; si < shifts.size(); ++si) {
    auto [dy, dx] = shifts[si];
    int64_t rp = std::max(0, -dy), cp = std::max(0, -dx);
    int64_t oh = h - std::abs(dy), ow = w - std::abs(dx);
    double num = 0.0, den = 0.0;
    for (int64_t r = 0; r < oh; ++r) {
      for (int64_t c = 0; c < ow; ++c) {
        int64_t pr = rp + r, pc = cp + c;
        int64_t tr = pr + dy, tc_ = pc + dx;
        double wt = weights.data[static_cast<size_t>(tr * w + tc_)];
        if (wt <= 0.0) continue;
        const T* pv = tp.data.data() + (pr * w + pc) * ch;
        const T* tv = target.data.data() + (tr * w + tc_) * ch;
        double acc = 0.0;
        for (int64_t k = 0; k < ch; ++k) acc += std::abs(double(pv[k]) - double(tv[k]));
        num += wt * acc;
        den += wt;
      }
    }
    if (den <= 0.0) continue;
    double score = num / (den * static_cast<double>(ch));
    if (best < 0 || score < best_score) {
      best_score = score;
      best = static_cast<int>(si);
    }
  }
  if (best < 0) {
    if (zero_mask_count) ++*zero_mask_count;
    return pred.tape->emit(core::TensorT<T>::scalar(T(0)), {}, nullptr);
  }

  auto [dy, dx] = shifts[static_cast<size_t>(best)];
  int64_t rp = std::max(0, -dy), cp = std::max(0, -dx);
  int64_t oh = h - std::abs(dy), ow = w - std::abs(dx);
  int64_t rt = std::max(0, dy), ct = std::max(0, dx);
  auto pred_win = core::crop2d(pred, rp, cp, oh, ow);
  core::TensorT<T> tgt_win({oh, ow, ch});
  core::TensorT<T> wt_win({oh * ow});
  for (int64_t r = 0; r < oh; ++r) {
    for (int64_t c = 0; c < ow; ++c) {
      const T* tv = target.data.data() + ((rt + r) * w + (ct + c)) * ch;
      std::copy(tv, tv + ch, tgt_win.data.data() + (r * ow + c) * ch);
      wt_win.data[static_cast<size_t>(r * ow + c)] =
          weights.data[static_cast<size_t>((rt + r) * w + (ct + c))];
    }
  }
  return masked_l1(pred_win, tgt_win, wt_win, zero_mask_count);
}

namespace detail {

// Row-normalized area-weight pooling operator from a fine 1-D axis of
// `fine` cells to ceil(fine / ratio) coarse cells; fractional coverage at
// cell boundaries is weighted by overlap.
template <class T>
core::TensorT<T> regrid_axis(int64_t fine, double ratio) {
  auto coarse = static_cast<int64_t>(std::ceil(static_cast<double>(fine) / ratio));
  core::TensorT<T> m({coarse, fine});
  for (int64_t k = 0; k < coarse; ++k) {
    double lo = static_cast<double>(k) * ratio;
    double hi = std::min(static_cast<double>(fine), lo + ratio);
    double total = 0.0;
    for (int64_t f = 0; f < fine; ++f) {
      double ov = std::min(hi, static_cast<double>(f + 1)) - std::max(lo, static_cast<double>(f));
      if (ov > 0) {
        m.data[static_cast<size_t>(k * fine + f)] = static_cast<T>(ov);
        total += ov;
      }
    }
    for (int64_t f = 0; f < fine; ++f) {
      m.data[static_cast<size_t>(k * fine + f)] =
          static_cast<T>(m.data[static_cast<size_t>(k * fine + f)] / total);
    }
  }
  return m;
}

// Kronecker product of the two axis operators: (Kr*Kc, H*W).
template <class T>
core::TensorT<T> regrid_matrix(int64_t h, int64_t w, double ratio) {
  auto ay = regrid_axis<T>(h, ratio);
  auto ax = regrid_axis<T>(w, ratio);
  int64_t kr = ay.shape[0], kc = ax.shape[0];
  core::TensorT<T> m({kr * kc, h * w});
  for (int64_t r = 0; r < kr; ++r) {
    for (int64_t c = 0; c < kc; ++c) {
      T* row = m.data.data() + (r * kc + c) * h * w;
      for (int64_t fr = 0; fr < h; ++fr) {
        T wy = ay.data[static_cast<size_t>(r * h + fr)];
        if (wy == T(0)) continue;
        for (int64_t fc = 0; fc < w; ++fc) {
          T wx = ax.data[static_cast<size_t>(c * w + fc)];
          if (wx != T(0)) row[fr * w + fc] = wy * wx;
        }
      }
    }
  }
  return m;
}

}  // namespace detail

// Area-weighted regridding of prediction and target to a coarser grid, then
// masked L1 there. The prediction is pooled with plain area weights; the
// target pools valid pixels only, and the valid-area fraction becomes the
// coarse cell's loss weight. spacing_ratio = 1 reduces to plain masked L1.
template <class T>
core::ValT<T> regrid_loss(core::ValT<T> pred, const core::TensorT<T>& target,
                          const core::TensorT<T>& weights, double spacing_ratio,
                          int* zero_mask_count = nullptr) {
  const auto& tp = pred.tensor();
  check_input(tp.ndim() == 3, "regrid: prediction must be (H, W, C)");
  check_input(tp.shape == target.shape, "regrid: shape mismatch");
  check_input(spacing_ratio >= 1.0, "regrid: ratio must be >= 1");
  int64_t h = tp.shape[0], w = tp.shape[1], ch = tp.shape[2];
  check_input(weights.numel() == h * w, "regrid: weight count mismatch");

  if (spacing_ratio == 1.0) return masked_l1(pred, target, weights, zero_mask_count);

  auto op = detail::regrid_matrix<T>(h, w, spacing_ratio);
  int64_t coarse = op.shape[0];

  auto coarse_pred = core::matmul(pred.tape->constant(op),
                                  core::reshape(pred, {h * w, ch}));  // (coarse, C)

  core::TensorT<T> coarse_tgt({coarse, ch});
  core::TensorT<T> coarse_wt({coarse});
  for (int64_t k = 0; k < coarse; ++k) {
    double wsum = 0.0;
    std::vector<double> acc(static_cast<size_t>(ch), 0.0);
    for (int64_t f = 0; f < h * w; ++f) {
      double area = op.data[static_cast<size_t>(k * h * w + f)];
      if (area <= 0.0) continue;
      double valid = area * static_cast<double>(weights.data[static_cast<size_t>(f)]);
      wsum += valid;
      for (int64_t c = 0; c < ch; ++c) {
        acc[static_cast<size_t>(c)] += valid * target.data[static_cast<size_t>(f * ch + c)];
      }
    }
    coarse_wt.data[static_cast<size_t>(k)] = static_cast<T>(wsum);
    for (int64_t c = 0; c < ch; ++c) {
      coarse_tgt.data[static_cast<size_t>(k * ch + c)] =
          wsum > 0.0 ? static_cast<T>(acc[static_cast<size_t>(c)] / wsum) : T(0);
    }
  }
  return masked_l1(coarse_pred, coarse_tgt, coarse_wt, zero_mask_count);
}

// Dispatches to the plain, shift-invariant or regridded variant per the
// source spec and applies the source loss weight.
template <class T>
core::ValT<T> recon_loss(core::ValT<T> pred, const core::TensorT<T>& target,
                         const core::TensorT<T>& weights, const data::SourceSpec& spec,
                         int* zero_mask_count = nullptr) {
  core::ValT<T> base;
  if (spec.loss_kind == data::LossKind::cross_entropy) {
    base = masked_cross_entropy(pred, target, weights, zero_mask_count);
  } else if (spec.shift_tolerance_px > 0) {
    base = shift_invariant_loss(pred, target, weights, spec.shift_tolerance_px, zero_mask_count);
  } else if (spec.regrid_ratio > 1) {
    base = regrid_loss(pred, target, weights, static_cast<double>(spec.regrid_ratio),
                       zero_mask_count);
  } else {
    base = masked_l1(pred, target, weights, zero_mask_count);
  }
  return core::scale(base, spec.loss_weight);
}

// ---------------------------------------------------------------------------
// Batch uniformity / consistency / text alignment
// ---------------------------------------------------------------------------

// Spatial mean direction of a field, (1, 64).
template <class T>
core::ValT<T> pooled_embedding(core::ValT<T> field) {
  int64_t cells = field.shape()[0];
  core::TensorT<T> ones({1, cells});
  for (auto& v : ones.data) v = static_cast<T>(1.0 / static_cast<double>(cells));
  return core::l2_normalize_last(core::matmul(field.tape->constant(std::move(ones)), field));
}

// Masked mean of the 3x3 cell neighborhood around (row, col) of a (P, P, 64)
// field, normalized; the per-location pooling used for text alignment.
template <class T>
core::ValT<T> pooled_at(core::ValT<T> field_grid, int64_t row, int64_t col) {
  int64_t p = field_grid.shape()[0];
  int64_t r0 = std::max<int64_t>(0, row - 1), c0 = std::max<int64_t>(0, col - 1);
  int64_t r1 = std::min(p, row + 2), c1 = std::min(p, col + 2);
  auto patch = core::crop2d(field_grid, r0, c0, r1 - r0, c1 - c0);
  auto flat = core::reshape(patch, {(r1 - r0) * (c1 - c0), field_grid.shape()[2]});
  return pooled_embedding(flat);
}

// Mean |u_i . u_{i+1 mod B}| over the batch (or the raw sum when
// sum_mode): the on-tape counterpart of the geometry statistic.
template <class T>
core::ValT<T> batch_uniformity_loss(const std::vector<core::ValT<T>>& batch,
                                    bool sum_mode = false) {
  check_input(batch.size() >= 2, "batch_uniformity: need at least 2 embeddings");
  size_t b = batch.size();
  std::vector<core::ValT<T>> terms;
  for (size_t i = 0; i < b; ++i) {
    auto d = core::sum_last(core::mul(batch[i], batch[(i + 1) % b]));
    terms.push_back(core::abs_op(d));
  }
  auto total = core::sum_all(core::concat<T>(terms, 0));
  return sum_mode ? total : core::scale(total, 1.0 / static_cast<double>(b));
}

// Mean over cells of (1 - mu . mu_s) / 2.
template <class T>
core::ValT<T> consistency_loss(core::ValT<T> teacher, core::ValT<T> student) {
  check_input(teacher.shape() == student.shape(), "consistency: field shape mismatch");
  auto dots = core::sum_last(core::mul(teacher, student));
  return core::scale(core::shift(core::neg(core::mean_all(dots)), 1.0), 0.5);
}

// Symmetric cross-entropy over the scaled similarity matrix (standard CLIP
// construction; the temperature is exp(logit_scale), trainable).
template <class T>
core::ValT<T> text_contrastive_loss(core::ValT<T> image_embeds, core::ValT<T> text_embeds,
                                    core::ValT<T> logit_scale) {
  const auto& ti = image_embeds.tensor();
  check_input(ti.ndim() == 2 && ti.shape == text_embeds.tensor().shape,
              "clip: embedding batch shape mismatch");
  int64_t b = ti.shape[0];
  check_input(b >= 2, "clip: batch must be at least 2");
  auto sim = core::matmul(image_embeds, core::permute(text_embeds, {1, 0}));
  auto scaled = core::mul(sim, core::exp_op(logit_scale));
  core::TensorT<T> eye({b, b});
  for (int64_t i = 0; i < b; ++i) eye.data[static_cast<size_t>(i * b + i)] = T(1);
  auto eye_c = image_embeds.tape->constant(std::move(eye));
  auto rows = core::sum_all(core::mul(core::log_softmax_last(scaled), eye_c));
  auto cols = core::sum_all(core::mul(core::log_softmax_last(core::permute(scaled, {1, 0})), eye_c));
  return core::scale(core::add(rows, cols), -0.5 / static_cast<double>(b));
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

template <class T>
struct LossParts {
  core::ValT<T> reconstruction;  // already the mean over decoded sources
  core::ValT<T> uniformity;
  core::ValT<T> consistency;
  core::ValT<T> text;
};

template <class T>
core::ValT<T> total_loss(const LossParts<T>& parts, const LossWeights& weights) {
  LossWeights w = weights.normalized();
  auto term_ok = [](core::ValT<T> v, const char* name) {
    if (!v.tensor().all_finite()) {
      raise_numeric(std::string("total_loss: non-finite ") + name + " term");
    }
  };
  term_ok(parts.reconstruction, "reconstruction");
  term_ok(parts.uniformity, "uniformity");
  term_ok(parts.consistency, "consistency");
  term_ok(parts.text, "text");
  auto acc = core::scale(parts.reconstruction, w.a);
  acc = core::add(acc, core::scale(parts.uniformity, w.b));
  acc = core::add(acc, core::scale(parts.consistency, w.c));
  return core::add(acc, core::scale(parts.text, w.d));
}

// ---------------------------------------------------------------------------
// Student perturbation
// ---------------------------------------------------------------------------

struct PerturbationPolicy {
  struct SourceRule {
    int source_id = 0;
    double drop_prob = 0.0;        // stage 1: drop the whole source
    double frame_drop_rate = 0.0;  // stage 2(a): per-frame drop rate
  };
  std::vector<SourceRule> rules;  // input sources only
  double min_summary_days = 4.0;

  // Mirrors the production rates: the primary optical source is never
  // dropped and loses half its frames under random drops; secondary optical
  // and radar are dropped 30% of the time and lose 30% of frames.
  static PerturbationPolicy defaults_for(const std::vector<data::SourceSpec>& specs);

  void validate(const std::vector<data::SourceSpec>& specs) const;
};

enum class PerturbStrategy { random_drop = 0, forecast = 1, backcast = 2 };

struct Perturbed {
  data::ObservationSequence seq;
  temporal::Period summary;  // shared by teacher and student
  PerturbStrategy strategy{};
};

// Two-stage input perturbation: whole-source drops, then one of random
// frame drops / latter-half drop (forecast) / former-half drop (backcast).
// Pixel values of surviving frames are untouched. An emptied input set is
// resampled once, then rejected.
Perturbed perturb(const data::ObservationSequence& seq,
                  const std::vector<data::SourceSpec>& specs, const PerturbationPolicy& policy,
                  Rng& rng);

}  // namespace terra::loss
