#include "terra/loss.hpp"

namespace terra::loss {

using data::ObservationSequence;
using data::SourceSpec;
using temporal::Period;

PerturbationPolicy PerturbationPolicy::defaults_for(const std::vector<SourceSpec>& specs) {
  PerturbationPolicy policy;
  bool primary_seen = false;
  for (const auto& spec : specs) {
    if (!spec.is_input) continue;
    SourceRule rule;
    rule.source_id = spec.id;
    if (!primary_seen) {
      // first input source is the primary: never dropped, half its frames
      // removed under random drops
      primary_seen = true;
      rule.drop_prob = 0.0;
      rule.frame_drop_rate = 0.5;
    } else {
      rule.drop_prob = 0.3;
      rule.frame_drop_rate = 0.3;
    }
    policy.rules.push_back(rule);
  }
  return policy;
}

void PerturbationPolicy::validate(const std::vector<SourceSpec>& specs) const {
  check_input(!rules.empty(), "perturbation: no rules");
  check_input(min_summary_days > 0, "perturbation: summary bound must be positive");
  int first_input = -1;
  for (const auto& spec : specs) {
    if (spec.is_input) {
      first_input = spec.id;
      break;
    }
  }
  for (const auto& rule : rules) {
    check_input(rule.drop_prob >= 0 && rule.drop_prob <= 1, "perturbation: bad drop prob");
    check_input(rule.frame_drop_rate >= 0 && rule.frame_drop_rate <= 1,
                "perturbation: bad frame drop rate");
    if (rule.source_id == first_input) {
      check_input(rule.drop_prob == 0.0, "perturbation: the primary source is never dropped");
    }
    bool known = false, input = false;
    for (const auto& spec : specs) {
      if (spec.id == rule.source_id) {
        known = true;
        input = spec.is_input;
      }
    }
    check_input(known && input, "perturbation: rule for a non-input source");
  }
}

namespace {

Perturbed perturb_once(const ObservationSequence& seq, const std::vector<SourceSpec>& specs,
                       const PerturbationPolicy& policy, Rng& rng) {
  auto rule_for = [&](int source_id) -> const PerturbationPolicy::SourceRule* {
    for (const auto& r : policy.rules) {
      if (r.source_id == source_id) return &r;
    }
    return nullptr;
  };
  auto is_input = [&](int source_id) {
    for (const auto& s : specs) {
      if (s.id == source_id) return s.is_input;
    }
    return false;
  };

  // stage 1: whole-source drops
  std::vector<char> source_dropped(specs.size(), 0);
  for (const auto& rule : policy.rules) {
    if (rng.uniform() < rule.drop_prob) {
      source_dropped[static_cast<size_t>(rule.source_id)] = 1;
    }
  }

  // stage 2: one of three strategies
  auto strategy = static_cast<PerturbStrategy>(rng.uniform_int(0, 2));
  Period support = seq.support;
  temporal::TimestampMs mid = support.start + support.length_ms() / 2;

  Perturbed out;
  out.strategy = strategy;
  out.seq.site_id = seq.site_id;
  out.seq.period_index = seq.period_index;
  out.seq.support = support;

  for (const auto& frame : seq.frames) {
    if (!is_input(frame.source_id)) {
      out.seq.frames.push_back(frame);  // target-only frames are not inputs
      continue;
    }
    if (source_dropped[static_cast<size_t>(frame.source_id)]) continue;
    bool keep = true;
    switch (strategy) {
      case PerturbStrategy::random_drop: {
        const auto* rule = rule_for(frame.source_id);
        double rate = rule ? rule->frame_drop_rate : 0.0;
        keep = rng.uniform() >= rate;
        break;
      }
      case PerturbStrategy::forecast:
        keep = frame.t < mid;  // latter half dropped
        break;
      case PerturbStrategy::backcast:
        keep = frame.t >= mid;  // former half dropped
        break;
    }
    if (keep) out.seq.frames.push_back(frame);
  }

  switch (strategy) {
    case PerturbStrategy::random_drop:
      out.summary = temporal::sample_summary_period(support, policy.min_summary_days, rng);
      break;
    case PerturbStrategy::forecast:
      out.summary = Period{mid, support.end};
      break;
    case PerturbStrategy::backcast:
      out.summary = Period{support.start, mid};
      break;
  }
  return out;
}

bool has_input_frames(const ObservationSequence& seq, const std::vector<SourceSpec>& specs) {
  for (const auto& frame : seq.frames) {
    for (const auto& spec : specs) {
      if (spec.id == frame.source_id && spec.is_input) return true;
    }
  }
  return false;
}

}  // namespace

Perturbed perturb(const ObservationSequence& seq, const std::vector<SourceSpec>& specs,
                  const PerturbationPolicy& policy, Rng& rng) {
  policy.validate(specs);
  check_input(has_input_frames(seq, specs), "perturb: sequence has no input frames");
  Perturbed out = perturb_once(seq, specs, policy, rng);
  if (!has_input_frames(out.seq, specs)) {
    out = perturb_once(seq, specs, policy, rng);  // one resample
    check_input(has_input_frames(out.seq, specs),
                "perturb: perturbation emptied the input sequence twice");
  }
  return out;
}

}  // namespace terra::loss
