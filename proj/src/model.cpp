#include "terra/model.hpp"

namespace terra::model {

Config stp_to_config(const StpConfig& cfg) {
  Config c;
  c.set("model.image_px", std::to_string(cfg.image_px));
  c.set("model.blocks", std::to_string(cfg.blocks));
  c.set("model.d_precision", std::to_string(cfg.d_precision));
  c.set("model.d_time", std::to_string(cfg.d_time));
  c.set("model.d_space", std::to_string(cfg.d_space));
  c.set("model.summary_width", std::to_string(cfg.summary_width));
  c.set("model.embed_dim", std::to_string(cfg.embed_dim));
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", cfg.kappa);
  c.set("model.kappa", buf);
  c.set("model.decoder_width", std::to_string(cfg.decoder_width));
  c.set("model.decoder_depth", std::to_string(cfg.decoder_depth));
  c.set("model.timecode_frequencies", std::to_string(cfg.timecode_frequencies));
  return c;
}

StpConfig stp_from_config(const Config& c) {
  StpConfig cfg;
  cfg.image_px = static_cast<int>(c.get_int("model.image_px", cfg.image_px));
  cfg.blocks = static_cast<int>(c.get_int("model.blocks", cfg.blocks));
  cfg.d_precision = static_cast<int>(c.get_int("model.d_precision", cfg.d_precision));
  cfg.d_time = static_cast<int>(c.get_int("model.d_time", cfg.d_time));
  cfg.d_space = static_cast<int>(c.get_int("model.d_space", cfg.d_space));
  cfg.summary_width = static_cast<int>(c.get_int("model.summary_width", cfg.summary_width));
  cfg.embed_dim = static_cast<int>(c.get_int("model.embed_dim", cfg.embed_dim));
  cfg.kappa = c.get_double("model.kappa", cfg.kappa);
  cfg.decoder_width = static_cast<int>(c.get_int("model.decoder_width", cfg.decoder_width));
  cfg.decoder_depth = static_cast<int>(c.get_int("model.decoder_depth", cfg.decoder_depth));
  cfg.timecode_frequencies =
      static_cast<int>(c.get_int("model.timecode_frequencies", cfg.timecode_frequencies));
  cfg.validate();
  return cfg;
}

core::Tensor embed_field(const Params& params, const StpConfig& cfg,
                         const std::vector<data::SourceSpec>& specs,
                         const data::ObservationSequence& seq, const temporal::Period& valid) {
  core::Tape tape;
  tape.set_grad_enabled(false);
  auto bound = bind_params(tape, params);
  auto enc = encode(tape, bound, cfg, specs, seq);
  auto ctx = build_summary_context(tape, bound, cfg, enc);
  auto field = summarize(tape, bound, cfg, ctx, valid);
  return field.tensor();
}

}  // namespace terra::model
