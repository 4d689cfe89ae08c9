// terrafield: generate synthetic observation corpora, train the encoder,
// emit quantized embedding-field tiles, and run the low-shot evaluation
// harness over embedding tables.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "terra/checkpoint.hpp"
#include "terra/corpus_io.hpp"
#include "terra/eval_io.hpp"
#include "terra/fixtures.hpp"
#include "terra/model.hpp"
#include "terra/tile_io.hpp"
#include "terra/train.hpp"

namespace fs = std::filesystem;
using namespace terra;

namespace {

constexpr const char* kToolVersion = "terrafield 0.1.0";

// Exit codes are a stable scripting contract.
constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

void write_manifest(const std::string& dir, const std::string& command, const Config& cfg,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) {
  Config manifest = cfg;
  manifest.set("run.command", command);
  manifest.set("run.version", kToolVersion);
  char digest[32];
  std::snprintf(digest, sizeof(digest), "%016llx",
                static_cast<unsigned long long>(cfg.digest()));
  manifest.set("run.config_digest", digest);
  for (size_t i = 0; i < inputs.size(); ++i) {
    manifest.set("run.input" + std::to_string(i), inputs[i]);
  }
  for (size_t i = 0; i < outputs.size(); ++i) {
    manifest.set("run.output" + std::to_string(i), outputs[i]);
  }
  std::ofstream out(fs::path(dir) / "manifest.txt");
  if (!out) raise_io("cannot write manifest under " + dir);
  out << manifest.to_text();
}

data::SynthConfig synth_from_config(const Config& c) {
  data::SynthConfig cfg = data::default_synth_config();
  cfg.world_seed = static_cast<uint64_t>(c.get_int("synth.seed", 1));
  cfg.sites = static_cast<int>(c.get_int("synth.sites", cfg.sites));
  cfg.image_px = static_cast<int>(c.get_int("synth.image_px", cfg.image_px));
  cfg.optical_mask_rate = c.get_double("synth.mask_rate", cfg.optical_mask_rate);
  cfg.noise_sigma = c.get_double("synth.noise_sigma", cfg.noise_sigma);
  cfg.thematic_classes = static_cast<int>(c.get_int("synth.classes", cfg.thematic_classes));
  return cfg;
}

Config synth_to_config(const data::SynthConfig& cfg) {
  Config c;
  c.set("synth.seed", std::to_string(cfg.world_seed));
  c.set("synth.sites", std::to_string(cfg.sites));
  c.set("synth.image_px", std::to_string(cfg.image_px));
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", cfg.optical_mask_rate);
  c.set("synth.mask_rate", buf);
  std::snprintf(buf, sizeof(buf), "%g", cfg.noise_sigma);
  c.set("synth.noise_sigma", buf);
  c.set("synth.classes", std::to_string(cfg.thematic_classes));
  return c;
}

struct LoadedCorpus {
  std::vector<data::ObservationSequence> sequences;  // preprocessed
  data::Roster roster;
  data::SynthConfig synth;
};

LoadedCorpus load_corpus_dir(const std::string& dir) {
  LoadedCorpus out;
  Config meta = Config::from_file((fs::path(dir) / "corpus.txt").string());
  out.synth = synth_from_config(meta);
  out.roster = data::default_roster(out.synth.thematic_classes);
  out.sequences = data::read_corpus(dir);
  auto stats = data::load_stats((fs::path(dir) / "stats.csv").string());
  for (auto& seq : out.sequences) data::preprocess_sequence(seq, out.roster.specs, stats);
  return out;
}

int cmd_synth(const std::string& config_path, const std::string& out_dir, int64_t sites,
              int64_t seed, int shards) {
  Config cfg = config_path.empty() ? Config() : Config::from_file(config_path);
  if (sites >= 0) cfg.set("synth.sites", std::to_string(sites));
  if (seed >= 0) cfg.set("synth.seed", std::to_string(seed));
  auto synth = synth_from_config(cfg);
  check_input(synth.sites > 0, "synth: need at least one site (zero sites give an empty corpus)");

  auto roster = data::default_roster(synth.thematic_classes);
  std::vector<data::ObservationSequence> corpus;
  // two non-overlapping approximately year-length periods per site
  for (int64_t site = 0; site < synth.sites; ++site) {
    for (int period = 0; period < 2; ++period) {
      corpus.push_back(data::synth_generate(synth, static_cast<uint64_t>(site), period, roster));
    }
  }
  fs::create_directories(out_dir);
  data::write_corpus(out_dir, corpus, shards);
  auto stats = data::compute_stats(corpus, roster.specs);
  data::save_stats((fs::path(out_dir) / "stats.csv").string(), stats, roster.specs);
  Config echo = synth_to_config(synth);
  {
    std::ofstream meta(fs::path(out_dir) / "corpus.txt");
    meta << echo.to_text();
  }
  write_manifest(out_dir, "synth", echo, {config_path}, {out_dir});
  std::cout << "wrote " << corpus.size() << " sequences (" << synth.sites << " sites) to "
            << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& corpus_dir,
              const std::string& out_dir, const std::string& resume, int64_t steps,
              int64_t seed, int threads) {
  Config cfg = config_path.empty() ? Config() : Config::from_file(config_path);
  if (steps >= 0) {
    cfg.set("train.steps", std::to_string(steps));
    if (!cfg.has("train.total_steps")) cfg.set("train.total_steps", std::to_string(steps));
    if (!cfg.has("train.warmup_steps")) {
      cfg.set("train.warmup_steps", std::to_string(std::max<int64_t>(1, steps / 100)));
    }
  }
  if (seed >= 0) cfg.set("train.seed", std::to_string(seed));
  if (threads > 0) cfg.set("train.threads", std::to_string(threads));
  auto tcfg = train::train_from_config(cfg);
  auto mcfg = model::stp_from_config(cfg);

  auto corpus = load_corpus_dir(corpus_dir);
  fs::create_directories(out_dir);

  model::Params params;
  train::AdamState opt;
  int64_t start_step = 0;
  if (resume.empty()) {
    params = model::init_params<float>(mcfg, corpus.roster.specs, tcfg.seed);
  } else {
    auto tensors = core::load_checkpoint(resume);
    start_step = static_cast<int64_t>(tensors.at("opt.step").data[0]);
    for (auto& [name, t] : tensors) {
      if (name.rfind("opt.m.", 0) == 0) {
        opt.m.emplace(name.substr(6), std::move(t));
      } else if (name.rfind("opt.v.", 0) == 0) {
        opt.v.emplace(name.substr(6), std::move(t));
      } else if (name == "opt.step" || name == "opt.t") {
        if (name == "opt.t") opt.t = static_cast<int64_t>(t.data[0]);
      } else {
        params.tensors.emplace(name, std::move(t));
      }
    }
  }

  std::ofstream telemetry(fs::path(out_dir) / "telemetry.csv",
                          start_step == 0 ? std::ios::trunc : std::ios::app);
  if (start_step == 0) telemetry << train::telemetry_header(corpus.roster.specs) << "\n";

  auto save = [&](int64_t step, const model::Params& p, const train::AdamState& o,
                  const std::string& name) {
    std::map<std::string, core::Tensor> tensors = p.tensors;
    for (const auto& [k, v] : o.m) tensors.emplace("opt.m." + k, v);
    for (const auto& [k, v] : o.v) tensors.emplace("opt.v." + k, v);
    tensors.emplace("opt.step", core::Tensor({1}, {static_cast<float>(step)}));
    tensors.emplace("opt.t", core::Tensor({1}, {static_cast<float>(o.t)}));
    core::save_checkpoint((fs::path(out_dir) / name).string(), tensors);
  };

  train::TrainHooks hooks;
  hooks.on_step = [&](const train::StepRow& row) {
    telemetry << train::telemetry_row(row) << "\n";
  };
  hooks.on_checkpoint = [&](int64_t step, const model::Params& p, const train::AdamState& o) {
    save(step, p, o, "checkpoint-" + std::to_string(step) + ".ckpt");
  };

  auto result = train::train(tcfg, mcfg, corpus.roster, corpus.sequences, std::move(params),
                             std::move(opt), start_step, hooks);
  save(tcfg.steps, result.params, result.opt, "checkpoint-final.ckpt");
  {
    std::ofstream model_manifest(fs::path(out_dir) / "model.txt");
    model_manifest << model::stp_to_config(mcfg).to_text();
  }
  Config effective = train::train_to_config(tcfg);
  Config model_cfg = model::stp_to_config(mcfg);
  for (const auto& [k, v] : model_cfg.entries()) effective.set(k, v);
  write_manifest(out_dir, "train", effective, {corpus_dir}, {out_dir});
  std::cout << "trained " << (tcfg.steps - start_step) << " steps; final total loss "
            << (result.telemetry.empty() ? 0.0 : result.telemetry.back().total) << "\n";
  return 0;
}

int cmd_embed(const std::string& checkpoint, const std::string& corpus_dir,
              const std::string& out_dir, int64_t site, int64_t valid_start, int64_t valid_end,
              const std::string& dtype) {
  auto corpus = load_corpus_dir(corpus_dir);
  fs::path ckpt_path(checkpoint);
  auto model_manifest_path = ckpt_path.parent_path() / "model.txt";
  if (!fs::exists(model_manifest_path)) {
    raise_invalid("embed: no model.txt next to the checkpoint (need the model manifest)");
  }
  auto mcfg = model::stp_from_config(Config::from_file(model_manifest_path.string()));
  if (mcfg.image_px != corpus.synth.image_px) {
    raise_invalid("embed: model/corpus mismatch: model.image_px=" +
                  std::to_string(mcfg.image_px) + " vs corpus image_px=" +
                  std::to_string(corpus.synth.image_px));
  }

  model::Params params;
  for (auto& [name, t] : core::load_checkpoint(checkpoint)) {
    if (name.rfind("opt.", 0) == 0) continue;
    params.tensors.emplace(name, std::move(t));
  }
  {
    // reject checkpoints whose parameter table disagrees with the config
    auto expected = model::init_params<float>(mcfg, corpus.roster.specs, 0);
    std::string diff;
    for (const auto& [name, t] : expected.tensors) {
      auto it = params.tensors.find(name);
      if (it == params.tensors.end()) {
        diff += "\n  missing: " + name;
      } else if (it->second.shape != t.shape) {
        diff += "\n  shape mismatch: " + name;
      }
    }
    if (!diff.empty()) raise_invalid("embed: checkpoint does not match the model manifest:" + diff);
  }

  geom::TileDType dt = geom::TileDType::i8;
  geom::QuantizationParams qp = geom::QuantizationParams::int8_pow2();
  if (dtype == "int16") {
    dt = geom::TileDType::i16;
    qp = geom::QuantizationParams::int16_pow2();
  } else if (dtype == "float") {
    dt = geom::TileDType::f32;
  } else if (dtype != "int8") {
    raise_invalid("embed: unknown dtype " + dtype + " (int8|int16|float)");
  }

  fs::create_directories(out_dir);
  int written = 0;
  for (const auto& seq : corpus.sequences) {
    if (site >= 0 && seq.site_id != static_cast<uint64_t>(site)) continue;
    temporal::Period valid = seq.support;
    if (valid_start >= 0 && valid_end > valid_start) valid = {valid_start, valid_end};
    auto field = model::embed_field(params, mcfg, corpus.roster.specs, seq, valid);
    auto p = static_cast<uint32_t>(mcfg.field_px());
    double cell_m = 1280.0 / p;  // synthetic sites mirror a 1.28 km extent
    double origin_x = static_cast<double>(seq.site_id) * 2000.0;
    double origin_y = static_cast<double>(seq.period_index) * 2000.0;
    std::string name = "tile-site" + std::to_string(seq.site_id) + "-p" +
                       std::to_string(seq.period_index) + ".tile";
    geom::write_tile((fs::path(out_dir) / name).string(), field.data, p, p,
                     static_cast<uint32_t>(mcfg.embed_dim), origin_x, origin_y, cell_m, dt, qp);
    ++written;
  }
  check_input(written > 0, "embed: no sequences matched the site filter");
  Config echo;
  echo.set("embed.dtype", dtype);
  echo.set("embed.site", std::to_string(site));
  write_manifest(out_dir, "embed", echo, {checkpoint, corpus_dir}, {out_dir});
  std::cout << "wrote " << written << " tiles to " << out_dir << "\n";
  return 0;
}

int cmd_eval(const std::string& dataset_path, const std::string& embeddings_path,
             const std::string& out_dir, const std::string& shots_s,
             const std::string& transfer_s, bool all_trials, bool unsupervised_change,
             int64_t repeats, uint64_t seed, bool plots, const std::string& knn_weighting) {
  auto dataset = eval::load_dataset(dataset_path);

  std::unique_ptr<eval::EmbeddingProvider> provider;
  if (embeddings_path.size() > 5 &&
      embeddings_path.substr(embeddings_path.size() - 5) == ".tile") {
    provider = std::make_unique<eval::TileSource>(geom::read_tile(embeddings_path));
  } else {
    provider = std::make_unique<eval::TableSource>(eval::load_table(embeddings_path));
  }

  auto parse_shots = [](const std::string& s) {
    if (s == "1") return eval::Shots::one;
    if (s == "10") return eval::Shots::ten;
    if (s == "max") return eval::Shots::max;
    raise_invalid("eval: unknown shots value " + s + " (1|10|max)");
  };
  auto parse_transfer = [](const std::string& s) {
    if (s == "knn1") return eval::Transfer::knn1;
    if (s == "knn3") return eval::Transfer::knn3;
    if (s == "linear") return eval::Transfer::linear;
    raise_invalid("eval: unknown transfer " + s + " (knn1|knn3|linear)");
  };

  std::vector<eval::TrialSpec> trials;
  if (all_trials) {
    for (auto shots : {eval::Shots::one, eval::Shots::ten, eval::Shots::max}) {
      for (auto transfer : {eval::Transfer::knn1, eval::Transfer::knn3, eval::Transfer::linear}) {
        eval::TrialSpec t;
        t.shots = shots;
        t.transfer = transfer;
        if (repeats > 0) t.repeats = repeats;
        trials.push_back(t);
      }
    }
  } else {
    eval::TrialSpec t;
    t.shots = parse_shots(shots_s);
    t.transfer = parse_transfer(transfer_s);
    if (repeats > 0) t.repeats = repeats;
    trials.push_back(t);
  }
  if (dataset.change && (unsupervised_change || all_trials)) {
    eval::TrialSpec t;
    t.shots = eval::Shots::max;
    t.change_supervised = false;
    trials.push_back(t);
  }
  for (auto& t : trials) {
    t.knn_weighting =
        knn_weighting == "inverse" ? eval::KnnWeighting::inverse : eval::KnnWeighting::literal;
  }

  fs::create_directories(out_dir);
  auto reports_path = (fs::path(out_dir) / "reports.jsonl").string();
  if (fs::exists(reports_path)) fs::remove(reports_path);
  auto kind = eval::default_metric(dataset);
  std::vector<eval::MetricReport> reports;
  for (const auto& trial : trials) {
    auto report = eval::run_trial(dataset, *provider, trial, kind, seed);
    report.dataset = fs::path(dataset_path).stem().string();
    eval::append_report(reports_path, report);
    std::cout << report.dataset << " " << report.trial << " " << report.metric << " = "
              << report.mean;
    if (report.sigma) std::cout << " +- " << *report.sigma;
    std::cout << " (" << report.method << ")\n";
    reports.push_back(std::move(report));
  }
  if (plots) {
    eval::write_report_plot((fs::path(out_dir) / "reports.svg").string(),
                            (fs::path(out_dir) / "reports.csv").string(), reports,
                            reports.front().dataset);
  }
  Config echo;
  echo.set("eval.dataset", dataset_path);
  echo.set("eval.embeddings", embeddings_path);
  echo.set("eval.seed", std::to_string(seed));
  write_manifest(out_dir, "eval", echo, {dataset_path, embeddings_path}, {reports_path});
  return 0;
}

int cmd_fixture(const std::string& out_dir, int classes, int train_per_class,
                int test_per_class, bool change, bool regression, uint64_t seed) {
  eval::FixtureSpec spec;
  spec.classes = classes;
  spec.train_per_class = train_per_class;
  spec.test_per_class = test_per_class;
  spec.change = change;
  spec.regression = regression;
  spec.seed = seed;
  auto fixture = eval::make_fixture(spec);
  fs::create_directories(out_dir);
  auto csv = (fs::path(out_dir) / "dataset.csv").string();
  auto table = (fs::path(out_dir) / "table.bin").string();
  eval::write_fixture(fixture, csv, table);
  Config echo;
  echo.set("fixture.seed", std::to_string(seed));
  echo.set("fixture.classes", std::to_string(classes));
  echo.set("fixture.change", change ? "1" : "0");
  echo.set("fixture.regression", regression ? "1" : "0");
  write_manifest(out_dir, "fixture", echo, {}, {csv, table});
  std::cout << "wrote " << fixture.dataset.rows.size() << " rows to " << csv << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"embedding-field toolkit: synthetic corpora, encoder training, "
               "quantized tiles and low-shot evaluation"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  std::string config_path, out_dir, corpus_dir, checkpoint, resume, dataset_path,
      embeddings_path;
  std::string dtype = "int8", shots = "max", transfer = "linear", knn_weighting = "literal";
  int64_t sites = -1, seed_flag = -1, steps = -1, site = -1;
  int64_t valid_start = -1, valid_end = -1, repeats = -1;
  uint64_t eval_seed = 7;
  int shards = 4, threads = 0;
  int classes = 4, train_per_class = 40, test_per_class = 60;
  bool all_trials = false, unsupervised = false, plots = false, change = false,
       regression = false;

  auto* synth = app.add_subcommand("synth", "generate a synthetic observation corpus");
  synth->add_option("--config", config_path, "key=value config file");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--sites", sites, "number of sites (two sequences each)");
  synth->add_option("--seed", seed_flag, "world seed");
  synth->add_option("--shards", shards, "corpus shard count");

  auto* train_cmd = app.add_subcommand("train", "train the encoder on a corpus");
  train_cmd->add_option("--config", config_path, "key=value config file");
  train_cmd->add_option("--corpus", corpus_dir, "corpus directory")->required();
  train_cmd->add_option("--out", out_dir, "output directory")->required();
  train_cmd->add_option("--resume", resume, "checkpoint to resume from");
  train_cmd->add_option("--steps", steps, "training steps");
  train_cmd->add_option("--seed", seed_flag, "training seed");
  train_cmd->add_option("--threads", threads, "worker thread cap");

  auto* embed = app.add_subcommand("embed", "write embedding-field tiles from a checkpoint");
  embed->add_option("--checkpoint", checkpoint, "parameter checkpoint")->required();
  embed->add_option("--corpus", corpus_dir, "corpus directory")->required();
  embed->add_option("--out", out_dir, "output directory")->required();
  embed->add_option("--site", site, "restrict to one site id");
  embed->add_option("--valid-start", valid_start, "valid period start (ms)");
  embed->add_option("--valid-end", valid_end, "valid period end (ms)");
  embed->add_option("--dtype", dtype, "int8|int16|float (default int8, power 2)");

  auto* eval_cmd = app.add_subcommand("eval", "run low-shot trials over embeddings");
  eval_cmd->add_option("--dataset", dataset_path, "dataset file (.csv or .jsonl)")->required();
  eval_cmd->add_option("--embeddings", embeddings_path, "embedding table (.bin) or tile (.tile)")
      ->required();
  eval_cmd->add_option("--out", out_dir, "output directory")->required();
  eval_cmd->add_option("--shots", shots, "1|10|max");
  eval_cmd->add_option("--transfer", transfer, "knn1|knn3|linear");
  eval_cmd->add_flag("--all-trials", all_trials, "run the 3x3 shots-by-transfer grid");
  eval_cmd->add_flag("--change-unsupervised", unsupervised,
                     "add the unsupervised change-threshold trial");
  eval_cmd->add_option("--repeats", repeats, "fold count for subsampled trials");
  eval_cmd->add_option("--seed", eval_seed, "trial seed");
  eval_cmd->add_option("--knn-weighting", knn_weighting,
                       "literal|inverse distance weighting for kNN regression");
  eval_cmd->add_flag("--plots", plots, "emit SVG bar charts with 1-sigma whiskers");

  auto* fixture = app.add_subcommand("fixture", "write a synthetic evaluation fixture");
  fixture->add_option("--out", out_dir, "output directory")->required();
  fixture->add_option("--classes", classes, "class count");
  fixture->add_option("--train-per-class", train_per_class, "train rows per class");
  fixture->add_option("--test-per-class", test_per_class, "test rows per class");
  fixture->add_flag("--change", change, "before/after change fixture");
  fixture->add_flag("--regression", regression, "regression fixture");
  fixture->add_option("--seed", eval_seed, "fixture seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitValidation;
  }

  try {
    if (synth->parsed()) return cmd_synth(config_path, out_dir, sites, seed_flag, shards);
    if (train_cmd->parsed()) {
      return cmd_train(config_path, corpus_dir, out_dir, resume, steps, seed_flag, threads);
    }
    if (embed->parsed()) {
      return cmd_embed(checkpoint, corpus_dir, out_dir, site, valid_start, valid_end, dtype);
    }
    if (eval_cmd->parsed()) {
      return cmd_eval(dataset_path, embeddings_path, out_dir, shots, transfer, all_trials,
                      unsupervised, repeats, eval_seed, plots, knn_weighting);
    }
    if (fixture->parsed()) {
      return cmd_fixture(out_dir, classes, train_per_class, test_per_class, change, regression,
                         eval_seed);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.kind()) {
      case ErrorKind::invalid_input:
        return kExitValidation;
      case ErrorKind::numeric:
        return kExitNumeric;
      case ErrorKind::io:
        return kExitIo;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
