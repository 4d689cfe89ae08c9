#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "terra/eval_io.hpp"
#include "terra/tile_io.hpp"

namespace fs = std::filesystem;

namespace {

#ifndef TERRA_CLI_PATH
#define TERRA_CLI_PATH "terrafield"
#endif

int run(const std::string& args) {
  std::string cmd = std::string(TERRA_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& sub) const { return (path / sub).string(); }
};

void write_small_config(const std::string& path, int steps, int total = 0) {
  std::ofstream cfg(path);
  cfg << "synth.sites = 3\n"
         "synth.image_px = 16\n"
         "model.image_px = 16\n"
         "model.blocks = 1\n"
         "model.d_precision = 8\n"
         "model.d_time = 16\n"
         "model.d_space = 16\n"
         "model.summary_width = 16\n"
         "model.decoder_width = 16\n"
         "train.steps = "
      << steps
      << "\n"
         "train.total_steps = "
      << (total > 0 ? total : steps)
      << "\n"
         "train.warmup_steps = 1\n"
         "train.batch_size = 2\n"
         "train.checkpoint_every = 2\n"
         "train.seed = 11\n";
}

}  // namespace

TEST_CASE("cli pipeline") {
  TempDir dir("terra_cli_test");
  std::string cfg = dir / "cfg.txt";
  write_small_config(cfg, 4);

  SUBCASE("synth is byte-identical for a fixed config and seed") {
    REQUIRE(run("synth --config " + cfg + " --out " + (dir / "c1") + " --seed 5") == 0);
    REQUIRE(run("synth --config " + cfg + " --out " + (dir / "c2") + " --seed 5") == 0);
    for (const auto& entry : fs::directory_iterator(dir / "c1")) {
      auto name = entry.path().filename().string();
      if (name == "manifest.txt") continue;  // carries the output path
      CHECK(slurp(entry.path()) == slurp(fs::path(dir / "c2") / name));
    }
    CHECK(fs::exists(fs::path(dir / "c1") / "manifest.txt"));
  }

  SUBCASE("zero sites fail validation with exit code 2") {
    CHECK(run("synth --config " + cfg + " --out " + (dir / "cz") + " --sites 0") == 2);
  }

  SUBCASE("train, resume, embed and eval") {
    REQUIRE(run("synth --config " + cfg + " --out " + (dir / "corpus") + " --seed 5") == 0);
    REQUIRE(run("train --config " + cfg + " --corpus " + (dir / "corpus") + " --out " +
                (dir / "full")) == 0);

    // one telemetry row per step (plus header)
    {
      std::ifstream t(fs::path(dir / "full") / "telemetry.csv");
      std::string line;
      int rows = -1;
      while (std::getline(t, line)) ++rows;
      CHECK(rows == 4);
    }

    SUBCASE("resume reproduces the uninterrupted run bit for bit") {
      std::string cfg2 = dir / "cfg2.txt";
      write_small_config(cfg2, 2, 4);
      REQUIRE(run("train --config " + cfg2 + " --corpus " + (dir / "corpus") + " --out " +
                  (dir / "half")) == 0);
      std::string cfg4 = dir / "cfg4.txt";
      write_small_config(cfg4, 4);
      REQUIRE(run("train --config " + cfg4 + " --corpus " + (dir / "corpus") + " --out " +
                  (dir / "resumed") + " --resume " + (dir / "half") +
                  "/checkpoint-final.ckpt") == 0);
      CHECK(slurp(fs::path(dir / "resumed") / "checkpoint-final.ckpt") ==
            slurp(fs::path(dir / "full") / "checkpoint-final.ckpt"));
      // telemetry of the resumed run equals the tail of the full run
      std::ifstream full(fs::path(dir / "full") / "telemetry.csv");
      std::ifstream resumed(fs::path(dir / "resumed") / "telemetry.csv");
      std::string line;
      std::vector<std::string> full_rows, resumed_rows;
      while (std::getline(full, line)) full_rows.push_back(line);
      while (std::getline(resumed, line)) resumed_rows.push_back(line);
      REQUIRE(resumed_rows.size() == 2);
      CHECK(resumed_rows[0] == full_rows[3]);
      CHECK(resumed_rows[1] == full_rows[4]);
    }

    SUBCASE("embedding tiles: size ratio, determinism, unit norms") {
      std::string ckpt = (fs::path(dir / "full") / "checkpoint-final.ckpt").string();
      REQUIRE(run("embed --checkpoint " + ckpt + " --corpus " + (dir / "corpus") + " --out " +
                  (dir / "t8") + " --dtype int8") == 0);
      REQUIRE(run("embed --checkpoint " + ckpt + " --corpus " + (dir / "corpus") + " --out " +
                  (dir / "t8b") + " --dtype int8") == 0);
      REQUIRE(run("embed --checkpoint " + ckpt + " --corpus " + (dir / "corpus") + " --out " +
                  (dir / "tf") + " --dtype float") == 0);

      auto tile8 = terra::geom::read_tile(
          (fs::path(dir / "t8") / "tile-site0-p0.tile").string());
      auto tilef = terra::geom::read_tile(
          (fs::path(dir / "tf") / "tile-site0-p0.tile").string());
      // payload is 4x smaller for int8 (header excluded)
      CHECK(tile8.i8.size() * sizeof(int8_t) * 4 == tilef.f32.size() * sizeof(float));
      CHECK(slurp(fs::path(dir / "t8") / "tile-site0-p0.tile") ==
            slurp(fs::path(dir / "t8b") / "tile-site0-p0.tile"));
      auto deq = tile8.to_float();
      for (size_t c = 0; c < tile8.cells(); ++c) {
        double n = terra::geom::norm(deq.data() + c * tile8.dim, tile8.dim);
        CHECK(std::abs(n - 1.0) < 0.02);
      }
    }

    SUBCASE("model/corpus mismatch is rejected with exit 2") {
      std::string cfg_other = dir / "cfg_other.txt";
      {
        std::ofstream c(cfg_other);
        c << "synth.sites = 2\nsynth.image_px = 8\n";
      }
      REQUIRE(run("synth --config " + cfg_other + " --out " + (dir / "corpus8")) == 0);
      std::string ckpt = (fs::path(dir / "full") / "checkpoint-final.ckpt").string();
      CHECK(run("embed --checkpoint " + ckpt + " --corpus " + (dir / "corpus8") + " --out " +
                (dir / "bad")) == 2);
    }
  }

  SUBCASE("eval grid and failure modes") {
    REQUIRE(run("fixture --out " + (dir / "fx") + " --classes 3 --train-per-class 6 "
                "--test-per-class 8 --seed 3") == 0);
    REQUIRE(run("eval --dataset " + (dir / "fx") + "/dataset.csv --embeddings " + (dir / "fx") +
                "/table.bin --out " + (dir / "ev") +
                " --all-trials --repeats 5 --plots --seed 2") == 0);
    auto reports = terra::eval::read_reports((fs::path(dir / "ev") / "reports.jsonl").string());
    CHECK(reports.size() == 9);  // 3 shots x 3 transfers
    CHECK(fs::exists(fs::path(dir / "ev") / "reports.svg"));
    CHECK(fs::exists(fs::path(dir / "ev") / "reports.csv"));
    CHECK(fs::exists(fs::path(dir / "ev") / "manifest.txt"));

    SUBCASE("invalid dataset exits with field diagnostics") {
      std::string bad = dir / "bad.csv";
      {
        std::ofstream f(bad);
        f << "x,y,label,split,valid_time_start_ms,valid_time_end_ms,support_time_start_ms,"
             "support_time_end_ms\n";
        f << "12.345,-45.0001,1,train,1000,2000,500,4000\n";  // 3-decimal x
      }
      CHECK(run("eval --dataset " + bad + " --embeddings " + (dir / "fx") +
                "/table.bin --out " + (dir / "ev2")) == 2);
    }

    SUBCASE("missing embeddings file exits with the IO code") {
      CHECK(run("eval --dataset " + (dir / "fx") + "/dataset.csv --embeddings " + (dir / "fx") +
                "/missing.bin --out " + (dir / "ev3")) == 4);
    }
  }
}
