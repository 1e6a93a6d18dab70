#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kBin = LATCAST_BIN;

// Small shape/model overrides shared by every training-flavoured test.
const std::string kTiny =
    " --set shape.n_ctx=3 --set shape.n_held=1 --set shape.seq_len=24 --set shape.horizon=6"
    " --set model.d=16 --set model.embedder_layers=2 --set \"model.dilations=[1,2]\""
    " --set model.heads=2 --set train.batch_size=1 --set train.batches_per_epoch=2";

int run(const std::string& args) {
  const int rc = std::system((kBin + " " + args + " >/dev/null 2>&1").c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("latcast_cli_" + std::to_string(std::rand()))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit with code 2") {
    CHECK(run("") == 2);
    CHECK(run("--bogus-flag") == 2);
    CHECK(run("synth") == 2);  // missing required --out
  }

  TEST_CASE("synth is byte-deterministic and writes a resolved config") {
    TempDir tmp;
    const std::string common = "synth --seed 11" + kTiny + " --batches 2 -o ";
    REQUIRE(run(common + (tmp / "a")) == 0);
    REQUIRE(run(common + (tmp / "b")) == 0);
    CHECK(slurp(tmp.path / "a" / "batches.bin") == slurp(tmp.path / "b" / "batches.bin"));
    CHECK_FALSE(slurp(tmp.path / "a" / "batches.bin").empty());

    const auto cfg = nlohmann::json::parse(slurp(tmp.path / "a" / "resolved_config.json"));
    CHECK(cfg["train"]["seed"] == 11);
    CHECK(cfg["shape"]["n_ctx"] == 3);
  }

  TEST_CASE("seed flag takes precedence over the config file") {
    TempDir tmp;
    {
      std::ofstream cfg(tmp / "cfg.json");
      cfg << R"({"train": {"seed": 3}})";
    }
    REQUIRE(run("synth --config " + (tmp / "cfg.json") + " --seed 7" + kTiny + " -o " +
                (tmp / "out")) == 0);
    const auto cfg = nlohmann::json::parse(slurp(tmp.path / "out" / "resolved_config.json"));
    CHECK(cfg["train"]["seed"] == 7);
  }

  TEST_CASE("unknown config keys are rejected") {
    CHECK(run("synth --set nonsense.key=1 -o /tmp/latcast_never") == 1);
  }

  TEST_CASE("eval on a missing checkpoint fails with exit 1") {
    TempDir tmp;
    REQUIRE(run("synth --seed 1" + kTiny + " -o " + (tmp / "data")) == 0);
    CHECK(run("eval --checkpoint " + (tmp / "nope.bin") + " -i " + (tmp / "data") +
              "/batches.bin -o " + (tmp / "out")) == 1);
  }

  TEST_CASE("train, then eval / forecast / ablate on the checkpoint") {
    TempDir tmp;
    REQUIRE(run("synth --seed 1" + kTiny + " --batches 2 -o " + (tmp / "data")) == 0);
    REQUIRE(run("train --seed 5" + kTiny + " --epochs 2 -o " + (tmp / "run")) == 0);
    CHECK(fs::exists(tmp.path / "run" / "checkpoint.bin"));

    // Two epochs of JSON-lines metrics.
    std::istringstream lines(slurp(tmp.path / "run" / "metrics.jsonl"));
    std::string line;
    std::size_t n_lines = 0;
    while (std::getline(lines, line)) {
      const auto rec = nlohmann::json::parse(line);
      CHECK(rec.contains("main_loss"));
      CHECK(rec["epoch"] == n_lines);
      ++n_lines;
    }
    CHECK(n_lines == 2);

    REQUIRE(run("eval --checkpoint " + (tmp / "run") + "/checkpoint.bin -i " + (tmp / "data") +
                "/batches.bin -o " + (tmp / "ev")) == 0);
    const auto report = nlohmann::json::parse(slurp(tmp.path / "ev" / "metrics.json"));
    CHECK(report["windows"] == 2);
    CHECK(report["mse"]["mean"].get<double>() >= 0.0);

    REQUIRE(run("forecast --checkpoint " + (tmp / "run") + "/checkpoint.bin -i " + (tmp / "data") +
                "/batches.bin -o " + (tmp / "fc")) == 0);
    const auto csv = slurp(tmp.path / "fc" / "forecast.csv");
    CHECK(csv.rfind("batch,series,step,point,variance,denorm,target\n", 0) == 0);

    REQUIRE(run("ablate --checkpoint " + (tmp / "run") + "/checkpoint.bin --sizes 1 2 3"
                " --trials 2 --pool-batches 2 -o " + (tmp / "ab")) == 0);
    CHECK(slurp(tmp.path / "ab" / "ablation.csv").rfind("size,mean,std\n", 0) == 0);
  }

  TEST_CASE("embed and patches emit their artifacts") {
    TempDir tmp;
    REQUIRE(run("synth --seed 2" + kTiny + " -o " + (tmp / "data")) == 0);
    REQUIRE(run("train --seed 2" + kTiny + " --epochs 1 -o " + (tmp / "run")) == 0);

    REQUIRE(run("embed --checkpoint " + (tmp / "run") + "/checkpoint.bin -i " + (tmp / "data") +
                "/batches.bin --pca 2 -o " + (tmp / "em")) == 0);
    CHECK(fs::exists(tmp.path / "em" / "embeddings.bin"));
    CHECK(slurp(tmp.path / "em" / "projection.csv").rfind("batch,series,pc1,pc2\n", 0) == 0);

    REQUIRE(run("patches --checkpoint " + (tmp / "run") + "/checkpoint.bin -i " + (tmp / "data") +
                "/batches.bin -o " + (tmp / "pa")) == 0);
    CHECK(slurp(tmp.path / "pa" / "patches.csv").rfind("batch,series,patch,start,end\n", 0) == 0);
    CHECK(fs::exists(tmp.path / "pa" / "patch_vectors.bin"));
  }

  TEST_CASE("train resume continues from the checkpoint") {
    TempDir tmp;
    REQUIRE(run("train --seed 9" + kTiny + " --epochs 1 -o " + (tmp / "run")) == 0);
    REQUIRE(run("train --resume " + (tmp / "run") + "/checkpoint.bin --epochs 2 -o " +
                (tmp / "run2")) == 0);
    // The resumed run reports only the remaining epoch.
    std::istringstream lines(slurp(tmp.path / "run2" / "metrics.jsonl"));
    std::string line;
    REQUIRE(std::getline(lines, line));
    CHECK(nlohmann::json::parse(line)["epoch"] == 1);
    CHECK_FALSE(std::getline(lines, line));
  }
}
