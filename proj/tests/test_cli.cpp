#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "emcot/config.hpp"
#include "emcot/util.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

using namespace emcot;
namespace fs = std::filesystem;

namespace {

const char* kSmokeConfig = R"({
  "env": {"image_size": 32},
  "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "patch": 8,
            "latent_grid": 4, "latent_channels": 4, "chunk": 4, "context_frames": 2},
  "rollout": {"chunk": 4, "flow_steps": 2, "max_text_tokens": 6, "step_limit": 8},
  "train": {"steps": 4, "batch": 2, "checkpoint_every": 2}
})";

struct CliFixture {
  fs::path dir;
  std::string cfg;

  CliFixture() {
    dir = fs::temp_directory_path() / "emcot_test_cli";
    fs::remove_all(dir);
    fs::create_directories(dir);
    cfg = (dir / "cfg.json").string();
    write_file(cfg, kSmokeConfig);
  }
  ~CliFixture() { fs::remove_all(dir); }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  int run(const std::string& args, std::string* err = nullptr) const {
    std::string err_path = (dir / "stderr.txt").string();
    std::string cmd = std::string(EMCOT_CLI_PATH) + " " + args + " >" +
                      (dir / "stdout.txt").string() + " 2>" + err_path;
    int rc = std::system(cmd.c_str());
    if (err) *err = read_file(err_path);
    return WEXITSTATUS(rc);
  }
  std::string with_cfg(const std::string& args) const { return "--config " + cfg + " " + args; }
};

}  // namespace

TEST_CASE("cli pipeline runs end to end with embedded config hashes") {
  CliFixture f;
  RunConfig cfg = RunConfig::load(f.cfg, {});

  CHECK(f.run(f.with_cfg("synth-env-data --out " + f.path("t.jsonl") +
                         " --count 30 --seed 7")) == 0);
  CHECK(fs::exists(f.path("t.jsonl")));
  CHECK(f.run(f.with_cfg("annotate --trajectories " + f.path("t.jsonl") + " --out " +
                         f.path("r.jsonl"))) == 0);
  CHECK(f.run(f.with_cfg("build-dataset --trajectories t.jsonl --records r.jsonl"
                         " --out " + f.path("m.json"))) == 0);
  CHECK(f.run(f.with_cfg("pretrain --dataset " + f.path("m.json") + " --out " +
                         f.path("pt"))) == 0);
  CHECK(fs::exists(f.path("pt/pretrain_step000004.ckpt")));
  Json report = Json::parse(read_file(f.path("pt/report_pretrain.json")));
  CHECK(report.at("config_hash") == cfg.hash());
  CHECK(report.at("tool_version") == kToolVersion);

  CHECK(f.run(f.with_cfg("finetune --dataset " + f.path("m.json") + " --out " +
                         f.path("ft") + " --init " +
                         f.path("pt/pretrain_step000004.ckpt"))) == 0);
  std::string ckpt = f.path("ft/finetune_step000004.ckpt");
  CHECK(fs::exists(ckpt));

  CHECK(f.run(f.with_cfg("rollout --checkpoint " + ckpt +
                         " --task stack_two --level easy --seed 3 --out " +
                         f.path("ep.json") + " --dump-dir " + f.path("imgs"))) == 0);
  Json ep = Json::parse(read_file(f.path("ep.json")));
  CHECK(ep.at("task") == "stack_two");
  CHECK(ep.at("config_hash") == cfg.hash());
  CHECK(fs::exists(f.path("imgs/subgoal_0.png")));

  CHECK(f.run(f.with_cfg("evaluate --checkpoint " + ckpt +
                         " --episodes 1 --tasks press_button --levels easy,hard"
                         " --seed 5 --out " + f.path("eval.json"))) == 0);
  Json ev = Json::parse(read_file(f.path("eval.json")));
  CHECK(ev.at("rows").size() == 2);
  CHECK(ev.at("config_hash") == cfg.hash());

  CHECK(f.run(f.with_cfg("ablate --full " + ckpt + " --none " + ckpt +
                         " --episodes 1 --tasks press_button --levels easy --out " +
                         f.path("abl.json"))) == 0);
  Json abl = Json::parse(read_file(f.path("abl.json")));
  CHECK(abl.at("rows").size() == 4);
  CHECK(abl.at("rows")[1].at("missing") == true);  // no_text left out
}

TEST_CASE("synth-env-data is byte identical across reruns") {
  CliFixture f;
  CHECK(f.run(f.with_cfg("synth-env-data --out " + f.path("a.jsonl") +
                         " --count 4 --seed 11")) == 0);
  CHECK(f.run(f.with_cfg("synth-env-data --out " + f.path("b.jsonl") +
                         " --count 4 --seed 11")) == 0);
  CHECK(read_file(f.path("a.jsonl")) == read_file(f.path("b.jsonl")));
  CHECK(f.run(f.with_cfg("synth-env-data --out " + f.path("c.jsonl") +
                         " --count 4 --seed 12")) == 0);
  CHECK(read_file(f.path("a.jsonl")) != read_file(f.path("c.jsonl")));
}

TEST_CASE("inspect-mask prints the enumerated toy-sequence grid") {
  CliFixture f;
  CHECK(f.run("inspect-mask --demo emcot --format csv --out " + f.path("m.csv")) == 0);
  const std::string expected =
      "1,0,0,0,0,0,0,0\n"
      "1,1,0,0,0,0,0,0\n"
      "1,1,1,1,0,0,0,0\n"
      "1,1,1,1,0,0,0,0\n"
      "1,1,1,1,1,1,0,0\n"
      "1,1,1,1,1,1,0,0\n"
      "1,1,1,1,0,0,1,0\n"
      "1,1,1,1,0,0,1,1\n";
  CHECK(read_file(f.path("m.csv")) == expected);

  CHECK(f.run("inspect-mask --demo emcot --format pgm --out " + f.path("m.pgm")) == 0);
  CHECK(read_file(f.path("m.pgm")).rfind("P2\n", 0) == 0);
}

TEST_CASE("cli exit codes separate validation from runtime failures") {
  CliFixture f;
  std::string err;

  CHECK(f.run("frobnicate", &err) == 1);  // unknown subcommand
  CHECK(Json::parse(err).contains("error"));

  CHECK(f.run("evaluate --checkpoint x.ckpt --bogus-flag 1", &err) == 1);
  CHECK(Json::parse(err).contains("error"));

  // Unknown config key is a validation error.
  write_file(f.path("bad.json"), R"({"model": {"dmodel": 4}})");
  CHECK(f.run("--config " + f.path("bad.json") + " inspect-mask --demo emcot", &err) == 1);
  CHECK(Json::parse(err).at("error").get<std::string>().find("unknown key") !=
        std::string::npos);

  // A missing checkpoint file is a runtime failure.
  CHECK(f.run(f.with_cfg("evaluate --checkpoint " + f.path("nope.ckpt") +
                         " --episodes 1 --tasks press_button --levels easy"),
              &err) == 2);
  CHECK(Json::parse(err).contains("error"));

  CHECK(f.run("--help") == 0);
}
