#include "CLI11.hpp"
#include "emcot/annotator.hpp"
#include "emcot/envsim.hpp"
#include "emcot/inference.hpp"
#include "emcot/model.hpp"
#include "emcot/primitives.hpp"
#include "emcot/tokenstream.hpp"
#include "emcot/training.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace {

using namespace emcot;

struct GlobalArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  int workers = 1;
};

RunConfig load_config(const GlobalArgs& g) {
  return RunConfig::load(g.config_path, g.overrides);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  size_t start = 0;
  while (start <= s.size()) {
    size_t comma = s.find(',', start);
    std::string item = s.substr(start, comma == std::string::npos ? comma : comma - start);
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::vector<envsim::Level> parse_levels(const std::string& csv) {
  std::vector<envsim::Level> out;
  for (const auto& name : split_csv(csv)) out.push_back(envsim::level_from(name));
  if (out.empty()) throw std::invalid_argument("no levels given");
  return out;
}

void write_json(const std::string& path, Json j, const std::string& config_hash) {
  j["config_hash"] = config_hash;
  j["tool_version"] = kToolVersion;
  write_file(path, j.dump(2) + "\n");
}

model::Model load_model(const std::string& path, model::Checkpoint* meta = nullptr) {
  return model::load_checkpoint_any(path, meta);
}

// --- subcommands ---

int cmd_synth(const RunConfig& cfg, const std::string& out, int count,
              const std::string& tasks_csv, const std::string& level_name,
              uint64_t seed) {
  envsim::Env env{envsim::EnvConfig::from(cfg)};
  auto level = envsim::level_from(level_name);
  std::vector<std::string> tasks =
      tasks_csv.empty() ? envsim::Env::task_ids() : split_csv(tasks_csv);
  std::vector<envsim::Trajectory> trajs;
  int attempts = 0;
  while (static_cast<int>(trajs.size()) < count) {
    const std::string& id = tasks[trajs.size() % tasks.size()];
    auto got = envsim::collect_trajectory(env, env.make_task(id, level),
                                          derive_seed(seed, "synth:" +
                                                      std::to_string(attempts)));
    ++attempts;
    if (got.trajectory) trajs.push_back(std::move(*got.trajectory));
    if (attempts > 10 * count)
      throw std::runtime_error("expert failure rate too high; collected " +
                               std::to_string(trajs.size()) + " of " +
                               std::to_string(count));
  }
  envsim::save_trajectories(out, trajs, cfg.hash(), cfg.str("env.image_format"));
  std::printf("wrote %zu trajectories to %s\n", trajs.size(), out.c_str());
  return 0;
}

int cmd_annotate(const RunConfig& cfg, const std::string& traj_path,
                 const std::string& out) {
  auto trajs = envsim::load_trajectories(traj_path);
  auto opt = annotator::Options::from(cfg);
  // Environment may override the external endpoint and credentials only.
  if (const char* ep = std::getenv("EMCOT_ANNOTATOR_ENDPOINT")) opt.client.endpoint = ep;
  if (const char* mdl = std::getenv("EMCOT_ANNOTATOR_MODEL")) opt.client.model = mdl;
  std::unique_ptr<annotator::HttpBackend> client;
  if (opt.use_external) client = std::make_unique<annotator::HttpBackend>(opt.client);
  annotator::Pipeline pipe(opt, client.get());
  primitives::Thresholds th = primitives::Thresholds::from(cfg);
  std::vector<annotator::CotRecord> records;
  for (const auto& t : trajs) {
    auto labels = primitives::extract_primitives(t, th);
    records.push_back(pipe.annotate(t, labels, cfg.hash()));
  }
  annotator::save_records(out, records);
  std::printf("wrote %zu annotation records to %s\n", records.size(), out.c_str());
  return 0;
}

int cmd_build_dataset(const RunConfig& cfg, const std::string& traj_path,
                      const std::string& records_path, const std::string& out) {
  training::save_manifest(out, traj_path, records_path, cfg.hash());
  auto d = training::load_dataset(out);  // validates the pairing
  std::printf("dataset manifest %s: %zu trajectories\n", out.c_str(),
              d.trajectories.size());
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& stage,
              const std::string& manifest, const std::string& out_dir,
              const std::string& init_ckpt, const std::string& resume_ckpt) {
  auto data = training::load_dataset(manifest);
  auto sc = training::StageConfig::from(cfg, stage);
  auto mc = model::ModelConfig::from(cfg, tokenstream::Vocabulary().size());

  int start_step = 0;
  std::unique_ptr<model::Model> m;
  if (!resume_ckpt.empty()) {
    model::Checkpoint meta;
    m = std::make_unique<model::Model>(model::load_checkpoint(resume_ckpt, mc, &meta));
    training::load_optimizer_state(resume_ckpt + ".opt", m->params());
    start_step = meta.extra.at("step").get<int>();
  } else if (!init_ckpt.empty()) {
    m = std::make_unique<model::Model>(model::load_checkpoint(init_ckpt, mc));
  } else {
    m = std::make_unique<model::Model>(mc, sc.seed);
  }
  if (!m->codec().fitted) {
    m->codec().image_size = mc.image_size;
    m->codec().grid = mc.latent_grid;
    m->codec().channels = mc.latent_channels;
    auto rep = training::fit_codec(*m, data, cfg);
    std::printf("codec fitted: holdout mse %.5f, psnr %.2f dB\n", rep.holdout_mse,
                rep.holdout_psnr);
  }

  auto report = training::run_stage(*m, data, sc, cfg, out_dir, start_step);
  std::string report_path =
      (std::filesystem::path(out_dir) / ("report_" + stage + ".json")).string();
  write_json(report_path, report.to_json(), cfg.hash());
  std::printf("%s done: %zu steps, final loss %.5f, report %s\n", stage.c_str(),
              report.steps.size(),
              report.steps.empty() ? 0.0 : report.steps.back().total,
              report_path.c_str());
  return 0;
}

int cmd_rollout(const RunConfig& cfg, const std::string& ckpt, const std::string& task_id,
                const std::string& level, uint64_t seed, const std::string& out,
                const std::string& dump_dir) {
  auto m = load_model(ckpt);
  envsim::Env env{envsim::EnvConfig::from(cfg)};
  auto rc = inference::RolloutConfig::from(cfg);
  auto ep = inference::run_episode(env, m, env.make_task(task_id,
                                                         envsim::level_from(level)),
                                   rc, seed);
  if (!out.empty()) write_json(out, ep.to_json(), cfg.hash());
  if (!dump_dir.empty()) {
    std::filesystem::create_directories(dump_dir);
    for (size_t i = 0; i < ep.subgoals.size(); ++i) {
      auto png = png_encode(ep.subgoals[i]);
      std::string p = (std::filesystem::path(dump_dir) /
                       ("subgoal_" + std::to_string(i) + ".png")).string();
      write_file(p, std::string(png.begin(), png.end()));
    }
  }
  std::printf("episode %s/%s seed %llu: %s in %d steps\n", task_id.c_str(),
              level.c_str(), static_cast<unsigned long long>(seed),
              ep.success ? "success" : (ep.valid ? "failure" : "invalid"), ep.env_steps);
  return 0;
}

int cmd_evaluate(const RunConfig& cfg, const std::string& ckpt, int episodes,
                 const std::string& levels_csv, const std::string& tasks_csv,
                 uint64_t seed, const std::string& out) {
  auto m = load_model(ckpt);
  envsim::Env env{envsim::EnvConfig::from(cfg)};
  auto rc = inference::RolloutConfig::from(cfg);
  inference::EvalOptions opt;
  opt.tasks = split_csv(tasks_csv);
  opt.levels = parse_levels(levels_csv);
  opt.episodes = episodes;
  opt.seed = seed;
  auto rep = inference::evaluate(m, env, rc, opt);
  if (!out.empty()) write_json(out, rep.to_json(), cfg.hash());
  std::fputs(rep.table().c_str(), stdout);
  return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::map<std::string, std::string>& ckpts,
               int episodes, const std::string& levels_csv, const std::string& tasks_csv,
               uint64_t seed, const std::string& out) {
  std::map<std::string, std::unique_ptr<model::Model>> models;
  std::map<std::string, model::Model*> ptrs;
  for (const auto& [mode, path] : ckpts) {
    if (path.empty()) continue;
    models[mode] = std::make_unique<model::Model>(load_model(path));
    ptrs[mode] = models[mode].get();
  }
  envsim::Env env{envsim::EnvConfig::from(cfg)};
  auto rc = inference::RolloutConfig::from(cfg);
  inference::EvalOptions opt;
  opt.tasks = split_csv(tasks_csv);
  opt.levels = parse_levels(levels_csv);
  opt.episodes = episodes;
  opt.seed = seed;
  auto table = inference::ablation_suite(ptrs, env, rc, opt);
  if (!out.empty()) write_json(out, table.to_json(), cfg.hash());
  std::fputs(table.table().c_str(), stdout);
  return 0;
}

// The enumerated toy sequence: two text tokens, two semantic patches of one
// frame, a two-token noise group, its clean target, one action token.
std::vector<tokenstream::TokenRecord> demo_records() {
  using tokenstream::Role;
  using tokenstream::TokenRecord;
  auto make = [pos = 0](Role role, int frame, int group, int target_group) mutable {
    TokenRecord r;
    r.pos = pos++;
    r.role = role;
    r.frame = frame;
    r.group = group;
    r.target_group = target_group;
    return r;
  };
  return {make(Role::kText, -1, -1, -1),     make(Role::kText, -1, -1, -1),
          make(Role::kVisUnd, 1, -1, -1),    make(Role::kVisUnd, 1, -1, -1),
          make(Role::kVisNoise, 2, 0, -1),   make(Role::kVisNoise, 2, 0, -1),
          make(Role::kVisClean, 2, -1, 0),   make(Role::kActNoise, -1, 1, -1)};
}

int cmd_inspect_mask(const RunConfig& cfg, const std::string& demo,
                     const std::string& format, const std::string& out) {
  if (demo != "emcot") throw std::invalid_argument("unknown demo '" + demo + "'");
  auto mask = tokenstream::build_attention_mask(
      demo_records(), cfg.flag("tokens.cross_noise_groups_attend"));
  std::string text =
      format == "pgm" ? tokenstream::mask_to_pgm(mask) : tokenstream::mask_to_csv(mask);
  if (out.empty())
    std::fputs(text.c_str(), stdout);
  else
    write_file(out, text);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale embodied chain-of-thought pipeline"};
  app.require_subcommand(1);

  GlobalArgs g;
  app.add_option("--config", g.config_path, "run configuration file (JSON)");
  app.add_option("--set", g.overrides, "dotted overrides, e.g. train.steps=100");
  app.add_option("--workers", g.workers, "parallel worker cap")->check(CLI::PositiveNumber);

  std::string out, traj_path, records_path, manifest, ckpt, init_ckpt, resume_ckpt;
  std::string tasks_csv, levels_csv = "easy,hard", level = "easy", task_id = "stack_two";
  std::string demo = "emcot", format = "pgm", dump_dir;
  std::map<std::string, std::string> ablate_ckpts;
  int count = 40, episodes = 20;
  uint64_t seed = 0;

  auto* synth = app.add_subcommand("synth-env-data", "collect scripted expert trajectories");
  synth->add_option("--out", out)->required();
  synth->add_option("--count", count);
  synth->add_option("--tasks", tasks_csv);
  synth->add_option("--level", level);
  synth->add_option("--seed", seed);

  auto* ann = app.add_subcommand("annotate", "run the three-stage annotation pipeline");
  ann->add_option("--trajectories", traj_path)->required();
  ann->add_option("--out", out)->required();

  auto* build = app.add_subcommand("build-dataset", "write and validate a dataset manifest");
  build->add_option("--trajectories", traj_path)->required();
  build->add_option("--records", records_path)->required();
  build->add_option("--out", out)->required();

  auto* pre = app.add_subcommand("pretrain", "versatile pre-training stage");
  pre->add_option("--dataset", manifest)->required();
  pre->add_option("--out", out)->required();
  pre->add_option("--resume", resume_ckpt);

  auto* fine = app.add_subcommand("finetune", "chain-of-thought fine-tuning stage");
  fine->add_option("--dataset", manifest)->required();
  fine->add_option("--out", out)->required();
  fine->add_option("--init", init_ckpt, "starting checkpoint (e.g. from pretrain)");
  fine->add_option("--resume", resume_ckpt);

  auto* roll = app.add_subcommand("rollout", "run one closed-loop episode");
  roll->add_option("--checkpoint", ckpt)->required();
  roll->add_option("--task", task_id);
  roll->add_option("--level", level);
  roll->add_option("--seed", seed);
  roll->add_option("--out", out);
  roll->add_option("--dump-dir", dump_dir, "write generated subgoal images here");

  auto* ev = app.add_subcommand("evaluate", "success rates over the task suite");
  ev->add_option("--checkpoint", ckpt)->required();
  ev->add_option("--episodes", episodes);
  ev->add_option("--levels", levels_csv);
  ev->add_option("--tasks", tasks_csv);
  ev->add_option("--seed", seed);
  ev->add_option("--out", out);

  auto* ab = app.add_subcommand("ablate", "mode comparison table");
  ab->add_option("--full", ablate_ckpts["full"]);
  ab->add_option("--no-text", ablate_ckpts["no_text"]);
  ab->add_option("--no-vis", ablate_ckpts["no_vis"]);
  ab->add_option("--none", ablate_ckpts["none"]);
  ab->add_option("--episodes", episodes);
  ab->add_option("--levels", levels_csv);
  ab->add_option("--tasks", tasks_csv);
  ab->add_option("--seed", seed);
  ab->add_option("--out", out);

  auto* mask = app.add_subcommand("inspect-mask", "print an attention mask grid");
  mask->add_option("--demo", demo);
  mask->add_option("--format", format)->check(CLI::IsMember({"pgm", "csv"}));
  mask->add_option("--out", out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << Json{{"error", e.what()}}.dump() << "\n";
    return 1;
  }

  try {
#ifdef _OPENMP
    omp_set_num_threads(g.workers);
#endif
    RunConfig cfg = load_config(g);
    if (synth->parsed()) return cmd_synth(cfg, out, count, tasks_csv, level, seed);
    if (ann->parsed()) return cmd_annotate(cfg, traj_path, out);
    if (build->parsed()) return cmd_build_dataset(cfg, traj_path, records_path, out);
    if (pre->parsed()) return cmd_train(cfg, "pretrain", manifest, out, "", resume_ckpt);
    if (fine->parsed())
      return cmd_train(cfg, "finetune", manifest, out, init_ckpt, resume_ckpt);
    if (roll->parsed())
      return cmd_rollout(cfg, ckpt, task_id, level, seed, out, dump_dir);
    if (ev->parsed())
      return cmd_evaluate(cfg, ckpt, episodes, levels_csv, tasks_csv, seed, out);
    if (ab->parsed())
      return cmd_ablate(cfg, ablate_ckpts, episodes, levels_csv, tasks_csv, seed, out);
    if (mask->parsed()) return cmd_inspect_mask(cfg, demo, format, out);
    std::cerr << Json{{"error", "no subcommand"}}.dump() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << Json{{"error", e.what()}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << Json{{"error", e.what()}}.dump() << "\n";
    return 2;
  }
}
