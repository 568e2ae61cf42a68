#include "emcot/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace emcot::inference {

using model::Model;
using tokenstream::PackedSequence;
using tokenstream::Role;
using tokenstream::TokenRecord;
using tokenstream::Vocabulary;

void RolloutConfig::validate() const {
  static const std::vector<std::string> modes = {"full", "no_text", "no_vis", "none"};
  if (std::find(modes.begin(), modes.end(), mode) == modes.end())
    throw std::invalid_argument("rollout: unknown mode '" + mode + "'");
  if (context < 1 || chunk < 1 || flow_steps < 1 || step_limit < 1)
    throw std::invalid_argument("rollout: counts must be positive");
  if (replan_chunks < 1)
    throw std::invalid_argument("rollout: replan cadence must be at least one chunk");
  if (max_text_tokens < 1)
    throw std::invalid_argument("rollout: text budget must be positive");
}

RolloutConfig RolloutConfig::from(const RunConfig& cfg) {
  RolloutConfig rc;
  rc.mode = cfg.str("rollout.mode");
  rc.context = static_cast<int>(cfg.integer("rollout.context"));
  rc.chunk = static_cast<int>(cfg.integer("rollout.chunk"));
  rc.replan_chunks = static_cast<int>(cfg.integer("rollout.replan_chunks"));
  rc.flow_steps = static_cast<int>(cfg.integer("rollout.flow_steps"));
  rc.max_text_tokens = static_cast<int>(cfg.integer("rollout.max_text_tokens"));
  rc.step_limit = static_cast<int>(cfg.integer("rollout.step_limit"));
  rc.validate();
  return rc;
}

bool mode_uses_text(const std::string& mode) { return mode == "full" || mode == "no_vis"; }
bool mode_uses_vision(const std::string& mode) {
  return mode == "full" || mode == "no_text";
}

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v;
  return v;
}

struct Builder {
  std::vector<TokenRecord> out;
  int pos = 0;

  TokenRecord& push(Role role) {
    TokenRecord r;
    r.pos = pos++;
    r.role = role;
    out.push_back(std::move(r));
    return out.back();
  }
  void push_token(int id) { push(Role::kText).token = id; }
  void push_frame(const tokenstream::FrameTokens& ft, int frame) {
    for (const Vec& v : ft.und) {
      auto& r = push(Role::kVisUnd);
      r.frame = frame;
      r.payload = v;
    }
    for (const Vec& v : ft.clean) {
      auto& r = push(Role::kVisClean);
      r.frame = frame;
      r.payload = v;
    }
  }
  PackedSequence pack() const {
    PackedSequence p;
    p.records = out;
    p.n_samples = 1;
    p.mask = tokenstream::build_attention_mask(p.records);
    return p;
  }
};

}  // namespace

StepOutput emcot_step(Model& model, const std::string& instruction,
                      const std::vector<Image>& history, const RolloutConfig& rc,
                      Rng& rng, const Vec& proprio) {
  rc.validate();
  if (history.empty()) throw std::invalid_argument("emcot_step: empty history");
  const auto& mc = model.config();
  const Vocabulary& v = vocab();

  Builder b;
  // Context frames, left-padded by repeating the oldest observation.
  for (int i = 0; i < rc.context; ++i) {
    int h = static_cast<int>(history.size()) - rc.context + i;
    const Image& img = history[static_cast<size_t>(std::max(h, 0))];
    b.push_frame(model.encode_observation(img), i);
  }
  for (int id : v.tokenize(instruction + tokenstream::proprio_text(proprio)))
    b.push_token(id);

  StepOutput out;
  if (mode_uses_text(rc.mode)) {
    b.push_token(v.special("think_start"));
    std::vector<int> decoded;
    out.forced_transition = true;
    for (int n = 0; n < rc.max_text_tokens; ++n) {
      int tok = model.greedy_next_token(b.pack());
      if (v.is_special(tok)) {  // the model closed the span itself
        out.forced_transition = false;
        break;
      }
      decoded.push_back(tok);
      b.push_token(tok);
    }
    out.reasoning = v.detokenize(decoded);
    b.push_token(v.special("think_end"));
  }

  const int n_lat = mc.latent_grid * mc.latent_grid;
  std::vector<int> clean_rows;
  if (mode_uses_vision(rc.mode)) {
    b.push_token(v.special("vision_start"));
    for (int i = 0; i < n_lat; ++i) {
      auto& r = b.push(Role::kVisNoise);
      r.frame = rc.context;
      r.group = 0;
      r.payload = Vec::Zero(mc.latent_channels);
    }
    b.push_token(v.special("vision_end"));
    // Generated subgoal re-entering as clean conditioning for the actions.
    for (int i = 0; i < n_lat; ++i) {
      auto& r = b.push(Role::kVisClean);
      r.frame = rc.context;
      r.target_group = 0;
      r.payload = Vec::Zero(mc.latent_channels);
      clean_rows.push_back(static_cast<int>(b.out.size()) - 1);
    }
  }

  b.push_token(v.special("action_start"));
  for (int k = 0; k < rc.chunk; ++k) {
    auto& r = b.push(Role::kActNoise);
    r.group = 1;
    r.payload = Vec::Zero(mc.action_dim);
  }
  b.push_token(v.special("action_end"));

  PackedSequence pack = b.pack();
  if (mode_uses_vision(rc.mode)) {
    Mat latents = model.sample_flow(pack, 0, 0, rc.flow_steps, rng);
    for (int i = 0; i < n_lat; ++i) {
      out.subgoal_latents.push_back(latents.row(i));
      pack.records[static_cast<size_t>(clean_rows[i])].payload = latents.row(i);
    }
    out.subgoal = model.codec().decode(out.subgoal_latents);
  }
  out.actions = model.sample_flow(pack, 0, 1, rc.flow_steps, rng);
  return out;
}

Json EpisodeRecord::to_json() const {
  return Json{{"task", task_id},
              {"level", level},
              {"seed", seed},
              {"success", success},
              {"valid", valid},
              {"error", error},
              {"env_steps", env_steps},
              {"reasoning", reasoning},
              {"forced", std::vector<int>(forced.begin(), forced.end())},
              {"subgoal_count", subgoals.size()}};
}

EpisodeRecord run_episode(const envsim::Env& env, Model& model,
                          const envsim::TaskSpec& task, const RolloutConfig& rc,
                          uint64_t seed) {
  rc.validate();
  EpisodeRecord rec;
  rec.task_id = task.id;
  rec.level = envsim::level_name(task.level);
  rec.seed = seed;
  if (model.config().action_dim != 8)
    throw std::invalid_argument("run_episode: the env consumes 8-dim actions");
  Rng rng = make_rng(derive_seed(seed, "episode:" + task.id));
  try {
    envsim::WorldState state = env.reset(task, seed);
    auto first = env.observe(state);
    std::vector<Image> history{first.image};
    Vec proprio = first.proprio;
    bool done = false;
    while (!done && rec.env_steps < rc.step_limit) {
      StepOutput out = emcot_step(model, task.instruction, history, rc, rng, proprio);
      rec.reasoning.push_back(out.reasoning);
      rec.forced.push_back(out.forced_transition);
      if (out.subgoal) rec.subgoals.push_back(*out.subgoal);
      for (int rep = 0; rep < rc.replan_chunks && !done; ++rep) {
        for (int k = 0; k < rc.chunk && rec.env_steps < rc.step_limit; ++k) {
          envsim::Vec8 a = out.actions.row(k).transpose();
          auto sr = env.step(task, state, a);
          state = std::move(sr.state);
          ++rec.env_steps;
          proprio = sr.obs.proprio;
          history.push_back(std::move(sr.obs.image));
          if (static_cast<int>(history.size()) > rc.context)
            history.erase(history.begin());
          if (sr.done) {
            done = true;
            rec.success = sr.success;
            break;
          }
        }
        if (rec.env_steps >= rc.step_limit) break;
      }
    }
  } catch (const std::exception& e) {
    rec.valid = false;
    rec.error = e.what();
    rec.success = false;
  }
  return rec;
}

uint64_t episode_seed(uint64_t eval_seed, const std::string& task, int index) {
  return derive_seed(eval_seed, "eval:" + task + ":" + std::to_string(index));
}

Json RolloutReport::to_json() const {
  Json rows_j = Json::array();
  for (const auto& r : rows)
    rows_j.push_back({{"task", r.task},
                      {"level", r.level},
                      {"successes", r.successes},
                      {"valid_episodes", r.valid_episodes},
                      {"invalid_episodes", r.invalid_episodes},
                      {"rate", r.rate}});
  return Json{{"tool_version", kToolVersion},
              {"rows", rows_j},
              {"mean_rate", mean_rate},
              {"wall_seconds", wall_seconds}};
}

std::string RolloutReport::table() const {
  std::ostringstream os;
  os << "task              level  rate    succ/valid (invalid)\n";
  for (const auto& r : rows) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-17s %-6s %6.3f  %d/%d (%d)\n", r.task.c_str(),
                  r.level.c_str(), r.rate, r.successes, r.valid_episodes,
                  r.invalid_episodes);
    os << line;
  }
  for (const auto& [level, rate] : mean_rate) {
    char line[64];
    std::snprintf(line, sizeof(line), "mean %-6s %6.3f\n", level.c_str(), rate);
    os << line;
  }
  return os.str();
}

RolloutReport evaluate(Model& model, const envsim::Env& env, const RolloutConfig& rc,
                       const EvalOptions& opt) {
  if (opt.episodes < 1) throw std::invalid_argument("evaluate: need at least 1 episode");
  std::vector<std::string> tasks = opt.tasks.empty() ? envsim::Env::task_ids() : opt.tasks;
  if (tasks.empty()) throw std::invalid_argument("evaluate: need at least 1 task");
  const auto t0 = std::chrono::steady_clock::now();

  RolloutReport report;
  for (envsim::Level level : opt.levels) {
    double sum = 0;
    for (const std::string& id : tasks) {
      envsim::TaskSpec task = env.make_task(id, level);
      TaskResult res;
      res.task = id;
      res.level = envsim::level_name(level);
      for (int i = 0; i < opt.episodes; ++i) {
        // Level-independent schedule: easy and hard see the same seeds.
        EpisodeRecord ep = run_episode(env, model, task, rc,
                                       episode_seed(opt.seed, id, i));
        if (!ep.valid) {
          res.invalid_episodes++;
          continue;
        }
        res.valid_episodes++;
        res.successes += ep.success ? 1 : 0;
      }
      res.rate = res.valid_episodes
                     ? static_cast<double>(res.successes) / res.valid_episodes
                     : 0.0;
      sum += res.rate;
      report.rows.push_back(res);
    }
    report.mean_rate[envsim::level_name(level)] = sum / static_cast<double>(tasks.size());
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

Json AblationTable::to_json() const {
  Json rows_j = Json::array();
  for (const auto& r : rows)
    rows_j.push_back({{"mode", r.mode},
                      {"missing", r.missing},
                      {"rate", r.rate},
                      {"wall_seconds", r.wall_seconds}});
  return Json{{"tool_version", kToolVersion}, {"rows", rows_j}};
}

std::string AblationTable::table() const {
  std::ostringstream os;
  os << "mode     easy    hard    wall_s\n";
  for (const auto& r : rows) {
    if (r.missing) {
      char line[64];
      std::snprintf(line, sizeof(line), "%-8s %s\n", r.mode.c_str(),
                    "--      --      (checkpoint missing)");
      os << line;
      continue;
    }
    char line[96];
    auto rate_of = [&](const char* level) {
      auto it = r.rate.find(level);
      return it == r.rate.end() ? 0.0 : it->second;
    };
    std::snprintf(line, sizeof(line), "%-8s %6.3f  %6.3f  %8.1f\n", r.mode.c_str(),
                  rate_of("easy"), rate_of("hard"), r.wall_seconds);
    os << line;
  }
  return os.str();
}

AblationTable ablation_suite(const std::map<std::string, Model*>& models,
                             const envsim::Env& env, RolloutConfig rc,
                             const EvalOptions& opt) {
  AblationTable out;
  for (const std::string& mode : {"full", "no_text", "no_vis", "none"}) {
    AblationRow row;
    row.mode = mode;
    auto it = models.find(mode);
    if (it == models.end() || it->second == nullptr) {
      row.missing = true;
      out.rows.push_back(row);
      continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    rc.mode = mode;
    RolloutReport rep = evaluate(*it->second, env, rc, opt);
    row.rate = rep.mean_rate;
    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.rows.push_back(row);
  }
  return out;
}

}  // namespace emcot::inference
