#pragma once

#include "emcot/envsim.hpp"
#include "emcot/model.hpp"
#include "emcot/tokenstream.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace emcot::inference {

struct RolloutConfig {
  std::string mode = "full";  // full | no_text | no_vis | none
  int context = 3;            // c, observation frames
  int chunk = 16;             // K, actions per plan
  int replan_chunks = 1;      // chunks executed open-loop per plan
  int flow_steps = 5;
  int max_text_tokens = 48;
  int step_limit = 200;

  void validate() const;
  static RolloutConfig from(const RunConfig& cfg);
};

bool mode_uses_text(const std::string& mode);
bool mode_uses_vision(const std::string& mode);

// One reasoning -> subgoal -> action pass. History holds rendered
// observations, most recent last; it is left-padded to the context length.
struct StepOutput {
  std::string reasoning;             // empty when the mode skips text
  bool forced_transition = false;    // text budget ran out
  std::optional<Image> subgoal;      // decoded generated subgoal
  std::vector<Vec> subgoal_latents;  // clean latent grid, row-major
  Mat actions;                       // (chunk, action_dim)
};

// proprio (8-dim arm state of the newest frame) is rendered into the
// instruction line, matching the training-time layout; empty = omitted.
StepOutput emcot_step(model::Model& model, const std::string& instruction,
                      const std::vector<Image>& history, const RolloutConfig& rc,
                      Rng& rng, const Vec& proprio = Vec());

struct EpisodeRecord {
  std::string task_id;
  std::string level;
  uint64_t seed = 0;
  bool success = false;
  bool valid = true;
  std::string error;  // set when invalid
  int env_steps = 0;
  std::vector<std::string> reasoning;     // one per plan
  std::vector<bool> forced;               // one per plan
  std::vector<Image> subgoals;            // one per plan when the mode emits them
  Json to_json() const;                   // images reported as counts only
};

// Closed loop: plan, execute min(chunk, remaining) env steps per chunk,
// replan. Deterministic given the seed. Env exceptions mark the episode
// invalid instead of propagating.
EpisodeRecord run_episode(const envsim::Env& env, model::Model& model,
                          const envsim::TaskSpec& task, const RolloutConfig& rc,
                          uint64_t seed);

struct EvalOptions {
  std::vector<std::string> tasks;     // empty = full suite
  std::vector<envsim::Level> levels = {envsim::Level::kEasy, envsim::Level::kHard};
  int episodes = 20;
  uint64_t seed = 0;
};

struct TaskResult {
  std::string task;
  std::string level;
  int successes = 0;
  int valid_episodes = 0;
  int invalid_episodes = 0;
  double rate = 0;  // successes / valid episodes
};

struct RolloutReport {
  std::vector<TaskResult> rows;
  std::map<std::string, double> mean_rate;  // per level
  double wall_seconds = 0;
  Json to_json() const;
  std::string table() const;
};

// Episode seeds depend only on (eval seed, task, index), so levels and
// ablation rows are compared on identical schedules.
uint64_t episode_seed(uint64_t eval_seed, const std::string& task, int index);

RolloutReport evaluate(model::Model& model, const envsim::Env& env,
                       const RolloutConfig& rc, const EvalOptions& opt);

// One row per mode, in the canonical order full / no_text / no_vis / none.
// Null models leave a gap marked in the table.
struct AblationRow {
  std::string mode;
  bool missing = false;
  std::map<std::string, double> rate;  // per level
  double wall_seconds = 0;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  Json to_json() const;
  std::string table() const;
};

AblationTable ablation_suite(const std::map<std::string, model::Model*>& models,
                             const envsim::Env& env, RolloutConfig rc,
                             const EvalOptions& opt);

}  // namespace emcot::inference
