#pragma once

#include "emcot/config.hpp"
#include "emcot/image.hpp"
#include "emcot/util.hpp"

#include <Eigen/Dense>

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace emcot::envsim {

using Vec8 = Eigen::Matrix<double, 8, 1>;
using Vec3 = Eigen::Vector3d;

enum class Level { kEasy, kHard };

std::string level_name(Level l);
Level level_from(const std::string& name);

struct EnvConfig {
  int table_size = 16;
  int image_size = 64;
  int step_limit = 200;
  double grasp_radius = 1.5;
  double max_speed = 1.0;
  int hold_frames = 4;
  int hard_distractors = 3;

  static EnvConfig from(const RunConfig& cfg);
};

struct Object {
  int id = 0;
  std::string color;
  std::string shape;  // "block" | "button" | "zone"
  double x = 0, y = 0;
  double height = 0;  // z of the object's base, in cell units
  bool pressed = false;
  bool distractor = false;
};

struct ArmState {
  Vec3 ee{0, 0, 2.0};
  double grip = 1.0;  // opening, 1 = fully open
  int held = -1;      // object id or -1
};

struct WorldState {
  std::vector<Object> objects;
  std::array<ArmState, 2> arms;  // [0] = left, [1] = right
  int step = 0;
  std::array<uint8_t, 3> background{90, 90, 100};
};

struct Observation {
  Image image;
  Vec8 proprio;  // (P^l, G^l, P^r, G^r)
};

struct TaskSpec {
  std::string id;
  std::string instruction;
  Level level = Level::kEasy;
};

struct Boundary {
  std::string subtask;
  int start = 0;
  int end = 0;  // inclusive
};

struct Frame {
  Observation obs;
  Vec8 action;
};

struct Trajectory {
  TaskSpec task;
  uint64_t seed = 0;
  std::vector<Frame> frames;
  std::vector<Boundary> boundaries;  // expert sidecar metadata
  std::vector<std::string> plan;     // expert subtask plan, in order
  bool success = false;
};

class Env {
 public:
  explicit Env(EnvConfig cfg) : cfg_(cfg) {}

  static const std::vector<std::string>& task_ids();
  TaskSpec make_task(const std::string& id, Level level) const;

  WorldState reset(const TaskSpec& task, uint64_t seed) const;
  Observation observe(const WorldState& state) const;

  struct StepResult {
    WorldState state;
    Observation obs;
    bool done = false;
    bool success = false;
  };
  StepResult step(const TaskSpec& task, const WorldState& state, const Vec8& action) const;

  bool success(const TaskSpec& task, const WorldState& state) const;
  const EnvConfig& config() const { return cfg_; }

 private:
  EnvConfig cfg_;
};

// Deterministic waypoint-following controller. Emits idle holds between
// movement phases so downstream primitive extraction sees clean segments, and
// exposes ground-truth subtask boundaries for the deterministic annotator.
class ScriptedExpert {
 public:
  ScriptedExpert(const Env& env, const TaskSpec& task, const WorldState& start);

  bool finished() const;
  Vec8 act(const WorldState& state);  // call once per frame

  const std::vector<std::string>& plan() const { return plan_; }
  // Subtask index attributed to the most recently emitted action.
  int current_subtask() const { return current_subtask_; }

 private:
  struct Phase {
    enum Kind { kMove, kGrip, kHold } kind;
    int arm = 0;
    Vec3 target{0, 0, 0};
    int target_object = -1;  // track a (possibly moving) object instead of a fixed point
    Vec3 offset{0, 0, 0};
    double grip = 1.0;
    int frames = 0;  // for kHold
    int subtask = 0;
  };

  const Env& env_;
  std::vector<Phase> phases_;
  std::vector<std::string> plan_;
  size_t cursor_ = 0;
  int hold_left_ = 0;
  int current_subtask_ = 0;
};

struct CollectResult {
  std::optional<Trajectory> trajectory;
  std::string failure_reason;  // set when trajectory is absent
};

CollectResult collect_trajectory(const Env& env, const TaskSpec& task, uint64_t seed);

// JSON-lines persistence: per trajectory a header line then one line per
// frame. Images inline as base64 PNG or in a sibling ".imgs" blob.
void save_trajectories(const std::string& path, const std::vector<Trajectory>& trajs,
                       const std::string& config_hash, const std::string& image_format);
std::vector<Trajectory> load_trajectories(const std::string& path);

}  // namespace emcot::envsim
