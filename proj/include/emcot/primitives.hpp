#pragma once

#include "emcot/config.hpp"
#include "emcot/envsim.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace emcot::primitives {

struct Thresholds {
  double vel = 0.1;       // max idle displacement per frame
  double dg = 0.2;        // min significant gripper change
  int min_idle = 3;       // min idle-run length separating segments
  double dir = 0.7;       // dominant-axis ratio
  // Label idle subsegments as moves instead of non-idle ones (the printed
  // pseudocode behavior, kept for comparison).
  bool literal_idle_subsegments = false;

  static Thresholds from(const RunConfig& cfg);
  void validate() const;
};

enum class Kind { kIdle, kMove, kGrasp, kRelease };

std::string kind_name(Kind k);

struct PrimitiveLabel {
  Kind kind = Kind::kIdle;
  std::string direction;  // non-empty iff kind == kMove
  std::string sentence;
};

// One arm's proprioception track.
struct ArmTrack {
  std::vector<Eigen::Vector3d> pos;
  std::vector<double> grip;
};

// labels[t][arm]; arm 0 = left, 1 = right.
using LabelTable = std::vector<std::array<PrimitiveLabel, 2>>;

bool is_idle(const Eigen::Vector3d& p, const Eigen::Vector3d& p_prev, double g,
             double g_prev, const Thresholds& th);

// Maximal motion runs; interior idle runs shorter than min_idle are absorbed.
std::vector<std::pair<int, int>> segment_actions(const std::vector<bool>& idle_flags,
                                                 int min_idle);

std::string get_direction(const Eigen::Vector3d& dp, const Thresholds& th);

std::string lookup_sentence(Kind kind, const std::string& direction, int arm);

LabelTable extract_primitives(const std::array<ArmTrack, 2>& arms, const Thresholds& th);
LabelTable extract_primitives(const envsim::Trajectory& traj, const Thresholds& th);

std::array<ArmTrack, 2> tracks_from(const envsim::Trajectory& traj);

// JSON-lines label file keyed by (trajectory id, frame, arm).
void save_labels(const std::string& path, const std::string& trajectory_id,
                 const LabelTable& labels, bool append);

}  // namespace emcot::primitives
