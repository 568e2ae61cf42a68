#include "emcot/primitives.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace emcot::primitives {

Thresholds Thresholds::from(const RunConfig& cfg) {
  Thresholds th;
  th.vel = cfg.num("thresholds.vel");
  th.dg = cfg.num("thresholds.dg");
  th.min_idle = static_cast<int>(cfg.integer("thresholds.min_idle"));
  th.dir = cfg.num("thresholds.dir");
  th.literal_idle_subsegments = cfg.flag("thresholds.literal_idle_subsegments");
  th.validate();
  return th;
}

void Thresholds::validate() const {
  if (vel <= 0 || dg <= 0 || dir <= 0 || dir > 1 || min_idle < 1)
    throw std::invalid_argument("thresholds: out of range");
}

std::string kind_name(Kind k) {
  switch (k) {
    case Kind::kIdle: return "idle";
    case Kind::kMove: return "move";
    case Kind::kGrasp: return "grasp";
    case Kind::kRelease: return "release";
  }
  return "?";
}

bool is_idle(const Eigen::Vector3d& p, const Eigen::Vector3d& p_prev, double g,
             double g_prev, const Thresholds& th) {
  if (!p.allFinite() || !p_prev.allFinite() || !std::isfinite(g) || !std::isfinite(g_prev))
    throw std::invalid_argument("is_idle: non-finite input");
  return (p - p_prev).norm() < th.vel && std::abs(g - g_prev) < th.dg;
}

std::vector<std::pair<int, int>> segment_actions(const std::vector<bool>& idle_flags,
                                                 int min_idle) {
  if (idle_flags.empty()) throw std::invalid_argument("segment_actions: empty flags");
  const int n = static_cast<int>(idle_flags.size());
  // Maximal non-idle runs first, then merge across short interior idle gaps.
  std::vector<std::pair<int, int>> runs;
  for (int t = 0; t < n;) {
    if (idle_flags[t]) {
      ++t;
      continue;
    }
    int s = t;
    while (t < n && !idle_flags[t]) ++t;
    runs.emplace_back(s, t - 1);
  }
  std::vector<std::pair<int, int>> merged;
  for (const auto& r : runs) {
    if (!merged.empty() && r.first - merged.back().second - 1 < min_idle)
      merged.back().second = r.second;
    else
      merged.push_back(r);
  }
  return merged;
}

std::string get_direction(const Eigen::Vector3d& dp, const Thresholds& th) {
  if (!dp.allFinite()) throw std::invalid_argument("get_direction: non-finite input");
  double m = dp.cwiseAbs().maxCoeff();
  if (m < th.vel) return "stationary";
  static const char* pos_names[3] = {"forward", "left", "up"};
  static const char* neg_names[3] = {"backward", "right", "down"};
  std::string out;
  for (int i = 0; i < 3; ++i) {
    if (std::abs(dp(i)) >= th.dir * m) {
      if (!out.empty()) out += "-";
      out += dp(i) >= 0 ? pos_names[i] : neg_names[i];
    }
  }
  return out;
}

std::string lookup_sentence(Kind kind, const std::string& direction, int arm) {
  const std::string who = arm == 0 ? "the left arm" : "the right arm";
  switch (kind) {
    case Kind::kIdle: return who + " stays still";
    case Kind::kMove: return "move " + who + " " + direction;
    case Kind::kGrasp: return "close " + who + "'s gripper to grasp";
    case Kind::kRelease: return "open " + who + "'s gripper to release";
  }
  return "";
}

std::array<ArmTrack, 2> tracks_from(const envsim::Trajectory& traj) {
  std::array<ArmTrack, 2> tracks;
  for (const auto& f : traj.frames) {
    for (int a = 0; a < 2; ++a) {
      tracks[a].pos.push_back(f.obs.proprio.segment<3>(a * 4));
      tracks[a].grip.push_back(f.obs.proprio(a * 4 + 3));
    }
  }
  return tracks;
}

LabelTable extract_primitives(const std::array<ArmTrack, 2>& arms, const Thresholds& th) {
  const size_t T = arms[0].pos.size();
  if (T < 2 || arms[1].pos.size() != T || arms[0].grip.size() != T ||
      arms[1].grip.size() != T)
    throw std::invalid_argument("extract_primitives: need two aligned tracks, T >= 2");

  LabelTable labels(T);
  for (int a = 0; a < 2; ++a) {
    const ArmTrack& arm = arms[a];
    std::vector<bool> idle(T, true);
    for (size_t t = 1; t < T; ++t)
      idle[t] = is_idle(arm.pos[t], arm.pos[t - 1], arm.grip[t], arm.grip[t - 1], th);
    // idle[0] is defined true

    auto segments = segment_actions(idle, th.min_idle);

    std::vector<Kind> kind(T, Kind::kIdle);
    std::vector<std::string> dir(T);
    for (const auto& [s, e] : segments) {
      for (int t = std::max(1, s); t <= e; ++t) {
        double dgrip = arm.grip[t] - arm.grip[t - 1];
        if (dgrip <= -th.dg)
          kind[t] = Kind::kGrasp;
        else if (dgrip >= th.dg)
          kind[t] = Kind::kRelease;
      }
      // Move subsegments: maximal contiguous runs inside the segment. The
      // pseudocode says idle subsegments; the corrected reading labels the
      // non-idle, non-gripper ones (see the literal flag).
      auto in_subsegment = [&](int t) {
        bool gripper = kind[t] == Kind::kGrasp || kind[t] == Kind::kRelease;
        if (th.literal_idle_subsegments) return idle[t] && !gripper;
        return !idle[t] && !gripper;
      };
      for (int t = std::max(1, s); t <= e;) {
        if (!in_subsegment(t)) {
          ++t;
          continue;
        }
        int s2 = t;
        while (t <= e && in_subsegment(t)) ++t;
        int e2 = t - 1;
        Eigen::Vector3d net = arm.pos[e2] - arm.pos[s2 - 1];
        std::string d = get_direction(net, th);
        for (int u = s2; u <= e2; ++u) {
          kind[u] = Kind::kMove;
          dir[u] = d;
        }
      }
    }
    for (size_t t = 0; t < T; ++t) {
      PrimitiveLabel& lab = labels[t][a];
      lab.kind = kind[t];
      lab.direction = kind[t] == Kind::kMove ? dir[t] : "";
      lab.sentence = lookup_sentence(lab.kind, lab.direction, a);
    }
  }
  return labels;
}

LabelTable extract_primitives(const envsim::Trajectory& traj, const Thresholds& th) {
  return extract_primitives(tracks_from(traj), th);
}

void save_labels(const std::string& path, const std::string& trajectory_id,
                 const LabelTable& labels, bool append) {
  std::ofstream out(path, std::ios::binary | (append ? std::ios::app : std::ios::trunc));
  if (!out) throw std::runtime_error("cannot write " + path);
  for (size_t t = 0; t < labels.size(); ++t) {
    for (int a = 0; a < 2; ++a) {
      const PrimitiveLabel& lab = labels[t][a];
      Json line = {{"trajectory", trajectory_id},
                   {"frame", t},
                   {"arm", a == 0 ? "l" : "r"},
                   {"kind", kind_name(lab.kind)},
                   {"direction", lab.direction},
                   {"sentence", lab.sentence}};
      out << line.dump() << "\n";
    }
  }
}

}  // namespace emcot::primitives
