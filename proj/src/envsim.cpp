#include "emcot/envsim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace emcot::envsim {

namespace {

struct Rgb {
  uint8_t r, g, b;
};

Rgb color_rgb(const std::string& name) {
  if (name == "red") return {200, 35, 35};
  if (name == "blue") return {40, 70, 210};
  if (name == "green") return {40, 170, 70};
  if (name == "yellow") return {225, 205, 45};
  if (name == "purple") return {150, 60, 185};
  if (name == "orange") return {235, 140, 35};
  if (name == "white") return {235, 235, 235};
  if (name == "gray") return {125, 125, 125};
  throw std::invalid_argument("unknown color: " + name);
}

double dist_xy(double ax, double ay, double bx, double by) {
  return std::hypot(ax - bx, ay - by);
}

const Object* find_object(const WorldState& s, const std::string& color,
                          const std::string& shape) {
  for (const auto& o : s.objects)
    if (!o.distractor && o.color == color && o.shape == shape) return &o;
  return nullptr;
}

Object* find_object(WorldState& s, const std::string& color, const std::string& shape) {
  return const_cast<Object*>(find_object(const_cast<const WorldState&>(s), color, shape));
}

}  // namespace

std::string level_name(Level l) { return l == Level::kEasy ? "easy" : "hard"; }

Level level_from(const std::string& name) {
  if (name == "easy") return Level::kEasy;
  if (name == "hard") return Level::kHard;
  throw std::invalid_argument("unknown level: " + name);
}

EnvConfig EnvConfig::from(const RunConfig& cfg) {
  EnvConfig e;
  e.table_size = static_cast<int>(cfg.integer("env.table_size"));
  e.image_size = static_cast<int>(cfg.integer("env.image_size"));
  e.step_limit = static_cast<int>(cfg.integer("env.step_limit"));
  e.grasp_radius = cfg.num("env.grasp_radius");
  e.max_speed = cfg.num("env.max_speed");
  e.hold_frames = static_cast<int>(cfg.integer("env.hold_frames"));
  e.hard_distractors = static_cast<int>(cfg.integer("env.hard_distractors"));
  return e;
}

const std::vector<std::string>& Env::task_ids() {
  static const std::vector<std::string> ids = {"stack_two", "handover_block", "place_a2b",
                                               "press_button", "sweep_to_zone"};
  return ids;
}

TaskSpec Env::make_task(const std::string& id, Level level) const {
  TaskSpec t;
  t.id = id;
  t.level = level;
  if (id == "stack_two")
    t.instruction = "stack the red block on the blue block";
  else if (id == "handover_block")
    t.instruction = "pass the green block to the white zone";
  else if (id == "place_a2b")
    t.instruction = "place the red block on the white pad";
  else if (id == "press_button")
    t.instruction = "press the yellow button";
  else if (id == "sweep_to_zone")
    t.instruction = "sweep the orange block into the white zone";
  else
    throw std::invalid_argument("unknown task id: " + id);
  return t;
}

WorldState Env::reset(const TaskSpec& task, uint64_t seed) const {
  make_task(task.id, task.level);  // validates the id
  Rng rng = make_rng(derive_seed(seed, "reset:" + task.id));
  WorldState s;
  s.arms[0].ee = Vec3(2.5, 1.5, 2.0);
  s.arms[1].ee = Vec3(static_cast<double>(cfg_.table_size) - 2.5, 1.5, 2.0);

  auto cell = [&](double lo, double hi) {
    std::uniform_int_distribution<int> d(static_cast<int>(lo), static_cast<int>(hi));
    return d(rng) + 0.5;
  };
  auto place_free = [&](double xlo, double xhi, double ylo, double yhi) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      double x = cell(xlo, xhi), y = cell(ylo, yhi);
      bool clear = true;
      for (const auto& o : s.objects)
        if (dist_xy(x, y, o.x, o.y) < 3.0) clear = false;
      if (clear) return std::pair{x, y};
    }
    throw std::runtime_error("reset: could not place object");
  };
  auto add = [&](const std::string& color, const std::string& shape, double x, double y) {
    Object o;
    o.id = static_cast<int>(s.objects.size());
    o.color = color;
    o.shape = shape;
    o.x = x;
    o.y = y;
    s.objects.push_back(o);
  };

  if (task.id == "stack_two") {
    auto [rx, ry] = place_free(3, 12, 4, 12);
    add("red", "block", rx, ry);
    auto [bx, by] = place_free(3, 12, 4, 12);
    add("blue", "block", bx, by);
  } else if (task.id == "handover_block") {
    auto [gx, gy] = place_free(3, 6, 4, 12);
    add("green", "block", gx, gy);
    add("white", "zone", cfg_.table_size - 2.5, 8.5);
  } else if (task.id == "place_a2b") {
    auto [rx, ry] = place_free(3, 12, 4, 12);
    add("red", "block", rx, ry);
    auto [px, py] = place_free(3, 12, 4, 12);
    add("white", "zone", px, py);
  } else if (task.id == "press_button") {
    auto [bx, by] = place_free(3, 12, 4, 12);
    add("yellow", "button", bx, by);
  } else {  // sweep_to_zone
    add("white", "zone", cfg_.table_size - 3.5, cfg_.table_size - 3.5);
    for (int attempt = 0; attempt < 200; ++attempt) {
      auto [ox, oy] = place_free(4, 9, 4, 9);
      if (dist_xy(ox, oy, s.objects[0].x, s.objects[0].y) >= 4.0) {
        add("orange", "block", ox, oy);
        break;
      }
    }
    if (s.objects.size() < 2) throw std::runtime_error("reset: sweep placement failed");
  }

  if (task.level == Level::kHard) {
    std::uniform_int_distribution<int> bg(-25, 25);
    for (auto& c : s.background)
      c = static_cast<uint8_t>(std::clamp(static_cast<int>(c) + bg(rng), 0, 255));
    std::uniform_real_distribution<double> jitter(-0.4, 0.4);
    for (auto& o : s.objects) {
      o.x = std::clamp(o.x + jitter(rng), 1.0, cfg_.table_size - 1.0);
      o.y = std::clamp(o.y + jitter(rng), 1.0, cfg_.table_size - 1.0);
    }
    for (int d = 0; d < cfg_.hard_distractors; ++d) {
      auto [dx, dy] = place_free(2, 13, 3, 13);
      Object o;
      o.id = static_cast<int>(s.objects.size());
      o.color = "gray";
      o.shape = "block";
      o.x = dx;
      o.y = dy;
      o.distractor = true;
      s.objects.push_back(o);
    }
  }
  return s;
}

Observation Env::observe(const WorldState& s) const {
  Observation obs;
  obs.image = Image(cfg_.image_size, cfg_.image_size);
  const double px_per_cell = static_cast<double>(cfg_.image_size) / cfg_.table_size;
  auto& img = obs.image;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      img.set(x, y, s.background[0], s.background[1], s.background[2]);

  auto fill_cells = [&](double cx, double cy, double half, Rgb c) {
    int x0 = std::max(0, static_cast<int>(std::floor((cx - half) * px_per_cell)));
    int x1 = std::min(img.width - 1, static_cast<int>(std::ceil((cx + half) * px_per_cell)) - 1);
    int y0 = std::max(0, static_cast<int>(std::floor((cy - half) * px_per_cell)));
    int y1 = std::min(img.height - 1, static_cast<int>(std::ceil((cy + half) * px_per_cell)) - 1);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) img.set(x, y, c.r, c.g, c.b);
  };

  std::vector<const Object*> ordered;
  for (const auto& o : s.objects) ordered.push_back(&o);
  std::stable_sort(ordered.begin(), ordered.end(), [](const Object* a, const Object* b) {
    double za = a->shape == "zone" ? -1.0 : a->height;
    double zb = b->shape == "zone" ? -1.0 : b->height;
    return za < zb;
  });
  for (const Object* o : ordered) {
    Rgb c = color_rgb(o->color);
    if (o->shape == "zone") {
      fill_cells(o->x, o->y, 1.5, c);
    } else if (o->shape == "button") {
      if (o->pressed) c = {static_cast<uint8_t>(c.r / 2), static_cast<uint8_t>(c.g / 2),
                           static_cast<uint8_t>(c.b / 2)};
      fill_cells(o->x, o->y, 0.5, c);
    } else {
      double f = std::min(1.0 + 0.25 * o->height, 1.6);
      Rgb lifted{static_cast<uint8_t>(std::min(255.0, c.r * f)),
                 static_cast<uint8_t>(std::min(255.0, c.g * f)),
                 static_cast<uint8_t>(std::min(255.0, c.b * f))};
      fill_cells(o->x, o->y, 0.5, lifted);
    }
  }

  // Arm markers on top: a plus shape, white core when the gripper is closed.
  for (int a = 0; a < 2; ++a) {
    const ArmState& arm = s.arms[a];
    Rgb c = a == 0 ? Rgb{0, 230, 230} : Rgb{235, 0, 235};
    int cx = std::clamp(static_cast<int>(arm.ee.x() * px_per_cell), 1, img.width - 2);
    int cy = std::clamp(static_cast<int>(arm.ee.y() * px_per_cell), 1, img.height - 2);
    img.set(cx - 1, cy, c.r, c.g, c.b);
    img.set(cx + 1, cy, c.r, c.g, c.b);
    img.set(cx, cy - 1, c.r, c.g, c.b);
    img.set(cx, cy + 1, c.r, c.g, c.b);
    if (arm.grip < 0.5)
      img.set(cx, cy, 255, 255, 255);
    else
      img.set(cx, cy, c.r / 2, c.g / 2, c.b / 2);
  }

  for (int a = 0; a < 2; ++a) {
    obs.proprio.segment<3>(a * 4) = s.arms[a].ee;
    obs.proprio(a * 4 + 3) = s.arms[a].grip;
  }
  return obs;
}

bool Env::success(const TaskSpec& task, const WorldState& s) const {
  if (task.id == "stack_two") {
    const Object* red = find_object(s, "red", "block");
    const Object* blue = find_object(s, "blue", "block");
    bool held = s.arms[0].held == red->id || s.arms[1].held == red->id;
    return !held && dist_xy(red->x, red->y, blue->x, blue->y) <= 0.75 &&
           red->height >= blue->height + 0.5;
  }
  if (task.id == "handover_block") {
    const Object* g = find_object(s, "green", "block");
    const Object* z = find_object(s, "white", "zone");
    bool held = s.arms[0].held == g->id || s.arms[1].held == g->id;
    return !held && dist_xy(g->x, g->y, z->x, z->y) <= 1.2;
  }
  if (task.id == "place_a2b") {
    const Object* r = find_object(s, "red", "block");
    const Object* z = find_object(s, "white", "zone");
    bool held = s.arms[0].held == r->id || s.arms[1].held == r->id;
    return !held && dist_xy(r->x, r->y, z->x, z->y) <= 1.0 && r->height < 0.5;
  }
  if (task.id == "press_button") {
    return find_object(s, "yellow", "button")->pressed;
  }
  // sweep_to_zone
  const Object* o = find_object(s, "orange", "block");
  const Object* z = find_object(s, "white", "zone");
  return dist_xy(o->x, o->y, z->x, z->y) <= 1.2;
}

Env::StepResult Env::step(const TaskSpec& task, const WorldState& state,
                          const Vec8& action) const {
  if (!action.allFinite()) throw std::invalid_argument("step: non-finite action");
  StepResult res;
  res.state = state;
  WorldState& s = res.state;
  const double tb = static_cast<double>(cfg_.table_size);

  for (int a = 0; a < 2; ++a) {
    ArmState& arm = s.arms[a];
    Vec3 delta = action.segment<3>(a * 4);
    double norm = delta.norm();
    if (norm > cfg_.max_speed) delta *= cfg_.max_speed / norm;
    arm.ee += delta;
    arm.ee.x() = std::clamp(arm.ee.x(), 0.0, tb);
    arm.ee.y() = std::clamp(arm.ee.y(), 0.0, tb);
    arm.ee.z() = std::clamp(arm.ee.z(), 0.0, 4.0);

    double new_grip = std::clamp(action(a * 4 + 3), 0.0, 1.0);
    bool closing = arm.grip >= 0.5 && new_grip < 0.5;
    bool opening = arm.grip < 0.5 && new_grip >= 0.5;
    arm.grip = new_grip;

    if (closing && arm.held < 0) {
      int best = -1;
      double best_dist = cfg_.grasp_radius;
      for (const auto& o : s.objects) {
        if (o.shape != "block") continue;
        if (s.arms[0].held == o.id || s.arms[1].held == o.id) continue;
        double d = (arm.ee - Vec3(o.x, o.y, o.height)).norm();
        if (d <= best_dist) {
          best_dist = d;
          best = o.id;
        }
      }
      arm.held = best;
    }
    if (opening && arm.held >= 0) {
      Object& o = s.objects[arm.held];
      double base = 0.0;
      for (const auto& other : s.objects) {
        if (other.id == o.id || other.shape != "block") continue;
        if (s.arms[0].held == other.id || s.arms[1].held == other.id) continue;
        if (dist_xy(o.x, o.y, other.x, other.y) <= 0.6)
          base = std::max(base, other.height + 1.0);
      }
      o.height = base;
      arm.held = -1;
    }
    if (arm.held >= 0) {
      Object& o = s.objects[arm.held];
      o.x = arm.ee.x();
      o.y = arm.ee.y();
      o.height = arm.ee.z();
    }

    // Pushing: a closed, empty, low gripper drags nearby blocks along.
    if (arm.grip < 0.5 && arm.held < 0 && arm.ee.z() <= 1.0) {
      for (auto& o : s.objects) {
        if (o.shape != "block") continue;
        if (s.arms[0].held == o.id || s.arms[1].held == o.id) continue;
        if (dist_xy(arm.ee.x(), arm.ee.y(), o.x, o.y) <= 1.0 && o.height < 0.5) {
          o.x = std::clamp(o.x + delta.x(), 0.0, tb);
          o.y = std::clamp(o.y + delta.y(), 0.0, tb);
        }
      }
    }

    // Button press: low, closed gripper over the button latches it.
    for (auto& o : s.objects) {
      if (o.shape != "button") continue;
      if (arm.grip < 0.5 && arm.ee.z() <= 0.3 &&
          dist_xy(arm.ee.x(), arm.ee.y(), o.x, o.y) <= 0.8)
        o.pressed = true;
    }
  }

  s.step += 1;
  res.success = success(task, s);
  res.done = res.success || s.step >= cfg_.step_limit;
  res.obs = observe(s);
  return res;
}

// ---------------------------------------------------------------------------
// Scripted expert

ScriptedExpert::ScriptedExpert(const Env& env, const TaskSpec& task, const WorldState& start)
    : env_(env) {
  const int hold = env.config().hold_frames;
  auto obj_id = [&](const std::string& color, const std::string& shape) {
    const Object* o = find_object(start, color, shape);
    if (!o) throw std::runtime_error("expert: required object missing, refusing task");
    return o->id;
  };
  int subtask = -1;
  auto begin_subtask = [&](const std::string& name) {
    plan_.push_back(name);
    ++subtask;
  };
  auto move_to_object = [&](int arm, int id, Vec3 offset) {
    Phase p;
    p.kind = Phase::kMove;
    p.arm = arm;
    p.target_object = id;
    p.offset = offset;
    p.subtask = subtask;
    phases_.push_back(p);
  };
  auto move_to_point = [&](int arm, Vec3 target) {
    Phase p;
    p.kind = Phase::kMove;
    p.arm = arm;
    p.target = target;
    p.subtask = subtask;
    phases_.push_back(p);
  };
  auto set_grip = [&](int arm, double grip) {
    Phase p;
    p.kind = Phase::kGrip;
    p.arm = arm;
    p.grip = grip;
    p.subtask = subtask;
    phases_.push_back(p);
  };
  auto hold_still = [&]() {
    Phase p;
    p.kind = Phase::kHold;
    p.frames = hold;
    p.subtask = subtask;
    phases_.push_back(p);
  };
  auto pick = [&](int arm, int id, const std::string& name) {
    begin_subtask(name);
    move_to_object(arm, id, Vec3(0, 0, 2.0));
    hold_still();
    move_to_object(arm, id, Vec3(0, 0, 0.3));
    hold_still();
    set_grip(arm, 0.0);
    hold_still();
    move_to_object(arm, id, Vec3(0, 0, 2.2));
    hold_still();
  };

  const double tb = env.config().table_size;
  if (task.id == "stack_two") {
    int red = obj_id("red", "block"), blue = obj_id("blue", "block");
    pick(0, red, "Pick up the red block");
    begin_subtask("Stack it on the blue block");
    move_to_object(0, blue, Vec3(0, 0, 2.2));
    hold_still();
    move_to_object(0, blue, Vec3(0, 0, 1.2));
    hold_still();
    set_grip(0, 1.0);
    hold_still();
    move_to_point(0, Vec3(2.5, 1.5, 2.0));
  } else if (task.id == "handover_block") {
    int green = obj_id("green", "block"), zone = obj_id("white", "zone");
    Vec3 handover(tb / 2, tb / 2, 0.5);
    pick(0, green, "Pick up the green block with the left arm");
    begin_subtask("Hand the block over at the center");
    move_to_point(0, Vec3(handover.x(), handover.y(), 2.0));
    hold_still();
    move_to_point(0, handover);
    hold_still();
    set_grip(0, 1.0);
    hold_still();
    move_to_point(0, Vec3(2.5, 1.5, 2.0));
    hold_still();
    begin_subtask("Place the block in the white zone with the right arm");
    move_to_object(1, green, Vec3(0, 0, 2.0));
    hold_still();
    move_to_object(1, green, Vec3(0, 0, 0.3));
    hold_still();
    set_grip(1, 0.0);
    hold_still();
    move_to_object(1, zone, Vec3(0, 0, 2.0));
    hold_still();
    move_to_object(1, zone, Vec3(0, 0, 0.5));
    hold_still();
    set_grip(1, 1.0);
    hold_still();
    move_to_point(1, Vec3(tb - 2.5, 1.5, 2.0));
  } else if (task.id == "place_a2b") {
    int red = obj_id("red", "block"), pad = obj_id("white", "zone");
    pick(0, red, "Pick up the red block");
    begin_subtask("Place it on the white pad");
    move_to_object(0, pad, Vec3(0, 0, 2.0));
    hold_still();
    move_to_object(0, pad, Vec3(0, 0, 0.5));
    hold_still();
    set_grip(0, 1.0);
    hold_still();
    move_to_point(0, Vec3(2.5, 1.5, 2.0));
  } else if (task.id == "press_button") {
    int btn = obj_id("yellow", "button");
    begin_subtask("Move above the yellow button");
    move_to_object(1, btn, Vec3(0, 0, 1.5));
    hold_still();
    set_grip(1, 0.0);
    hold_still();
    begin_subtask("Press the yellow button");
    move_to_object(1, btn, Vec3(0, 0, 0.2));
    hold_still();
    move_to_object(1, btn, Vec3(0, 0, 1.5));
    hold_still();
    set_grip(1, 1.0);
  } else if (task.id == "sweep_to_zone") {
    int block = obj_id("orange", "block"), zone = obj_id("white", "zone");
    const Object& ob = start.objects[block];
    const Object& oz = start.objects[zone];
    Eigen::Vector2d dir(ob.x - oz.x, ob.y - oz.y);
    dir.normalize();
    Vec3 behind(ob.x + 1.3 * dir.x(), ob.y + 1.3 * dir.y(), 0.4);
    begin_subtask("Move behind the orange block");
    set_grip(1, 0.0);
    hold_still();
    move_to_point(1, Vec3(behind.x(), behind.y(), 2.0));
    hold_still();
    move_to_point(1, behind);
    hold_still();
    begin_subtask("Sweep the block into the zone");
    move_to_object(1, zone, Vec3(0, 0, 0.4));
    hold_still();
    move_to_point(1, Vec3(tb - 2.5, 1.5, 2.0));
    hold_still();
    set_grip(1, 1.0);
  } else {
    throw std::invalid_argument("expert: unknown task " + task.id);
  }
}

bool ScriptedExpert::finished() const { return cursor_ >= phases_.size(); }

Vec8 ScriptedExpert::act(const WorldState& state) {
  Vec8 action = Vec8::Zero();
  action(3) = state.arms[0].grip;
  action(7) = state.arms[1].grip;
  while (cursor_ < phases_.size()) {
    Phase& p = phases_[cursor_];
    current_subtask_ = p.subtask;
    if (p.kind == Phase::kHold) {
      if (hold_left_ == 0) hold_left_ = p.frames;
      if (--hold_left_ == 0) ++cursor_;
      return action;
    }
    if (p.kind == Phase::kGrip) {
      action(p.arm * 4 + 3) = p.grip;
      ++cursor_;
      return action;
    }
    // kMove
    Vec3 target = p.target;
    if (p.target_object >= 0) {
      const Object& o = state.objects[p.target_object];
      target = Vec3(o.x, o.y, o.height) + p.offset;
      // Carrying the tracked object: its height equals the gripper's, so use
      // the offset z as an absolute height instead of chasing ourselves.
      if (state.arms[p.arm].held == p.target_object)
        target.z() = p.offset.z();
    }
    Vec3 delta = target - state.arms[p.arm].ee;
    if (delta.norm() <= 0.05) {
      ++cursor_;
      continue;
    }
    double ms = env_.config().max_speed;
    if (delta.norm() > ms) delta *= ms / delta.norm();
    action.segment<3>(p.arm * 4) = delta;
    return action;
  }
  return action;
}

CollectResult collect_trajectory(const Env& env, const TaskSpec& task, uint64_t seed) {
  CollectResult result;
  WorldState state = env.reset(task, seed);
  Observation obs = env.observe(state);

  Trajectory traj;
  traj.task = task;
  traj.seed = seed;

  ScriptedExpert expert(env, task, state);
  traj.plan = expert.plan();
  std::vector<int> frame_subtask;

  bool success = false;
  while (!expert.finished() && state.step < env.config().step_limit) {
    Vec8 action = expert.act(state);
    if (expert.finished() && action.segment<3>(0).norm() == 0 &&
        action.segment<3>(4).norm() == 0)
      break;
    Frame f;
    f.obs = obs;
    f.action = action;
    traj.frames.push_back(std::move(f));
    frame_subtask.push_back(expert.current_subtask());
    auto sr = env.step(task, state, action);
    state = std::move(sr.state);
    obs = std::move(sr.obs);
    if (sr.success) {
      success = true;
      break;
    }
  }
  // Terminal frame: the achieved state with a neutral action.
  {
    Frame f;
    f.obs = obs;
    Vec8 a = Vec8::Zero();
    a(3) = state.arms[0].grip;
    a(7) = state.arms[1].grip;
    f.action = a;
    traj.frames.push_back(std::move(f));
    frame_subtask.push_back(frame_subtask.empty() ? 0 : frame_subtask.back());
  }
  success = success || env.success(task, state);
  traj.success = success;

  if (!success) {
    result.failure_reason = state.step >= env.config().step_limit
                                ? "step limit reached before success"
                                : "expert plan exhausted without success";
    return result;
  }

  // Compress the per-frame subtask ids into inclusive boundary ranges and
  // keep only the subtasks that actually ran.
  std::vector<std::string> realized;
  for (size_t i = 0; i < frame_subtask.size();) {
    size_t j = i;
    while (j + 1 < frame_subtask.size() && frame_subtask[j + 1] == frame_subtask[i]) ++j;
    Boundary b;
    b.subtask = traj.plan[frame_subtask[i]];
    b.start = static_cast<int>(i);
    b.end = static_cast<int>(j);
    traj.boundaries.push_back(b);
    realized.push_back(b.subtask);
    i = j + 1;
  }
  traj.plan = realized;
  result.trajectory = std::move(traj);
  return result;
}

// ---------------------------------------------------------------------------
// JSONL persistence

void save_trajectories(const std::string& path, const std::vector<Trajectory>& trajs,
                       const std::string& config_hash, const std::string& image_format) {
  if (image_format != "png" && image_format != "blob")
    throw std::invalid_argument("image_format must be png or blob");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  std::ofstream blob;
  size_t blob_offset = 0;
  if (image_format == "blob") {
    blob.open(path + ".imgs", std::ios::binary | std::ios::trunc);
    if (!blob) throw std::runtime_error("cannot write " + path + ".imgs");
  }

  for (const auto& traj : trajs) {
    Json header = {{"type", "header"},
                   {"task", traj.task.id},
                   {"instruction", traj.task.instruction},
                   {"level", level_name(traj.task.level)},
                   {"seed", traj.seed},
                   {"config_hash", config_hash},
                   {"tool_version", kToolVersion},
                   {"image_format", image_format},
                   {"frames", traj.frames.size()},
                   {"success", traj.success},
                   {"plan", traj.plan}};
    Json bounds = Json::array();
    for (const auto& b : traj.boundaries)
      bounds.push_back({{"subtask", b.subtask}, {"start", b.start}, {"end", b.end}});
    header["boundaries"] = bounds;
    out << header.dump() << "\n";

    for (size_t t = 0; t < traj.frames.size(); ++t) {
      const Frame& f = traj.frames[t];
      Json line = {{"type", "frame"}, {"t", t}};
      std::vector<double> proprio(f.obs.proprio.data(), f.obs.proprio.data() + 8);
      std::vector<double> action(f.action.data(), f.action.data() + 8);
      line["proprio"] = proprio;
      line["action"] = action;
      line["w"] = f.obs.image.width;
      line["h"] = f.obs.image.height;
      if (image_format == "png") {
        line["image"] = base64_encode(png_encode(f.obs.image));
      } else {
        blob.write(reinterpret_cast<const char*>(f.obs.image.rgb.data()),
                   static_cast<std::streamsize>(f.obs.image.rgb.size()));
        line["image_offset"] = blob_offset;
        line["image_len"] = f.obs.image.rgb.size();
        blob_offset += f.obs.image.rgb.size();
      }
      out << line.dump() << "\n";
    }
  }
}

std::vector<Trajectory> load_trajectories(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ifstream blob;

  std::vector<Trajectory> out;
  std::string line;
  size_t expected = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Json j = Json::parse(line);
    if (j.at("type") == "header") {
      Trajectory traj;
      traj.task.id = j.at("task");
      traj.task.instruction = j.at("instruction");
      traj.task.level = level_from(j.at("level"));
      traj.seed = j.at("seed");
      traj.success = j.at("success");
      traj.plan = j.at("plan").get<std::vector<std::string>>();
      for (const auto& b : j.at("boundaries"))
        traj.boundaries.push_back({b.at("subtask"), b.at("start"), b.at("end")});
      expected = j.at("frames");
      if (j.at("image_format") == "blob" && !blob.is_open()) {
        blob.open(path + ".imgs", std::ios::binary);
        if (!blob) throw std::runtime_error("missing image blob for " + path);
      }
      out.push_back(std::move(traj));
    } else {
      if (out.empty()) throw std::runtime_error("frame line before header in " + path);
      Trajectory& traj = out.back();
      Frame f;
      auto proprio = j.at("proprio").get<std::vector<double>>();
      auto action = j.at("action").get<std::vector<double>>();
      for (int i = 0; i < 8; ++i) {
        f.obs.proprio(i) = proprio[i];
        f.action(i) = action[i];
      }
      if (j.contains("image")) {
        f.obs.image = png_decode(base64_decode(j.at("image").get<std::string>()));
      } else {
        int w = j.at("w"), h = j.at("h");
        f.obs.image = Image(w, h);
        blob.seekg(static_cast<std::streamoff>(j.at("image_offset").get<size_t>()));
        blob.read(reinterpret_cast<char*>(f.obs.image.rgb.data()),
                  static_cast<std::streamsize>(j.at("image_len").get<size_t>()));
      }
      traj.frames.push_back(std::move(f));
      if (traj.frames.size() > expected) throw std::runtime_error("frame overflow in " + path);
    }
  }
  return out;
}

}  // namespace emcot::envsim
