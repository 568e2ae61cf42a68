#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "emcot/envsim.hpp"

#include <cstdio>
#include <filesystem>

using namespace emcot;
using namespace emcot::envsim;

namespace {
Env make_env() { return Env(EnvConfig{}); }
}  // namespace

TEST_CASE("reset is deterministic and validates task ids") {
  Env env = make_env();
  TaskSpec task = env.make_task("stack_two", Level::kEasy);
  Observation a = env.observe(env.reset(task, 7));
  Observation b = env.observe(env.reset(task, 7));
  CHECK(a.image == b.image);
  CHECK(a.proprio == b.proprio);

  Observation c = env.observe(env.reset(task, 8));
  CHECK(a.image.rgb != c.image.rgb);

  TaskSpec bogus;
  bogus.id = "no_such_task";
  CHECK_THROWS_AS(env.reset(bogus, 0), std::invalid_argument);
  CHECK_THROWS_AS(env.make_task("no_such_task", Level::kEasy), std::invalid_argument);
}

TEST_CASE("easy has only task objects, hard adds distractors and shifts background") {
  Env env = make_env();
  TaskSpec easy = env.make_task("stack_two", Level::kEasy);
  WorldState se = env.reset(easy, 3);
  CHECK(se.objects.size() == 2);
  for (const auto& o : se.objects) CHECK_FALSE(o.distractor);

  TaskSpec hard = env.make_task("stack_two", Level::kHard);
  WorldState sh = env.reset(hard, 3);
  int distractors = 0;
  for (const auto& o : sh.objects) distractors += o.distractor ? 1 : 0;
  CHECK(distractors >= 1);

  // Background statistics differ between levels.
  Image ie = env.observe(se).image, ih = env.observe(sh).image;
  double diff = 0;
  for (size_t i = 0; i < ie.rgb.size(); ++i)
    diff += std::abs(static_cast<int>(ie.rgb[i]) - static_cast<int>(ih.rgb[i]));
  CHECK(diff / ie.rgb.size() > 0.0);
}

TEST_CASE("step mechanics") {
  Env env = make_env();
  TaskSpec task = env.make_task("stack_two", Level::kEasy);
  WorldState s = env.reset(task, 1);

  SUBCASE("zero action changes only the step counter") {
    Vec8 a = Vec8::Zero();
    a(3) = s.arms[0].grip;
    a(7) = s.arms[1].grip;
    auto r = env.step(task, s, a);
    CHECK(r.state.step == s.step + 1);
    CHECK(r.state.arms[0].ee == s.arms[0].ee);
    CHECK(r.state.arms[1].ee == s.arms[1].ee);
    for (size_t i = 0; i < s.objects.size(); ++i) {
      CHECK(r.state.objects[i].x == s.objects[i].x);
      CHECK(r.state.objects[i].y == s.objects[i].y);
    }
  }

  SUBCASE("closing far from any object attaches nothing") {
    Vec8 a = Vec8::Zero();
    a(3) = 0.0;  // close left gripper at the staging corner
    a(7) = s.arms[1].grip;
    auto r = env.step(task, s, a);
    CHECK(r.state.arms[0].held == -1);
  }

  SUBCASE("NaN action is rejected") {
    Vec8 a = Vec8::Zero();
    a(0) = std::nan("");
    CHECK_THROWS_AS(env.step(task, s, a), std::invalid_argument);
  }

  SUBCASE("displacement per frame is speed limited") {
    Vec8 a = Vec8::Zero();
    a.segment<3>(0) = Eigen::Vector3d(5, 5, 0);
    a(3) = 1.0;
    a(7) = 1.0;
    auto r = env.step(task, s, a);
    CHECK((r.state.arms[0].ee - s.arms[0].ee).norm() <=
          env.config().max_speed + 1e-12);
  }
}

TEST_CASE("scripted expert succeeds across the task suite") {
  Env env = make_env();
  int total = 0, ok = 0;
  for (const auto& id : Env::task_ids()) {
    for (auto level : {Level::kEasy, Level::kHard}) {
      for (uint64_t seed = 0; seed < 4; ++seed) {
        ++total;
        auto res = collect_trajectory(env, env.make_task(id, level), seed);
        if (res.trajectory) {
          ++ok;
          const Trajectory& t = *res.trajectory;
          CHECK(t.success);
          CHECK(t.frames.size() >= 2);
          CHECK(t.frames.size() <= static_cast<size_t>(env.config().step_limit) + 1);
          // Boundaries cover [0, T-1] without gaps.
          CHECK(t.boundaries.front().start == 0);
          CHECK(t.boundaries.back().end == static_cast<int>(t.frames.size()) - 1);
          for (size_t i = 1; i < t.boundaries.size(); ++i)
            CHECK(t.boundaries[i].start == t.boundaries[i - 1].end + 1);
        }
      }
    }
  }
  CHECK(ok >= total * 95 / 100);
  CHECK(ok == total);  // at desk scale the controller should be exact
}

TEST_CASE("handover boundaries put the left grasp before the right grasp") {
  Env env = make_env();
  auto res = collect_trajectory(env, env.make_task("handover_block", Level::kEasy), 2);
  REQUIRE(res.trajectory);
  const auto& bounds = res.trajectory->boundaries;
  REQUIRE(bounds.size() == 3);
  CHECK(bounds[0].subtask.find("left arm") != std::string::npos);
  CHECK(bounds[2].subtask.find("right arm") != std::string::npos);
  CHECK(bounds[0].end < bounds[2].start);
}

TEST_CASE("held object tracks the end effector") {
  Env env = make_env();
  TaskSpec task = env.make_task("stack_two", Level::kEasy);
  auto res = collect_trajectory(env, task, 5);
  REQUIRE(res.trajectory);
  // Re-run the rollout, checking the invariant at each step.
  WorldState s = env.reset(task, 5);
  for (const auto& f : res.trajectory->frames) {
    auto r = env.step(task, s, f.action);
    s = r.state;
    for (int a = 0; a < 2; ++a) {
      if (s.arms[a].held >= 0) {
        const Object& o = s.objects[s.arms[a].held];
        CHECK(o.x == s.arms[a].ee.x());
        CHECK(o.y == s.arms[a].ee.y());
        CHECK(o.height == s.arms[a].ee.z());
      }
    }
    if (r.done) break;
  }
}

TEST_CASE("expert emits idle holds of the configured length") {
  Env env = make_env();
  auto res = collect_trajectory(env, env.make_task("stack_two", Level::kEasy), 11);
  REQUIRE(res.trajectory);
  // Count maximal runs of all-zero movement actions; every interior hold
  // should be at least hold_frames long.
  const auto& frames = res.trajectory->frames;
  int zero_run = 0;
  bool seen_motion = false;
  std::vector<int> interior_runs;
  for (size_t t = 0; t + 1 < frames.size(); ++t) {
    bool idle = frames[t].action.segment<3>(0).norm() < 1e-12 &&
                frames[t].action.segment<3>(4).norm() < 1e-12;
    // Gripper actuation counts as activity.
    idle = idle && std::abs(frames[t].action(3) - frames[t].obs.proprio(3)) < 1e-12 &&
           std::abs(frames[t].action(7) - frames[t].obs.proprio(7)) < 1e-12;
    if (idle) {
      ++zero_run;
    } else {
      if (seen_motion && zero_run > 0) interior_runs.push_back(zero_run);
      zero_run = 0;
      seen_motion = true;
    }
  }
  REQUIRE(!interior_runs.empty());
  for (int run : interior_runs) CHECK(run >= env.config().hold_frames);
}

TEST_CASE("trajectory files round trip in both image formats") {
  Env env = make_env();
  std::vector<Trajectory> trajs;
  for (uint64_t seed : {0, 1})
    trajs.push_back(*collect_trajectory(env, env.make_task("place_a2b", Level::kEasy), seed)
                         .trajectory);

  for (const std::string fmt : {"png", "blob"}) {
    std::string path = "test_traj_" + fmt + ".jsonl";
    save_trajectories(path, trajs, "deadbeef00000000", fmt);
    auto back = load_trajectories(path);
    REQUIRE(back.size() == trajs.size());
    for (size_t i = 0; i < trajs.size(); ++i) {
      CHECK(back[i].task.id == trajs[i].task.id);
      CHECK(back[i].frames.size() == trajs[i].frames.size());
      CHECK(back[i].boundaries.size() == trajs[i].boundaries.size());
      for (size_t t = 0; t < trajs[i].frames.size(); ++t) {
        CHECK(back[i].frames[t].obs.image == trajs[i].frames[t].obs.image);
        CHECK(back[i].frames[t].obs.proprio == trajs[i].frames[t].obs.proprio);
        CHECK(back[i].frames[t].action == trajs[i].frames[t].action);
      }
    }
    // Byte-identical re-save.
    std::string again = path + ".again";
    save_trajectories(again, trajs, "deadbeef00000000", fmt);
    CHECK(read_file(path) == read_file(again));
    for (const auto& p : {path, again, path + ".imgs", again + ".imgs"})
      std::filesystem::remove(p);
  }
}
