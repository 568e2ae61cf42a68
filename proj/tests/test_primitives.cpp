#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "emcot/envsim.hpp"
#include "emcot/primitives.hpp"
#include "emcot/util.hpp"

using namespace emcot;
using namespace emcot::primitives;
using Eigen::Vector3d;

namespace {

// Build a two-arm track set where arm 1 is parked, from per-frame
// (position, grip) samples for arm 0.
std::array<ArmTrack, 2> one_arm(const std::vector<Vector3d>& pos,
                                const std::vector<double>& grip) {
  std::array<ArmTrack, 2> arms;
  arms[0].pos = pos;
  arms[0].grip = grip;
  arms[1].pos.assign(pos.size(), Vector3d(9, 9, 2));
  arms[1].grip.assign(pos.size(), 1.0);
  return arms;
}

std::string cell(const LabelTable& t, int frame, int arm = 0) {
  const auto& lab = t[frame][arm];
  if (lab.kind == Kind::kMove) return "move:" + lab.direction;
  return kind_name(lab.kind);
}

Thresholds defaults() { return Thresholds{}; }

}  // namespace

TEST_CASE("is_idle clauses and boundaries") {
  Thresholds th = defaults();
  Vector3d p0(1, 1, 1);
  CHECK(is_idle(p0, p0, 0.5, 0.5, th));
  CHECK_FALSE(is_idle(p0 + Vector3d(2 * th.vel, 0, 0), p0, 0.5, 0.5, th));
  // Equality fails the strict '<' test on the gripper clause (exactly
  // representable values so the boundary is hit bit-for-bit).
  th.dg = 0.25;
  CHECK_FALSE(is_idle(p0, p0, 0.75, 0.5, th));
  CHECK(is_idle(p0, p0, 0.6875, 0.5, th));
  CHECK_THROWS_AS(is_idle(Vector3d(std::nan(""), 0, 0), p0, 0.5, 0.5, th),
                  std::invalid_argument);
}

TEST_CASE("segment_actions run rules") {
  auto I = false, M = true;  // flags are idle flags; invert for readability
  (void)I;
  (void)M;
  // flags = I I M M M I I I I M M, min_idle = 3
  std::vector<bool> f1 = {true, true, false, false, false, true, true, true, true, false, false};
  auto s1 = segment_actions(f1, 3);
  REQUIRE(s1.size() == 2);
  CHECK(s1[0] == std::pair{2, 4});
  CHECK(s1[1] == std::pair{9, 10});

  // flags = I M I M I, min_idle = 2 -> single absorbed segment
  std::vector<bool> f2 = {true, false, true, false, true};
  auto s2 = segment_actions(f2, 2);
  REQUIRE(s2.size() == 1);
  CHECK(s2[0] == std::pair{1, 3});

  CHECK(segment_actions({true, true, true}, 3).empty());
  CHECK_THROWS(segment_actions({}, 3));
}

TEST_CASE("get_direction vocabulary") {
  Thresholds th = defaults();
  th.dir = 0.8;
  CHECK(get_direction(Vector3d(1, 0, 0), th) == "forward");
  CHECK(get_direction(Vector3d(1, 0.9, 0), th) == "forward-left");
  CHECK(get_direction(Vector3d(0, 0, 0), th) == "stationary");
  CHECK(get_direction(Vector3d(-1, 0, 0), th) == "backward");
  CHECK(get_direction(Vector3d(0, -1, 0), th) == "right");
  CHECK(get_direction(Vector3d(0, 0, 1), th) == "up");
  CHECK(get_direction(Vector3d(0, 0, -0.5), th) == "down");
  CHECK(get_direction(Vector3d(1, 1, 1), th) == "forward-left-up");
}

// --- Frozen corpus: every expected cell below was produced by executing the
// --- labeling rules by hand on the stated trace before implementation.

TEST_CASE("trace 1: documented synthetic trace (still, +x run, grasp, still)") {
  Thresholds th = defaults();
  th.dg = 0.3;
  std::vector<Vector3d> pos;
  std::vector<double> grip;
  for (int t = 0; t <= 4; ++t) pos.emplace_back(0, 0, 0), grip.push_back(1.0);
  for (int t = 5; t <= 10; ++t)
    pos.emplace_back(0.5 * (t - 4), 0, 0), grip.push_back(1.0);
  pos.emplace_back(3.0, 0, 0), grip.push_back(0.0);                       // t = 11
  for (int t = 12; t <= 14; ++t) pos.emplace_back(3.0, 0, 0), grip.push_back(0.0);

  auto labels = extract_primitives(one_arm(pos, grip), th);
  for (int t = 0; t <= 4; ++t) CHECK(cell(labels, t) == "idle");
  for (int t = 5; t <= 10; ++t) CHECK(cell(labels, t) == "move:forward");
  CHECK(cell(labels, 11) == "grasp");
  for (int t = 12; t <= 14; ++t) CHECK(cell(labels, t) == "idle");
}

TEST_CASE("trace 2: constant pose and gripper is all idle") {
  std::vector<Vector3d> pos(8, Vector3d(2, 2, 2));
  std::vector<double> grip(8, 0.7);
  auto labels = extract_primitives(one_arm(pos, grip), defaults());
  for (int t = 0; t < 8; ++t) {
    CHECK(cell(labels, t) == "idle");
    CHECK(labels[t][0].direction.empty());
  }
}

TEST_CASE("trace 3: two motion runs separated by a long idle") {
  // idle 0-1, +x at 2-4, idle 5-8, +x at 9-10
  std::vector<Vector3d> pos = {{0, 0, 0}, {0, 0, 0}, {0.5, 0, 0}, {1, 0, 0}, {1.5, 0, 0},
                               {1.5, 0, 0}, {1.5, 0, 0}, {1.5, 0, 0}, {1.5, 0, 0},
                               {2, 0, 0}, {2.5, 0, 0}};
  std::vector<double> grip(11, 1.0);
  auto labels = extract_primitives(one_arm(pos, grip), defaults());
  std::vector<std::string> expected = {"idle", "idle", "move:forward", "move:forward",
                                       "move:forward", "idle", "idle", "idle", "idle",
                                       "move:forward", "move:forward"};
  for (int t = 0; t < 11; ++t) CHECK(cell(labels, t) == expected[t]);
}

TEST_CASE("trace 4: short interior idle is absorbed but stays idle-labeled") {
  Thresholds th = defaults();
  th.min_idle = 2;
  // I M I M I: +x at 1, pause at 2, +y at 3
  std::vector<Vector3d> pos = {{0, 0, 0}, {0.5, 0, 0}, {0.5, 0, 0}, {0.5, 0.5, 0}, {0.5, 0.5, 0}};
  std::vector<double> grip(5, 1.0);
  auto labels = extract_primitives(one_arm(pos, grip), th);
  CHECK(cell(labels, 0) == "idle");
  CHECK(cell(labels, 1) == "move:forward");
  CHECK(cell(labels, 2) == "idle");
  CHECK(cell(labels, 3) == "move:left");
  CHECK(cell(labels, 4) == "idle");
}

TEST_CASE("trace 5: grasp and release inside one segment; negation swaps them") {
  std::vector<Vector3d> pos = {{0, 0, 0}, {0.5, 0, 0}, {1, 0, 0}, {1, 0, 0},
                               {1.5, 0, 0}, {2, 0, 0}, {2, 0, 0}, {1.5, 0, 0}, {1, 0, 0}};
  std::vector<double> grip = {1, 1, 1, 0, 0, 0, 1, 1, 1};
  auto labels = extract_primitives(one_arm(pos, grip), defaults());
  std::vector<std::string> expected = {"idle", "move:forward", "move:forward", "grasp",
                                       "move:forward", "move:forward", "release",
                                       "move:backward", "move:backward"};
  for (int t = 0; t < 9; ++t) CHECK(cell(labels, t) == expected[t]);

  // Negated gripper trace: grasp <-> release, everything else equal.
  std::vector<double> neg;
  for (double g : grip) neg.push_back(1.0 - g);
  auto swapped = extract_primitives(one_arm(pos, neg), defaults());
  for (int t = 0; t < 9; ++t) {
    Kind k = labels[t][0].kind, s = swapped[t][0].kind;
    if (k == Kind::kGrasp) CHECK(s == Kind::kRelease);
    else if (k == Kind::kRelease) CHECK(s == Kind::kGrasp);
    else {
      CHECK(s == k);
      CHECK(swapped[t][0].direction == labels[t][0].direction);
    }
  }
}

TEST_CASE("trace 6: diagonal net displacement yields a compound direction") {
  std::vector<Vector3d> pos = {{0, 0, 0}, {0.5, 0.45, 0}, {1.0, 0.9, 0}, {1.0, 0.9, 0},
                               {1.0, 0.9, 0}, {1.0, 0.9, 0}};
  std::vector<double> grip(6, 1.0);
  auto labels = extract_primitives(one_arm(pos, grip), defaults());
  CHECK(cell(labels, 1) == "move:forward-left");
  CHECK(cell(labels, 2) == "move:forward-left");
}

TEST_CASE("trace 7: displacement exactly at the velocity threshold is motion") {
  std::vector<Vector3d> pos = {{0, 0, 0}, {0, 0, 0}, {0.1, 0, 0}, {0.1, 0, 0}, {0.1, 0, 0},
                               {0.1, 0, 0}};
  std::vector<double> grip(6, 1.0);
  auto labels = extract_primitives(one_arm(pos, grip), defaults());
  CHECK(cell(labels, 2) == "move:forward");
  for (int t : {0, 1, 3, 4, 5}) CHECK(cell(labels, t) == "idle");
}

TEST_CASE("trace 8: sub-threshold drift never leaves idle") {
  std::vector<Vector3d> pos;
  std::vector<double> grip;
  for (int t = 0; t < 10; ++t) pos.emplace_back(0.05 * t, 0, 0), grip.push_back(0.3);
  auto labels = extract_primitives(one_arm(pos, grip), defaults());
  for (int t = 0; t < 10; ++t) CHECK(cell(labels, t) == "idle");
}

TEST_CASE("trace 9: gripper change exactly at the threshold is a grasp") {
  Thresholds th = defaults();
  th.dg = 0.25;  // exactly representable so the boundary is exact
  std::vector<Vector3d> pos(7, Vector3d(1, 1, 1));
  std::vector<double> grip = {1, 1, 1, 0.75, 0.75, 0.75, 0.75};
  auto labels = extract_primitives(one_arm(pos, grip), th);
  CHECK(cell(labels, 3) == "grasp");
  for (int t : {0, 1, 2, 4, 5, 6}) CHECK(cell(labels, t) == "idle");
}

TEST_CASE("trace 10: arms are labeled independently") {
  std::array<ArmTrack, 2> arms;
  // arm 0: +x at 1-3, then parked
  arms[0].pos = {{0, 0, 0}, {0.5, 0, 0}, {1, 0, 0}, {1.5, 0, 0}, {1.5, 0, 0}, {1.5, 0, 0},
                 {1.5, 0, 0}};
  arms[0].grip.assign(7, 1.0);
  // arm 1: grasp at 2, pause at 3 (absorbed), -y at 4-5
  arms[1].pos = {{5, 5, 0}, {5, 5, 0}, {5, 5, 0}, {5, 5, 0}, {5, 4.5, 0}, {5, 4, 0}, {5, 4, 0}};
  arms[1].grip = {1, 1, 0, 0, 0, 0, 0};
  auto labels = extract_primitives(arms, defaults());
  CHECK(cell(labels, 1, 0) == "move:forward");
  CHECK(cell(labels, 3, 0) == "move:forward");
  CHECK(cell(labels, 4, 0) == "idle");
  CHECK(cell(labels, 2, 1) == "grasp");
  CHECK(cell(labels, 3, 1) == "idle");
  CHECK(cell(labels, 4, 1) == "move:right");
  CHECK(cell(labels, 5, 1) == "move:right");
}

TEST_CASE("literal idle-subsegment flag reproduces the printed pseudocode") {
  Thresholds th = defaults();
  th.min_idle = 2;
  th.literal_idle_subsegments = true;
  // Same trace as trace 4: the absorbed interior idle frame becomes the move.
  std::vector<Vector3d> pos = {{0, 0, 0}, {0.5, 0, 0}, {0.5, 0, 0}, {0.5, 0.5, 0}, {0.5, 0.5, 0}};
  std::vector<double> grip(5, 1.0);
  auto labels = extract_primitives(one_arm(pos, grip), th);
  CHECK(labels[2][0].kind == Kind::kMove);
  CHECK(labels[2][0].direction == "stationary");  // idle subsegment has no net motion
  CHECK(labels[1][0].kind == Kind::kIdle);
}

TEST_CASE("threshold monotonicity: raising vel never reduces idle count") {
  Rng rng = make_rng(77);
  std::normal_distribution<double> nd(0.0, 0.3);
  std::vector<Vector3d> pos = {{5, 5, 1}};
  for (int t = 1; t < 60; ++t)
    pos.push_back(pos.back() + Vector3d(nd(rng), nd(rng), nd(rng) * 0.2));
  std::vector<double> grip(60, 1.0);

  int prev_idle = -1;
  for (double vel : {0.05, 0.1, 0.2, 0.4, 0.8, 1.6}) {
    Thresholds th = defaults();
    th.vel = vel;
    auto labels = extract_primitives(one_arm(pos, grip), th);
    int idle = 0;
    for (const auto& row : labels) idle += row[0].kind == Kind::kIdle ? 1 : 0;
    CHECK(idle >= prev_idle);
    prev_idle = idle;
  }
}

TEST_CASE("every cell of an expert trajectory carries exactly one kind") {
  envsim::Env env{envsim::EnvConfig{}};
  auto res =
      envsim::collect_trajectory(env, env.make_task("stack_two", envsim::Level::kEasy), 4);
  REQUIRE(res.trajectory);
  auto labels = extract_primitives(*res.trajectory, defaults());
  CHECK(labels.size() == res.trajectory->frames.size());
  bool saw_grasp = false, saw_move = false;
  for (const auto& row : labels)
    for (int a = 0; a < 2; ++a) {
      const auto& lab = row[a];
      CHECK((lab.kind == Kind::kMove) == !lab.direction.empty());
      CHECK(!lab.sentence.empty());
      saw_grasp = saw_grasp || lab.kind == Kind::kGrasp;
      saw_move = saw_move || lab.kind == Kind::kMove;
    }
  CHECK(saw_grasp);
  CHECK(saw_move);
}
