#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "switchsim/eval.hpp"
#include "switchsim/exact.hpp"

using namespace switchsim;
using namespace switchsim::eval;

namespace {

const maze::MazeSpec kOpen{{"...", "...", "..."}, 0.9};

maze::MazeMdp open_grid() { return maze::build_mdp(kOpen); }

Controller fixed_action(int a) {
  return [a](int, Rng&) {
    hier::ActResult r;
    r.action = a;
    return r;
  };
}

maze::Task goal_at(maze::Cell goal, maze::Cell start, int len = 20) { return maze::goal_task(kOpen, goal, {start}, len); }

std::string tmp(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("switchsim_test_" + name)).string();
}

}  // namespace

TEST(Rollout, StartingOnGoalSucceedsImmediately) {
  const auto env = open_grid();
  const auto task = goal_at({1, 1}, {1, 1});
  const auto rec = rollout(env, fixed_action(maze::kUp), task, 0, 20);
  EXPECT_TRUE(rec.success);
  EXPECT_EQ(rec.states.size(), 1u);
  EXPECT_TRUE(rec.actions.empty());
  EXPECT_EQ(rec.total_return, 1.0);
}

TEST(Rollout, ZeroRewardTaskAndLengthCap) {
  const auto env = open_grid();
  maze::Task task;
  task.name = "nothing";
  task.episode_length = 7;
  const auto rec = rollout(env, uniform_controller(maze::kNumActions), task, 3, 7);
  EXPECT_EQ(rec.total_return, 0.0);
  EXPECT_FALSE(rec.success);
  EXPECT_EQ(rec.states.size(), 7u);
  EXPECT_EQ(rec.actions.size(), 6u);
  EXPECT_EQ(rec.subgoals, std::vector<int>(6, -1));
  EXPECT_THROW(rollout(env, fixed_action(0), task, 0, 0), ConfigError);
}

TEST(Rollout, DeterministicGivenSeed) {
  const auto env = open_grid();
  const auto task = goal_at({0, 2}, {2, 0});
  const auto a = rollout(env, uniform_controller(maze::kNumActions), task, 11, 20);
  const auto b = rollout(env, uniform_controller(maze::kNumActions), task, 11, 20);
  EXPECT_EQ(a.states, b.states);
  EXPECT_EQ(a.actions, b.actions);
}

TEST(Rollout, WalksToGoal) {
  const auto env = open_grid();
  const auto task = goal_at({1, 2}, {1, 0});
  const auto rec = rollout(env, fixed_action(maze::kRight), task, 0, 20);
  EXPECT_TRUE(rec.success);
  EXPECT_EQ(rec.states.size(), 3u);
}

TEST(SuccessRate, AlwaysAndNever) {
  const auto env = open_grid();
  const auto task = goal_at({1, 2}, {1, 0});
  const auto yes = success_rate(env, fixed_action(maze::kRight), task, 10, 3);
  EXPECT_EQ(yes.mean, 100.0);
  EXPECT_EQ(yes.sd, 0.0);
  const auto no = success_rate(env, fixed_action(maze::kLeft), task, 10, 3);
  EXPECT_EQ(no.mean, 0.0);
  EXPECT_EQ(no.sd, 0.0);
  maze::Task reward_task;
  EXPECT_THROW(success_rate(env, fixed_action(0), reward_task, 1, 1), ConfigError);
}

TEST(SuccessRate, ExactOptimalPolicyOnMediumMaze) {
  const auto env = maze::build_mdp(maze::medium_maze_spec());
  for (maze::Cell g : {maze::Cell{1, 12}, maze::Cell{1, 1}, maze::Cell{8, 12}}) {
    const int gs = env.map.state(g);
    const auto pi = exact::optimal_goal_policy(env.mdp, gs);
    const auto task = maze::goal_task(maze::medium_maze_spec(), g, {{12, 1}, {11, 2}}, 100);
    const auto dist = maze::shortest_path_lengths(env, gs);
    for (const auto& c : task.start_cells) ASSERT_LT(dist[env.map.state(c)], 100);
    EXPECT_EQ(success_rate(env, table_controller(pi), task, 20, 2).mean, 100.0);
  }
}

TEST(EvaluateTask, ThreadCountDoesNotChangeResults) {
  const auto env = open_grid();
  const auto task = goal_at({0, 2}, {2, 0}, 8);
  const auto a = evaluate_task(env, uniform_controller(maze::kNumActions), task, 25, 3, 5, 1);
  const auto b = evaluate_task(env, uniform_controller(maze::kNumActions), task, 25, 3, 5, 4);
  EXPECT_EQ(a.returns.per_seed, b.returns.per_seed);
  EXPECT_EQ(a.success.per_seed, b.success.per_seed);
  EXPECT_THROW(evaluate_task(env, fixed_action(0), task, 0, 1, 0), ConfigError);
}

TEST(Decomposition, HandTrajectory) {
  RolloutRecord rec;
  rec.states = {0, 1, 2, 3};
  rec.rewards = {0, 0, 5, 1};
  const RewardVector r{(Vector(4) << 0, 0, 5, 1).finished()};
  const auto d = return_decomposition(rec, r);
  EXPECT_EQ(d.pre, 0.0);
  EXPECT_EQ(d.post, 6.0);
  EXPECT_EQ(d.highest_state, 2);
  ASSERT_TRUE(d.arrival.has_value());
  EXPECT_EQ(*d.arrival, 2u);
}

TEST(Decomposition, NeverAndStartOnHighest) {
  const RewardVector r{(Vector(3) << 1, -1, 4).finished()};
  RolloutRecord never;
  never.states = {0, 1, 0};
  never.rewards = {1, -1, 1};
  const auto a = return_decomposition(never, r);
  EXPECT_EQ(a.pre, 1.0);
  EXPECT_EQ(a.post, 0.0);
  EXPECT_FALSE(a.arrival.has_value());
  RolloutRecord start;
  start.states = {2, 1, 2};
  start.rewards = {4, -1, 4};
  const auto b = return_decomposition(start, r);
  EXPECT_EQ(b.pre, 0.0);
  EXPECT_EQ(b.post, 7.0);
}

TEST(SeedStats, MeanAndSampleSd) {
  const auto s = seed_stats({1.0, 2.0, 3.0, 4.0});
  EXPECT_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.sd, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_EQ(seed_stats({7.0}).sd, 0.0);
}

TEST(Iqm, MiddleValues) {
  EXPECT_EQ(iqm({1, 2, 3, 4}), 2.5);
  EXPECT_EQ(iqm({4, 3, 2, 1, 100, -100, 2.5, 2.5}), 2.5);
  EXPECT_EQ(iqm({0.1, 0.1, 0.1}), 0.1);
  EXPECT_THROW(iqm({}), ConfigError);
}

TEST(IqmWithCi, PooledExampleAndConstant) {
  Matrix m(2, 2);
  m << 1, 2, 3, 4;
  const auto rep = iqm_with_ci(m, 500, 0);
  EXPECT_EQ(rep.iqm, 2.5);
  const double c = 0.37;
  const auto flat = iqm_with_ci(Matrix::Constant(3, 5, c), 2000, 1);
  EXPECT_EQ(flat.iqm, c);
  EXPECT_EQ(flat.ci_low, c);
  EXPECT_EQ(flat.ci_high, c);
}

TEST(IqmWithCi, CiContainsPointEstimate) {
  Rng rng(9);
  for (int i = 0; i < 100; ++i) {
    const int tasks = 1 + static_cast<int>(uniform_index(rng, 5));
    const int seeds = 2 + static_cast<int>(uniform_index(rng, 6));
    Matrix m(tasks, seeds);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = standard_normal(rng);
    const auto rep = iqm_with_ci(m, 2000, static_cast<std::uint64_t>(i));
    EXPECT_LE(rep.ci_low, rep.iqm);
    EXPECT_GE(rep.ci_high, rep.iqm);
  }
}

TEST(IqmWithCi, NormalizationAndExclusion) {
  Matrix m(2, 3);
  m << 0, 5, 10, 2, 2, 2;
  const std::vector<TaskBounds> bounds{{0.0, 10.0}, {2.0, 2.0}};
  const auto rep = iqm_with_ci(m, 100, 0, bounds);
  ASSERT_EQ(rep.warnings.size(), 1u);
  EXPECT_NE(rep.warnings[0].find("task 1"), std::string::npos);
  EXPECT_EQ(rep.kept_tasks, std::vector<int>{0});
  EXPECT_EQ(rep.normalized(0, 1), 0.5);
  EXPECT_THROW(iqm_with_ci(m.bottomRows(1), 100, 0, std::vector<TaskBounds>{{2.0, 2.0}}), ConfigError);
  EXPECT_THROW(iqm_with_ci(m.leftCols(1), 100, 0), ConfigError);
}

TEST(TaskBounds, AcrossMethods) {
  Matrix a(2, 2), b(2, 2);
  a << 0, 1, 5, 6;
  b << -1, 0.5, 7, 8;
  const auto t = task_bounds({a, b});
  EXPECT_EQ(t[0].lo, -1.0);
  EXPECT_EQ(t[0].hi, 1.0);
  EXPECT_EQ(t[1].lo, 5.0);
  EXPECT_EQ(t[1].hi, 8.0);
}

TEST(Percentile, Interpolates) {
  EXPECT_EQ(percentile({1, 2, 3, 4, 5}, 50), 3.0);
  EXPECT_EQ(percentile({1, 2}, 25), 1.25);
  EXPECT_EQ(percentile({3}, 97.5), 3.0);
}

TEST(Spearman, RanksAndTies) {
  Vector a(5), b(5);
  a << 1, 2, 3, 4, 5;
  b << 10, 20, 30, 40, 50;
  EXPECT_NEAR(spearman(a, b), 1.0, 1e-15);
  EXPECT_NEAR(spearman(a, -b), -1.0, 1e-15);
  b << 1, 1, 2, 2, 3;
  // Average ranks 0.5,0.5,2.5,2.5,4 against 0..4.
  Vector x(5), y(5);
  x << -2, -1, 0, 1, 2;
  y << -1.5, -1.5, 0.5, 0.5, 2;
  EXPECT_NEAR(spearman(a, b), x.dot(y) / std::sqrt(x.squaredNorm() * y.squaredNorm()), 1e-15);
  EXPECT_EQ(spearman(a, Vector::Ones(5)), 0.0);
}

TEST(Heatmap, RoundTripIsBitExact) {
  const auto env = maze::build_mdp({{"..#", "...", "#.."}, 0.9});
  Rng rng(1);
  Vector v(env.map.n_states());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = standard_normal(rng) * 1e3;
  v[0] = 1.0 / 3.0;
  const std::string path = tmp("heat.csv");
  export_heatmap(v, env.map, path);
  const Vector back = read_heatmap(path, env.map);
  EXPECT_EQ(std::memcmp(back.data(), v.data(), sizeof(double) * v.size()), 0);
  std::filesystem::remove(path);
}

TEST(Heatmap, ConstantFieldAndValueIteration) {
  const auto env = open_grid();
  const std::string path = tmp("const.csv");
  export_heatmap(Vector::Constant(9, 2.5), env.map, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "row,col,value");
  int rows = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(line.substr(line.rfind(',') + 1), "2.5");
    ++rows;
  }
  EXPECT_EQ(rows, 9);
  const auto vi = exact::value_iteration(env.mdp, indicator_reward(env.mdp, 4));
  export_heatmap(vi.values, env.map, path);
  EXPECT_EQ(read_heatmap(path, env.map), vi.values);
  std::filesystem::remove(path);
  EXPECT_THROW(export_heatmap(Vector::Zero(3), env.map, path), DimensionError);
}

TEST(SubgoalTrace, Format) {
  RolloutRecord rec;
  rec.states = {0, 1, 2};
  rec.actions = {4, 4};
  rec.subgoals = {2, -1};
  const std::string path = tmp("trace.csv");
  write_subgoal_trace(path, rec);
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), "t,s,w,a\n0,0,2,4\n1,1,-1,4\n");
  std::filesystem::remove(path);
}
