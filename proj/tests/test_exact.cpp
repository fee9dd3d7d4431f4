#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "switchsim/exact.hpp"
#include "switchsim/maze.hpp"

using namespace switchsim;
using namespace switchsim::exact;

namespace {

constexpr int kGo = 0;
constexpr int kStay = 1;

// Two states; "go" swaps them, "stay" keeps the state.
Mdp two_cycle(double gamma = 0.5) {
  Mdp m = Mdp::zeros(2, 2, gamma);
  m.transitions[kGo](0, 1) = m.transitions[kGo](1, 0) = 1.0;
  m.transitions[kStay](0, 0) = m.transitions[kStay](1, 1) = 1.0;
  return m;
}

// "go" moves 0 -> 1, state 1 is absorbing under both actions.
Mdp two_chain(double gamma = 0.5) {
  Mdp m = Mdp::zeros(2, 2, gamma);
  m.transitions[kGo](0, 1) = m.transitions[kGo](1, 1) = 1.0;
  m.transitions[kStay](0, 0) = m.transitions[kStay](1, 1) = 1.0;
  return m;
}

PolicyTable always(int a, int n = 2) { return PolicyTable::deterministic(std::vector<int>(n, a), 2); }

struct Instance {
  Mdp mdp;
  PolicyTable pi_w, pi;
  RewardVector r;
};

Instance random_instance(Rng& rng) {
  const int n = 2 + static_cast<int>(uniform_index(rng, 11));
  const int na = 1 + static_cast<int>(uniform_index(rng, 3));
  const double gamma = uniform_index(rng, 2) ? 0.9 : 0.95;
  Instance inst{random_mdp(n, na, gamma, rng), random_policy(n, na, rng), random_policy(n, na, rng),
                RewardVector{Vector::Random(n)}};
  for (int s = 0; s < n; ++s) inst.r.values[s] = 2.0 * uniform01(rng) - 1.0;
  return inst;
}

}  // namespace

TEST(SuccessorMeasure, AbsorbingState) {
  Mdp m = Mdp::zeros(1, 1, 0.5);
  m.transitions[0](0, 0) = 1.0;
  EXPECT_DOUBLE_EQ(successor_measure(m, PolicyTable::uniform(1, 1)).m(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(state_action_successor(m, PolicyTable::uniform(1, 1)).by_action[0](0, 0), 2.0);
}

TEST(SuccessorMeasure, TwoCycle) {
  const auto sm = successor_measure(two_cycle(), always(kGo));
  EXPECT_NEAR(sm.m(0, 0), 4.0 / 3.0, 1e-15);
  EXPECT_NEAR(sm.m(0, 1), 2.0 / 3.0, 1e-15);
}

TEST(SuccessorMeasure, InvariantsOnRandomMdps) {
  Rng rng(11);
  for (int i = 0; i < 30; ++i) {
    const auto inst = random_instance(rng);
    const auto sm = successor_measure(inst.mdp, inst.pi);
    const double total = 1.0 / (1.0 - inst.mdp.discount);
    const Matrix p = policy_transition_matrix(inst.mdp, inst.pi);
    const Matrix eye = Matrix::Identity(sm.m.rows(), sm.m.cols());
    EXPECT_LE((sm.m - (eye + inst.mdp.discount * p * sm.m)).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LE((sm.m.rowwise().sum().array() - total).abs().maxCoeff(), 1e-9);
    EXPECT_GE(sm.m.minCoeff(), 0.0);
    EXPECT_GE(sm.m.diagonal().minCoeff(), 1.0 - 1e-12);
  }
}

TEST(StateActionSuccessor, MarginalizesToStateMeasure) {
  Rng rng(5);
  const Mdp m = random_mdp(6, 3, 0.9, rng);
  const PolicyTable pi = random_policy(6, 3, rng);
  const auto sa = state_action_successor(m, pi);
  Matrix marg = Matrix::Zero(6, 6);
  for (int a = 0; a < 3; ++a) marg += pi.probs.col(a).asDiagonal() * sa.by_action[a];
  EXPECT_LE((marg - successor_measure(m, pi).m).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(StateActionSuccessor, OneStepUnroll) {
  const Mdp m = two_chain();
  const auto sa = state_action_successor(m, always(kGo));
  const auto sm = successor_measure(m, always(kGo));
  EXPECT_DOUBLE_EQ(sa.by_action[kGo](0, 1), 0.5 * sm.m(1, 1));
}

TEST(ValueOf, IndicatorConstantAndLinearity) {
  Rng rng(2);
  const Mdp m = random_mdp(5, 2, 0.9, rng);
  const auto sm = successor_measure(m, random_policy(5, 2, rng));
  const Vector v = value_of(sm, indicator_reward(m, 3));
  EXPECT_EQ(v, sm.m.col(3));
  const Vector c = value_of(sm, RewardVector{Vector::Constant(5, 2.0)});
  EXPECT_LE((c.array() - 2.0 / (1.0 - 0.9)).abs().maxCoeff(), 1e-9);
  const RewardVector r1{Vector::Random(5)}, r2{Vector::Random(5)};
  EXPECT_LE((value_of(sm, RewardVector{r1.values + r2.values}) - value_of(sm, r1) - value_of(sm, r2)).cwiseAbs().maxCoeff(),
            1e-12);
}

TEST(ValueIteration, ZeroRewardAndChain) {
  const Mdp m = two_chain();
  const auto z = value_iteration(m, RewardVector{Vector::Zero(2)});
  EXPECT_EQ(z.values, Vector::Zero(2));
  const auto vi = value_iteration(m, indicator_reward(m, 1));
  EXPECT_NEAR(vi.values[1], 2.0, 1e-9);
  EXPECT_NEAR(vi.values[0], 1.0, 1e-9);
  EXPECT_EQ(vi.policy.probs(0, kGo), 1.0);
}

TEST(ValueIteration, BellmanResidualAndScaleInvariance) {
  Rng rng(4);
  const Mdp m = random_mdp(7, 3, 0.95, rng);
  RewardVector r{Vector::Random(7)};
  const auto vi = value_iteration(m, r);
  const Vector backup = action_values(m, r, vi.values).rowwise().maxCoeff();
  EXPECT_LE((backup - vi.values).lpNorm<Eigen::Infinity>(), kValueIterationTol / (1.0 - 0.95));
  const auto scaled = value_iteration(m, RewardVector{3.0 * r.values});
  EXPECT_EQ(scaled.policy.probs, vi.policy.probs);
}

TEST(OptimalGoalPolicy, StayAtGoalAndMonotoneOnOpenGrid) {
  maze::MazeSpec spec{{"...", "...", "..."}, 0.9};
  const auto env = maze::build_mdp(spec);
  const int w = env.map.state({0, 0});
  const PolicyTable pi = optimal_goal_policy(env.mdp, w);
  EXPECT_EQ(pi.probs(w, maze::kStay), 1.0);
  for (int s = 0; s < 9; ++s) {
    if (s == w) continue;
    int a = 0;
    pi.probs.row(s).maxCoeff(&a);
    const int t = maze::step(env, s, a);
    const auto c0 = env.map.cell(s), c1 = env.map.cell(t);
    EXPECT_EQ(c1.row + c1.col, c0.row + c0.col - 1) << "state " << s;
  }
}

TEST(OptimalGoalPolicy, UnreachableGoalHasZeroValue) {
  maze::MazeSpec spec{{"..#.."}, 0.9};
  const auto env = maze::build_mdp(spec);
  const int w = env.map.state({0, 4});
  const auto vi = value_iteration(env.mdp, indicator_reward(env.mdp, w));
  EXPECT_EQ(vi.values[env.map.state({0, 0})], 0.0);
  EXPECT_EQ(vi.values[env.map.state({0, 1})], 0.0);
  optimal_goal_policy(env.mdp, w);
}

TEST(HittingDiscount, ChainAndUnreachable) {
  const Mdp m = two_chain();
  const Vector h = hitting_discount(m, always(kGo), 1);
  EXPECT_DOUBLE_EQ(h[1], 1.0);
  EXPECT_DOUBLE_EQ(h[0], 0.5);
  const auto sm = successor_measure(m, always(kGo));
  EXPECT_NEAR(h[0], sm.m(0, 1) / sm.m(1, 1), 1e-15);
  const Vector h0 = hitting_discount(m, always(kGo), 0);
  EXPECT_DOUBLE_EQ(h0[0], 1.0);
  EXPECT_DOUBLE_EQ(h0[1], 0.0);
}

TEST(HittingDiscount, RatioIdentityOnRandomMdps) {
  Rng rng(21);
  for (int i = 0; i < 20; ++i) {
    const auto inst = random_instance(rng);
    const auto sm = successor_measure(inst.mdp, inst.pi);
    for (int w = 0; w < inst.mdp.n_states; ++w) {
      const Vector h = hitting_discount(inst.mdp, inst.pi, w);
      EXPECT_EQ(h[w], 1.0);
      EXPECT_LE((h * sm.m(w, w) - sm.m.col(w)).cwiseAbs().maxCoeff(), 1e-10);
    }
  }
}

TEST(TruncatedSuccessor, EdgeCasesAndTail) {
  Rng rng(8);
  const Mdp m = random_mdp(5, 2, 0.9, rng);
  const PolicyTable pi = random_policy(5, 2, rng);
  EXPECT_EQ(truncated_successor(m, pi, 0), Matrix::Zero(5, 5));
  EXPECT_EQ(truncated_successor(m, pi, 1), Matrix::Identity(5, 5));
  const Matrix diff = successor_measure(m, pi).m - truncated_successor(m, pi, 200);
  EXPECT_LE(diff.cwiseAbs().maxCoeff(), std::pow(0.9, 200) / (1.0 - 0.9) + 1e-12);
}

TEST(KStepSwitching, ReductionsAndChain) {
  Rng rng(9);
  const Mdp m = random_mdp(6, 3, 0.95, rng);
  const PolicyTable pi = random_policy(6, 3, rng), pw = random_policy(6, 3, rng);
  const Matrix mp = successor_measure(m, pi).m;
  EXPECT_LE((k_step_switching_measure(m, pi, pi, 7) - mp).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE((k_step_switching_measure(m, pw, pi, 0) - mp).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE(k_step_advantage(m, pi, pi, 4, RewardVector{Vector::Ones(6)}).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_EQ(k_step_advantage(m, pw, pi, 0, RewardVector{Vector::Ones(6)}).cwiseAbs().maxCoeff(), 0.0);

  const Mdp c = two_chain();
  const Matrix ks = k_step_switching_measure(c, always(kGo), always(kStay), 1);
  EXPECT_NEAR(ks(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(ks(0, 1), 1.0, 1e-15);
  const Vector a = k_step_advantage(c, always(kGo), always(kStay), 1, indicator_reward(c, 1));
  EXPECT_NEAR(a[0], 1.0, 1e-15);
}

TEST(SwitchingFormula, TwoCycleHandValue) {
  const Mdp m = two_cycle();
  const auto mpw = successor_measure(m, always(kGo));
  const auto mp = successor_measure(m, always(kStay));
  const auto f = switching_measure_formula(mpw, mp, 1);
  EXPECT_NEAR(f.measure(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(f.measure(0, 1), 1.0, 1e-15);
  EXPECT_EQ(f.measure.row(1), mp.m.row(1));
  EXPECT_NEAR(f.hit_discount[0], 0.5, 1e-15);
  const auto o = switching_measure_oracle(m, always(kGo), always(kStay), 1);
  EXPECT_NEAR(o.measure(0, 0), 1.0, 1e-14);
  EXPECT_NEAR(o.measure(0, 1), 1.0, 1e-14);
}

TEST(SwitchingFormula, SamePolicyAndSubgoalRow) {
  Rng rng(12);
  const auto inst = random_instance(rng);
  const auto mp = successor_measure(inst.mdp, inst.pi);
  const auto mpw = successor_measure(inst.mdp, inst.pi_w);
  for (int w = 0; w < inst.mdp.n_states; ++w) {
    EXPECT_LE((switching_measure_formula(mp, mp, w).measure - mp.m).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE((switching_measure_oracle(inst.mdp, inst.pi, inst.pi, w).measure - mp.m).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_EQ(switching_measure_formula(mpw, mp, w).measure.row(w), mp.m.row(w));
  }
}

TEST(SwitchingFormula, MatchesOracleOnRandomMdps) {
  Rng rng(13);
  double worst = 0.0;
  for (int i = 0; i < 40; ++i) {
    const auto inst = random_instance(rng);
    const auto mp = successor_measure(inst.mdp, inst.pi);
    const auto mpw = successor_measure(inst.mdp, inst.pi_w);
    for (int w = 0; w < inst.mdp.n_states; ++w) {
      const auto f = switching_measure_formula(mpw, mp, w);
      const auto o = switching_measure_oracle(inst.mdp, inst.pi_w, inst.pi, w);
      worst = std::max(worst, (f.measure - o.measure).cwiseAbs().maxCoeff());
      EXPECT_LE((f.hit_discount - o.hit_discount).cwiseAbs().maxCoeff(), 1e-8);
      EXPECT_GE(o.hit_discount.minCoeff(), -1e-12);
      EXPECT_LE(o.hit_discount.maxCoeff(), 1.0 + 1e-12);
      const double total = 1.0 / (1.0 - inst.mdp.discount);
      EXPECT_LE((o.measure.rowwise().sum().array() - total).abs().maxCoeff(), 1e-9);
    }
  }
  EXPECT_LE(worst, 1e-8);
}

TEST(SwitchingAdvantage, TwoCycleAndCancellations) {
  const Mdp m = two_cycle();
  const Vector a = switching_advantage(m, always(kGo), always(kStay), 1, indicator_reward(m, 1));
  EXPECT_NEAR(a[0], 1.0, 1e-15);
  EXPECT_EQ(a[1], 0.0);
  const Vector pre = prehit_advantage(m, always(kGo), always(kStay), 1, RewardVector{Vector::Unit(2, 0)});
  EXPECT_NEAR(pre[0], 1.0, 1e-15);

  Rng rng(14);
  const auto inst = random_instance(rng);
  EXPECT_LE(switching_advantage(inst.mdp, inst.pi, inst.pi, 0, inst.r).cwiseAbs().maxCoeff(), 1e-10);
  for (int w = 0; w < inst.mdp.n_states; ++w)
    EXPECT_EQ(switching_advantage(inst.mdp, inst.pi_w, inst.pi, w, inst.r)[w], 0.0);
}

TEST(SwitchingAdvantage, MatchesOracleInnerProduct) {
  Rng rng(15);
  for (int i = 0; i < 30; ++i) {
    const auto inst = random_instance(rng);
    const Matrix mp = successor_measure(inst.mdp, inst.pi).m;
    for (int w = 0; w < inst.mdp.n_states; ++w) {
      const Vector a = switching_advantage(inst.mdp, inst.pi_w, inst.pi, w, inst.r);
      const Vector o = (switching_measure_oracle(inst.mdp, inst.pi_w, inst.pi, w).measure - mp) * inst.r.values;
      EXPECT_LE((a - o).cwiseAbs().maxCoeff(), 1e-8);
    }
  }
}

TEST(PrehitAdvantage, IndicatorAtSubgoalCancelsAndReassembles) {
  Rng rng(16);
  const auto inst = random_instance(rng);
  const int n = inst.mdp.n_states;
  const auto mpw = successor_measure(inst.mdp, inst.pi_w);
  const Vector vp = value_of(successor_measure(inst.mdp, inst.pi), inst.r);
  for (int w = 0; w < n; ++w) {
    EXPECT_LE(prehit_advantage(inst.mdp, inst.pi_w, inst.pi, w, indicator_reward(inst.mdp, w)).cwiseAbs().maxCoeff(),
              1e-12);
    const Vector ratio = mpw.m.col(w) / mpw.m(w, w);
    const Vector pre = prehit_advantage(inst.mdp, inst.pi_w, inst.pi, w, inst.r);
    const Vector a = switching_advantage(inst.mdp, inst.pi_w, inst.pi, w, inst.r);
    EXPECT_LE((pre + ratio * vp[w] - vp - a).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(PrehitAdvantage, UnreachableSubgoalGivesPolicyValue) {
  Mdp m = two_cycle();
  const RewardVector r{Vector::Unit(2, 0)};
  const Vector pre = prehit_advantage(m, always(kStay), always(kGo), 1, r);
  EXPECT_DOUBLE_EQ(pre[0], value_of(successor_measure(m, always(kStay)), r)[0]);
}

TEST(MyersGap, NonNegativeTightAtSubgoalAndOccupancyForSamePolicy) {
  Rng rng(17);
  for (int i = 0; i < 30; ++i) {
    const auto inst = random_instance(rng);
    for (int w = 0; w < inst.mdp.n_states; ++w) {
      const Matrix gap = myers_lower_bound_gap(inst.mdp, inst.pi_w, inst.pi, w);
      EXPECT_GE(gap.minCoeff(), -1e-10);
      EXPECT_LE(gap.row(w).cwiseAbs().maxCoeff(), 1e-10);
      EXPECT_GE(myers_lower_bound_gap(inst.mdp, inst.pi_w, inst.pi_w, w).minCoeff(), -1e-10);
    }
  }
}

TEST(CsvExport, MatrixAndVector) {
  const auto dir = std::filesystem::temp_directory_path();
  const Matrix m = successor_measure(two_cycle(), always(kGo)).m;
  export_matrix_csv(m, (dir / "switchsim_m.csv").string());
  export_vector_csv(m.col(0), (dir / "switchsim_v.csv").string());
  std::ifstream in(dir / "switchsim_m.csv");
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  EXPECT_EQ(header, "s,s',value");
  EXPECT_EQ(first, "0,0,1.3333333333333333");
  std::ifstream vin(dir / "switchsim_v.csv");
  std::getline(vin, header);
  EXPECT_EQ(header, "s,value");
}
