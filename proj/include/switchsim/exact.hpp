#pragma once

// Closed-form successor measures, values, hitting-time discounts and switching
// quantities for tabular MDPs, plus an augmented-state oracle for the
// switching successor measure that shares no code with the closed form.

#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "switchsim/common.hpp"
#include "switchsim/mdp.hpp"

namespace switchsim::exact {

/// Discounted state-occupancy matrix: m(s, s') = M^pi_s(s'), t = 0 visit included.
struct SuccessorMatrix {
  Matrix m;
  std::string policy_tag;

  int n_states() const { return static_cast<int>(m.rows()); }
  const Matrix& matrix() const { return m; }
};

/// Switching successor measure for one subgoal w, with the per-start hitting discount.
struct SwitchingResult {
  Matrix measure;
  Vector hit_discount;
  int subgoal = 0;
};

/// M_{s,a}(s') indexed as by_action[a](s, s').
struct StateActionSuccessor {
  std::vector<Matrix> by_action;
};

struct ValueIterationResult {
  Vector values;
  PolicyTable policy;
  int iterations = 0;
};

inline constexpr double kValueIterationTol = 1e-10;

namespace detail {

// (I - gamma * P)^{-1} by partial-pivot LU.
inline Matrix resolvent(const Matrix& p, double gamma) {
  const Eigen::Index n = p.rows();
  Matrix a = Matrix::Identity(n, n) - gamma * p;
  Eigen::PartialPivLU<Matrix> lu(a);
  Matrix inv = lu.solve(Matrix::Identity(n, n));
  if (!inv.allFinite()) throw NumericalError("singular system in successor solve");
  return inv;
}

inline void check_state(const Mdp& mdp, int s, const char* what) {
  require_dims(s >= 0 && s < mdp.n_states, std::string(what) + ": state index out of range");
}

}  // namespace detail

inline SuccessorMatrix successor_measure(const Mdp& mdp, const PolicyTable& pi, std::string tag = {}) {
  const Matrix p = policy_transition_matrix(mdp, pi);
  return {detail::resolvent(p, mdp.discount), std::move(tag)};
}

inline StateActionSuccessor state_action_successor(const Mdp& mdp, const PolicyTable& pi) {
  const SuccessorMatrix sm = successor_measure(mdp, pi);
  StateActionSuccessor out;
  out.by_action.reserve(mdp.n_actions);
  const Matrix eye = Matrix::Identity(mdp.n_states, mdp.n_states);
  for (int a = 0; a < mdp.n_actions; ++a) out.by_action.push_back(eye + mdp.discount * mdp.transitions[a] * sm.m);
  return out;
}

/// V(s) = <M_s, r>.
inline Vector value_of(const SuccessorMatrix& m, const RewardVector& r) {
  require_dims(m.m.cols() == r.values.size(), "value_of: reward length mismatch");
  return m.m * r.values;
}

/// Q(s,a) = r(s) + gamma * sum_s' P(s'|s,a) V(s').
inline Matrix action_values(const Mdp& mdp, const RewardVector& r, const Vector& v) {
  Matrix q(mdp.n_states, mdp.n_actions);
  for (int a = 0; a < mdp.n_actions; ++a) q.col(a) = r.values + mdp.discount * (mdp.transitions[a] * v);
  return q;
}

/// One-hot greedy policy; ties (within a relative 1e-12) go to the lowest action.
inline PolicyTable greedy_policy(const Matrix& q) {
  PolicyTable pi{Matrix::Zero(q.rows(), q.cols())};
  for (Eigen::Index s = 0; s < q.rows(); ++s) {
    const double best = q.row(s).maxCoeff();
    const double slack = 1e-12 * std::max(1.0, std::abs(best));
    for (Eigen::Index a = 0; a < q.cols(); ++a) {
      if (q(s, a) >= best - slack) {
        pi.probs(s, a) = 1.0;
        break;
      }
    }
  }
  return pi;
}

inline ValueIterationResult value_iteration(const Mdp& mdp, const RewardVector& r, double tol = kValueIterationTol) {
  if (!(tol > 0.0)) throw ConfigError("value_iteration: tol must be positive");
  require_dims(r.size() == mdp.n_states, "value_iteration: reward length mismatch");
  Vector v = Vector::Zero(mdp.n_states);
  int it = 0;
  for (;;) {
    ++it;
    const Vector next = action_values(mdp, r, v).rowwise().maxCoeff();
    const double diff = (next - v).lpNorm<Eigen::Infinity>();
    v = next;
    if (diff <= tol) break;
  }
  return {v, greedy_policy(action_values(mdp, r, v)), it};
}

/// Goal-reaching subgoal policy: greedy for the indicator reward of w.
inline PolicyTable optimal_goal_policy(const Mdp& mdp, int w) {
  return value_iteration(mdp, indicator_reward(mdp, w)).policy;
}

/// h(s) = E[gamma^{H_s(w)}], solved on the chain with w made absorbing.
inline Vector hitting_discount(const Mdp& mdp, const PolicyTable& pi, int w) {
  detail::check_state(mdp, w, "hitting_discount");
  const Matrix p = policy_transition_matrix(mdp, pi);
  const int n = mdp.n_states;
  const double g = mdp.discount;
  // Unknowns are h(s) for s != w; h(w) = 1 moves to the right-hand side.
  std::vector<int> idx;
  idx.reserve(n - 1);
  for (int s = 0; s < n; ++s)
    if (s != w) idx.push_back(s);
  const int k = static_cast<int>(idx.size());
  Vector h = Vector::Zero(n);
  h[w] = 1.0;
  if (k == 0) return h;
  Matrix a(k, k);
  Vector b(k);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) a(i, j) = (i == j ? 1.0 : 0.0) - g * p(idx[i], idx[j]);
    b[i] = g * p(idx[i], w);
  }
  const Vector x = Eigen::PartialPivLU<Matrix>(a).solve(b);
  for (int i = 0; i < k; ++i) h[idx[i]] = x[i];
  return h;
}

/// sum_{t<k} gamma^t P_pi^t.
inline Matrix truncated_successor(const Mdp& mdp, const PolicyTable& pi, int k) {
  if (k < 0) throw ConfigError("truncated_successor: k must be nonnegative");
  const Matrix p = policy_transition_matrix(mdp, pi);
  Matrix out = Matrix::Zero(mdp.n_states, mdp.n_states);
  Matrix term = Matrix::Identity(mdp.n_states, mdp.n_states);
  for (int t = 0; t < k; ++t) {
    out += term;
    term = mdp.discount * (term * p);
  }
  return out;
}

/// Follow pi_w for exactly k steps, then pi.
inline Matrix k_step_switching_measure(const Mdp& mdp, const PolicyTable& pi_w, const PolicyTable& pi, int k) {
  if (k < 0) throw ConfigError("k_step_switching_measure: k must be nonnegative");
  const Matrix pw = policy_transition_matrix(mdp, pi_w);
  Matrix trunc = Matrix::Zero(mdp.n_states, mdp.n_states);
  Matrix term = Matrix::Identity(mdp.n_states, mdp.n_states);  // gamma^t P_w^t
  for (int t = 0; t < k; ++t) {
    trunc += term;
    term = mdp.discount * (term * pw);
  }
  return trunc + term * successor_measure(mdp, pi).m;
}

inline Vector k_step_advantage(const Mdp& mdp, const PolicyTable& pi_w, const PolicyTable& pi, int k,
                               const RewardVector& r) {
  require_dims(r.size() == mdp.n_states, "k_step_advantage: reward length mismatch");
  const Matrix diff = k_step_switching_measure(mdp, pi_w, pi, k) - successor_measure(mdp, pi).m;
  return diff * r.values;
}

/// Closed form: M^{pi_w}_s + ratio_s * (M^pi_w - M^{pi_w}_w), ratio_s = M^{pi_w}_s(w) / M^{pi_w}_w(w).
inline SwitchingResult switching_measure_formula(const SuccessorMatrix& m_pw, const SuccessorMatrix& m_p, int w) {
  require_dims(m_pw.m.rows() == m_p.m.rows() && m_pw.m.cols() == m_p.m.cols(),
               "switching_measure_formula: matrices from different MDPs");
  require_dims(w >= 0 && w < m_pw.n_states(), "switching_measure_formula: subgoal out of range");
  const double self = m_pw.m(w, w);
  if (!(self > 0.0)) throw NumericalError("switching_measure_formula: M_w(w) must be positive");
  SwitchingResult out;
  out.subgoal = w;
  out.hit_discount = m_pw.m.col(w) / self;
  const Eigen::RowVectorXd post = m_p.m.row(w) - m_pw.m.row(w);
  out.measure = m_pw.m + out.hit_discount * post;
  // The subgoal row switches at t = 0, so it is M^pi_w by definition.
  out.measure.row(w) = m_p.m.row(w);
  return out;
}

/// Exact solve on the augmented chain S x {pre, post}. The flag turns to post on
/// the first visit of w (at t = 0 when the start is w); pi_w drives pre states
/// and pi drives post states. The occupancy is marginalized over the flag.
inline SwitchingResult switching_measure_oracle(const Mdp& mdp, const PolicyTable& pi_w, const PolicyTable& pi,
                                                int w) {
  detail::check_state(mdp, w, "switching_measure_oracle");
  validate_policy(mdp, pi_w);
  validate_policy(mdp, pi);
  const int n = mdp.n_states;
  const auto pre = [](int s) { return 2 * s; };
  const auto post = [](int s) { return 2 * s + 1; };
  Matrix aug = Matrix::Zero(2 * n, 2 * n);
  for (int s = 0; s < n; ++s) {
    for (int a = 0; a < mdp.n_actions; ++a) {
      const double q_pre = pi_w.probs(s, a);
      const double q_post = pi.probs(s, a);
      for (int t = 0; t < n; ++t) {
        const double p = mdp.transitions[a](s, t);
        if (p == 0.0) continue;
        aug(pre(s), t == w ? post(t) : pre(t)) += q_pre * p;
        aug(post(s), post(t)) += q_post * p;
      }
    }
  }
  const Matrix occupancy = detail::resolvent(aug, mdp.discount);
  SwitchingResult out;
  out.subgoal = w;
  out.measure = Matrix::Zero(n, n);
  out.hit_discount = Vector::Zero(n);
  for (int s = 0; s < n; ++s) {
    const int start = (s == w) ? post(s) : pre(s);
    double post_mass = 0.0;
    for (int t = 0; t < n; ++t) {
      out.measure(s, t) = occupancy(start, pre(t)) + occupancy(start, post(t));
      post_mass += occupancy(start, post(t));
    }
    // Discounted post-switch mass equals E[gamma^H] / (1 - gamma).
    out.hit_discount[s] = (1.0 - mdp.discount) * post_mass;
  }
  return out;
}

/// Value gain of "pi_w until w, then pi" over pi, per start state.
inline Vector switching_advantage(const Mdp& mdp, const PolicyTable& pi_w, const PolicyTable& pi, int w,
                                  const RewardVector& r) {
  detail::check_state(mdp, w, "switching_advantage");
  const SuccessorMatrix m_pw = successor_measure(mdp, pi_w);
  const SuccessorMatrix m_p = successor_measure(mdp, pi);
  const Vector v_pw = value_of(m_pw, r);
  const Vector v_p = value_of(m_p, r);
  const Vector ratio = m_pw.m.col(w) / m_pw.m(w, w);
  // Grouped as (pre-switch) + (post-switch) so that the s = w entry cancels exactly.
  return (v_pw - ratio * v_pw[w]) + (ratio * v_p[w] - v_p);
}

/// Rewards collected before the switch: V^{pi_w}(s) - ratio_s * V^{pi_w}(w).
inline Vector prehit_advantage(const Mdp& mdp, const PolicyTable& pi_w, const PolicyTable& /*pi*/, int w,
                               const RewardVector& r) {
  detail::check_state(mdp, w, "prehit_advantage");
  const SuccessorMatrix m_pw = successor_measure(mdp, pi_w);
  const Vector v_pw = value_of(m_pw, r);
  const Vector ratio = m_pw.m.col(w) / m_pw.m(w, w);
  return v_pw - ratio * v_pw[w];
}

/// Switching measure minus the post-switch lower bound ratio_s * M^pi_w(s').
inline Matrix myers_lower_bound_gap(const Mdp& mdp, const PolicyTable& pi_w, const PolicyTable& pi, int w) {
  detail::check_state(mdp, w, "myers_lower_bound_gap");
  const SuccessorMatrix m_pw = successor_measure(mdp, pi_w);
  const SuccessorMatrix m_p = successor_measure(mdp, pi);
  const SwitchingResult sw = switching_measure_formula(m_pw, m_p, w);
  return sw.measure - sw.hit_discount * m_p.m.row(w);
}

// ---------------------------------------------------------------------------
// CSV exports with 17 significant digits.

inline void export_matrix_csv(const Matrix& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "s,s',value\n";
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out << i << ',' << j << ',' << format_double(m(i, j)) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline void export_vector_csv(const Vector& v, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "s,value\n";
  for (Eigen::Index i = 0; i < v.size(); ++i) out << i << ',' << format_double(v[i]) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace switchsim::exact
