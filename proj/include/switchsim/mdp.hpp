#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "switchsim/common.hpp"

namespace switchsim {

inline constexpr double kProbabilityTolerance = 1e-12;

/// Finite discounted MDP with dense 0-based state and action indices.
///
/// Transitions are stored per action: `transitions[a](s, s')` is the
/// probability of landing in s' after taking a in s.
struct Mdp {
  int n_states = 0;
  int n_actions = 0;
  std::vector<Matrix> transitions;
  double discount = 0.9;

  double prob(int s, int a, int next) const { return transitions[a](s, next); }

  static Mdp zeros(int n_states, int n_actions, double discount) {
    Mdp m;
    m.n_states = n_states;
    m.n_actions = n_actions;
    m.discount = discount;
    m.transitions.assign(n_actions, Matrix::Zero(n_states, n_states));
    return m;
  }
};

/// Stochastic policy, one row per state. Deterministic policies are one-hot rows.
struct PolicyTable {
  Matrix probs;

  int n_states() const { return static_cast<int>(probs.rows()); }
  int n_actions() const { return static_cast<int>(probs.cols()); }

  static PolicyTable uniform(int n_states, int n_actions) {
    return {Matrix::Constant(n_states, n_actions, 1.0 / n_actions)};
  }

  static PolicyTable deterministic(const std::vector<int>& actions, int n_actions) {
    PolicyTable p{Matrix::Zero(static_cast<Eigen::Index>(actions.size()), n_actions)};
    for (std::size_t s = 0; s < actions.size(); ++s) {
      require_dims(actions[s] >= 0 && actions[s] < n_actions, "deterministic policy: action out of range");
      p.probs(static_cast<Eigen::Index>(s), actions[s]) = 1.0;
    }
    return p;
  }

  /// Action with the largest probability (lowest index on ties).
  int greedy_action(int s) const {
    Eigen::Index best = 0;
    probs.row(s).maxCoeff(&best);
    return static_cast<int>(best);
  }
};

/// Per-state reward r(s).
struct RewardVector {
  Vector values;

  int size() const { return static_cast<int>(values.size()); }
  double operator[](int s) const { return values[s]; }
};

/// Distribution over states.
struct StateDist {
  Vector probs;
};

/// Lists every violated Mdp invariant; empty means the MDP is well formed.
inline std::vector<std::string> validate_mdp(const Mdp& mdp) {
  std::vector<std::string> out;
  if (mdp.n_states <= 0) out.emplace_back("n_states must be positive");
  if (mdp.n_actions <= 0) out.emplace_back("n_actions must be positive");
  if (!(mdp.discount > 0.0 && mdp.discount < 1.0)) out.emplace_back("discount out of range (0,1)");
  if (static_cast<int>(mdp.transitions.size()) != mdp.n_actions) {
    out.emplace_back("transitions: expected " + std::to_string(mdp.n_actions) + " action matrices, got " +
                     std::to_string(mdp.transitions.size()));
    return out;
  }
  for (int a = 0; a < mdp.n_actions; ++a) {
    const Matrix& p = mdp.transitions[a];
    if (p.rows() != mdp.n_states || p.cols() != mdp.n_states) {
      out.emplace_back("transitions for a=" + std::to_string(a) + " have wrong shape");
      continue;
    }
    for (int s = 0; s < mdp.n_states; ++s) {
      bool negative = false;
      bool finite = true;
      for (int t = 0; t < mdp.n_states; ++t) {
        if (!std::isfinite(p(s, t))) finite = false;
        else if (p(s, t) < 0.0) negative = true;
      }
      const std::string where = "(s=" + std::to_string(s) + ",a=" + std::to_string(a) + ")";
      if (!finite) out.push_back("non-finite probability at " + where);
      if (negative) out.push_back("negative probability at " + where);
      const double sum = p.row(s).sum();
      if (finite && std::abs(sum - 1.0) > kProbabilityTolerance)
        out.push_back("row " + where + " sums to " + format_double(sum));
    }
  }
  return out;
}

inline void validate_policy(const Mdp& mdp, const PolicyTable& pi) {
  require_dims(pi.n_states() == mdp.n_states && pi.n_actions() == mdp.n_actions,
               "policy shape does not match MDP");
}

/// P_pi(s, s') = sum_a pi(a|s) P(s'|s,a).
inline Matrix policy_transition_matrix(const Mdp& mdp, const PolicyTable& pi) {
  validate_policy(mdp, pi);
  Matrix out = Matrix::Zero(mdp.n_states, mdp.n_states);
  for (int a = 0; a < mdp.n_actions; ++a)
    out.noalias() += pi.probs.col(a).asDiagonal() * mdp.transitions[a];
  return out;
}

inline RewardVector indicator_reward(const Mdp& mdp, int goal) {
  require_dims(goal >= 0 && goal < mdp.n_states, "indicator_reward: goal index out of range");
  RewardVector r{Vector::Zero(mdp.n_states)};
  r.values[goal] = 1.0;
  return r;
}

inline bool is_row_stochastic(const Matrix& m, double tol = kProbabilityTolerance) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if ((m.row(i).array() < 0.0).any()) return false;
    if (std::abs(m.row(i).sum() - 1.0) > tol) return false;
  }
  return true;
}

// JSON layout: {"n_states", "n_actions", "discount", "transitions": [s][a][s']}.
inline nlohmann::json mdp_to_json(const Mdp& mdp) {
  nlohmann::json t = nlohmann::json::array();
  for (int s = 0; s < mdp.n_states; ++s) {
    nlohmann::json per_action = nlohmann::json::array();
    for (int a = 0; a < mdp.n_actions; ++a) {
      std::vector<double> row(mdp.n_states);
      for (int n = 0; n < mdp.n_states; ++n) row[n] = mdp.prob(s, a, n);
      per_action.push_back(row);
    }
    t.push_back(std::move(per_action));
  }
  return {{"n_states", mdp.n_states}, {"n_actions", mdp.n_actions}, {"discount", mdp.discount}, {"transitions", t}};
}

/// Parses and validates; throws ConfigError listing every violation.
inline Mdp mdp_from_json(const nlohmann::json& j) {
  Mdp mdp;
  try {
    mdp = Mdp::zeros(j.at("n_states").get<int>(), j.at("n_actions").get<int>(), j.at("discount").get<double>());
    const auto& t = j.at("transitions");
    if (static_cast<int>(t.size()) != mdp.n_states) throw ConfigError("transitions: wrong number of states");
    for (int s = 0; s < mdp.n_states; ++s) {
      if (static_cast<int>(t[s].size()) != mdp.n_actions) throw ConfigError("transitions: wrong number of actions");
      for (int a = 0; a < mdp.n_actions; ++a) {
        const auto row = t[s][a].get<std::vector<double>>();
        if (static_cast<int>(row.size()) != mdp.n_states) throw ConfigError("transitions: wrong row length");
        for (int n = 0; n < mdp.n_states; ++n) mdp.transitions[a](s, n) = row[n];
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed MDP JSON: ") + e.what());
  }
  const auto problems = validate_mdp(mdp);
  if (!problems.empty()) {
    std::string msg = "invalid MDP:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  return mdp;
}

inline void save_mdp(const Mdp& mdp, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path);
  out << mdp_to_json(mdp).dump(1) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline Mdp load_mdp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return mdp_from_json(j);
}

/// Random MDP with dense stochastic rows; the family used by the identity checks.
inline Mdp random_mdp(int n_states, int n_actions, double discount, Rng& rng) {
  Mdp mdp = Mdp::zeros(n_states, n_actions, discount);
  for (int a = 0; a < n_actions; ++a) {
    for (int s = 0; s < n_states; ++s) {
      double total = 0.0;
      for (int n = 0; n < n_states; ++n) {
        // Exponential weights give a uniform draw on the simplex.
        const double w = -std::log(1.0 - uniform01(rng));
        mdp.transitions[a](s, n) = w;
        total += w;
      }
      mdp.transitions[a].row(s) /= total;
    }
  }
  return mdp;
}

inline PolicyTable random_policy(int n_states, int n_actions, Rng& rng) {
  PolicyTable pi{Matrix::Zero(n_states, n_actions)};
  for (int s = 0; s < n_states; ++s) {
    double total = 0.0;
    for (int a = 0; a < n_actions; ++a) {
      pi.probs(s, a) = -std::log(1.0 - uniform01(rng));
      total += pi.probs(s, a);
    }
    pi.probs.row(s) /= total;
  }
  return pi;
}

}  // namespace switchsim
