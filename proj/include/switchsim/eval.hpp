#pragma once

// Rollouts, success rates, return decomposition, IQM with stratified bootstrap,
// and CSV/JSON exports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "switchsim/common.hpp"
#include "switchsim/hier.hpp"
#include "switchsim/maze.hpp"

namespace switchsim::eval {

struct RolloutRecord {
  std::vector<int> states;
  std::vector<int> actions;   // one per transition (states.size() - 1)
  std::vector<int> subgoals;  // per action; -1 when no subgoal was chosen
  std::vector<double> rewards;  // r(s_t) for every visited state
  double total_return = 0.0;
  bool success = false;
};

/// Maps a state to an action (and optional subgoal). Must be safe to call
/// concurrently with distinct rngs.
using Controller = std::function<hier::ActResult(int s, Rng& rng)>;

inline Controller agent_controller(const hier::HierAgent& agent, Vector z_r, hier::ActMode mode) {
  return [&agent, z = std::move(z_r), mode](int s, Rng& rng) { return hier::act(agent, s, z, rng, mode); };
}

inline Controller table_controller(const PolicyTable& pi) {
  return [&pi](int s, Rng& rng) {
    hier::ActResult r;
    r.action = sample_categorical(pi.probs.row(s), rng);
    return r;
  };
}

inline Controller uniform_controller(int n_actions) {
  return [n_actions](int, Rng& rng) {
    hier::ActResult r;
    r.action = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(n_actions)));
    return r;
  };
}

/// Start cell is drawn uniformly from the task's start cells (every free cell
/// when none are listed). r(s_t) is collected at every visited state including
/// the first; goal tasks stop on arrival at the goal.
inline RolloutRecord rollout(const maze::MazeMdp& env, const Controller& ctl, const maze::Task& task,
                             std::uint64_t seed, int max_steps) {
  if (max_steps < 1) throw ConfigError("rollout: max_steps must be >= 1");
  Rng rng(seed);
  const RewardVector r = maze::reward_vector(task.reward, env.map);
  const std::optional<int> goal =
      task.goal_cell ? std::optional<int>(env.map.state(*task.goal_cell)) : std::nullopt;
  int s;
  if (task.start_cells.empty()) {
    s = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(env.map.n_states())));
  } else {
    s = env.map.state(task.start_cells[uniform_index(rng, task.start_cells.size())]);
  }
  RolloutRecord rec;
  for (int t = 0;; ++t) {
    rec.states.push_back(s);
    rec.rewards.push_back(r[s]);
    rec.total_return += r[s];
    if (goal && s == *goal) {
      rec.success = true;
      break;
    }
    if (t + 1 >= max_steps) break;
    const hier::ActResult a = ctl(s, rng);
    rec.actions.push_back(a.action);
    rec.subgoals.push_back(a.subgoal.value_or(-1));
    s = maze::step(env, s, a.action);
  }
  return rec;
}

struct Decomposition {
  double pre = 0.0;
  double post = 0.0;
  int highest_state = 0;
  std::optional<std::size_t> arrival;
};

/// Split of the return at the first arrival in the highest-reward state
/// (lowest index on ties); the arrival step counts toward `post`.
inline Decomposition return_decomposition(const RolloutRecord& rec, const RewardVector& r) {
  require_dims(r.size() > 0, "return_decomposition: empty reward");
  Decomposition out;
  for (Eigen::Index s = 1; s < r.size(); ++s)
    if (r[s] > r[out.highest_state]) out.highest_state = static_cast<int>(s);
  for (std::size_t t = 0; t < rec.states.size(); ++t)
    if (rec.states[t] == out.highest_state) {
      out.arrival = t;
      break;
    }
  const std::size_t k = out.arrival.value_or(rec.rewards.size());
  for (std::size_t t = 0; t < rec.rewards.size(); ++t) (t < k ? out.pre : out.post) += rec.rewards[t];
  return out;
}

struct SeedStats {
  std::vector<double> per_seed;
  double mean = 0.0;
  double sd = 0.0;
};

/// Sample standard deviation (n - 1); 0 for a single value.
inline SeedStats seed_stats(std::vector<double> per_seed) {
  SeedStats out;
  out.per_seed = std::move(per_seed);
  const auto n = static_cast<double>(out.per_seed.size());
  if (out.per_seed.empty()) return out;
  out.mean = std::accumulate(out.per_seed.begin(), out.per_seed.end(), 0.0) / n;
  if (out.per_seed.size() > 1) {
    double ss = 0.0;
    for (double v : out.per_seed) ss += (v - out.mean) * (v - out.mean);
    out.sd = std::sqrt(ss / (n - 1.0));
  }
  return out;
}

struct EpisodeSummary {
  double total_return = 0.0;
  bool success = false;
  double pre = 0.0;
  double post = 0.0;
};

struct TaskEvaluation {
  std::string task;
  bool goal_task = false;
  SeedStats returns;  // mean undiscounted return per seed
  SeedStats success;  // success percentage per seed (goal tasks)
  SeedStats pre;
  SeedStats post;
  std::vector<std::vector<EpisodeSummary>> episodes;  // [seed][episode]
};

inline std::uint64_t episode_seed(std::uint64_t base, int seed_index, int episode) {
  return derive_seed(derive_seed(base, static_cast<std::uint64_t>(seed_index)), static_cast<std::uint64_t>(episode));
}

/// Runs n_seeds x n_episodes rollouts. With n_threads > 1 episodes fan out
/// over threads; every episode has its own derived seed and results are
/// reduced in index order, so the output does not depend on the thread count.
inline TaskEvaluation evaluate_task(const maze::MazeMdp& env, const Controller& ctl, const maze::Task& task,
                                    int n_episodes, int n_seeds, std::uint64_t base_seed, int n_threads = 1) {
  if (n_episodes < 1 || n_seeds < 1) throw ConfigError("evaluate_task: need >= 1 episode and seed");
  const RewardVector r = maze::reward_vector(task.reward, env.map);
  TaskEvaluation out;
  out.task = task.name;
  out.goal_task = task.goal_cell.has_value();
  out.episodes.assign(static_cast<std::size_t>(n_seeds), std::vector<EpisodeSummary>(n_episodes));
  const int total = n_seeds * n_episodes;
  auto run = [&](int idx) {
    const int si = idx / n_episodes;
    const int ei = idx % n_episodes;
    const RolloutRecord rec = rollout(env, ctl, task, episode_seed(base_seed, si, ei), task.episode_length);
    const Decomposition dec = return_decomposition(rec, r);
    out.episodes[si][ei] = {rec.total_return, rec.success, dec.pre, dec.post};
  };
  if (n_threads <= 1) {
    for (int i = 0; i < total; ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t)
      pool.emplace_back([&, t] {
        for (int i = t; i < total; i += n_threads) run(i);
      });
    for (auto& th : pool) th.join();
  }
  std::vector<double> ret(n_seeds, 0.0), suc(n_seeds, 0.0), pre(n_seeds, 0.0), post(n_seeds, 0.0);
  for (int si = 0; si < n_seeds; ++si) {
    for (const auto& e : out.episodes[si]) {
      ret[si] += e.total_return;
      suc[si] += e.success ? 1.0 : 0.0;
      pre[si] += e.pre;
      post[si] += e.post;
    }
    ret[si] /= n_episodes;
    suc[si] = 100.0 * suc[si] / n_episodes;
    pre[si] /= n_episodes;
    post[si] /= n_episodes;
  }
  out.returns = seed_stats(ret);
  out.success = seed_stats(suc);
  out.pre = seed_stats(pre);
  out.post = seed_stats(post);
  return out;
}

/// Success percentage per seed, then mean and sd over seeds.
inline SeedStats success_rate(const maze::MazeMdp& env, const Controller& ctl, const maze::Task& task,
                              int n_episodes, int n_seeds, std::uint64_t base_seed = 0, int n_threads = 1) {
  if (!task.goal_cell) throw ConfigError("success_rate: task " + task.name + " has no goal");
  return evaluate_task(env, ctl, task, n_episodes, n_seeds, base_seed, n_threads).success;
}

// ---------------------------------------------------------------------------
// Aggregate statistics

/// Mean of the sorted values after dropping floor(n/4) from each end. The mean is
/// taken relative to the first kept value so constant inputs return the constant.
inline double iqm(std::vector<double> values) {
  if (values.empty()) throw ConfigError("iqm of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t cut = values.size() / 4;
  const std::size_t m = values.size() - 2 * cut;
  const double base = values[cut];
  double acc = 0.0;
  for (std::size_t i = cut; i < cut + m; ++i) acc += values[i] - base;
  return base + acc / static_cast<double>(m);
}

/// Linear-interpolation percentile, q in [0, 100].
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ConfigError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) return values[lo];
  return values[lo] + frac * (values[hi] - values[lo]);
}

struct TaskBounds {
  double lo = 0.0;
  double hi = 1.0;
};

/// Per-task min and max over every supplied method matrix (rows = tasks).
inline std::vector<TaskBounds> task_bounds(const std::vector<Matrix>& methods) {
  if (methods.empty()) throw ConfigError("task_bounds: no method results");
  std::vector<TaskBounds> out(methods.front().rows());
  for (Eigen::Index t = 0; t < methods.front().rows(); ++t) {
    out[t] = {methods.front().row(t).minCoeff(), methods.front().row(t).maxCoeff()};
    for (const auto& m : methods) {
      require_dims(m.rows() == methods.front().rows(), "task_bounds: task counts differ");
      out[t].lo = std::min(out[t].lo, m.row(t).minCoeff());
      out[t].hi = std::max(out[t].hi, m.row(t).maxCoeff());
    }
  }
  return out;
}

struct AggregateReport {
  std::vector<double> task_mean;
  std::vector<double> task_sd;
  Matrix normalized;  // kept tasks x seeds
  std::vector<int> kept_tasks;
  std::vector<std::string> warnings;
  double iqm = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

/// IQM of the pooled (optionally min-max normalized) task x seed matrix with a
/// 95% stratified bootstrap CI: each replicate resamples seeds within every task.
inline AggregateReport iqm_with_ci(const Matrix& returns, int n_boot, std::uint64_t seed,
                                   const std::optional<std::vector<TaskBounds>>& bounds = std::nullopt) {
  if (returns.rows() < 1) throw ConfigError("iqm_with_ci: need at least one task");
  if (returns.cols() < 2) throw ConfigError("iqm_with_ci: need at least two seeds");
  if (n_boot < 1) throw ConfigError("iqm_with_ci: n_boot must be >= 1");
  if (bounds) require_dims(static_cast<Eigen::Index>(bounds->size()) == returns.rows(), "iqm_with_ci: bounds size");
  AggregateReport rep;
  std::vector<Vector> rows;
  for (Eigen::Index t = 0; t < returns.rows(); ++t) {
    std::vector<double> vals(returns.cols());
    for (Eigen::Index j = 0; j < returns.cols(); ++j) vals[j] = returns(t, j);
    const SeedStats st = seed_stats(vals);
    rep.task_mean.push_back(st.mean);
    rep.task_sd.push_back(st.sd);
    Vector row = returns.row(t).transpose();
    if (bounds) {
      const auto [lo, hi] = (*bounds)[t];
      if (!(hi > lo)) {
        rep.warnings.push_back("task " + std::to_string(t) + " excluded: degenerate normalization (max = min)");
        continue;
      }
      row = (row.array() - lo) / (hi - lo);
    }
    rep.kept_tasks.push_back(static_cast<int>(t));
    rows.push_back(row);
  }
  if (rows.empty()) throw ConfigError("iqm_with_ci: every task was excluded");
  rep.normalized = Matrix(static_cast<Eigen::Index>(rows.size()), returns.cols());
  std::vector<double> pooled;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rep.normalized.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    pooled.insert(pooled.end(), rows[i].data(), rows[i].data() + rows[i].size());
  }
  rep.iqm = iqm(pooled);
  Rng rng(seed);
  std::vector<double> boots(static_cast<std::size_t>(n_boot));
  std::vector<double> sample(pooled.size());
  const auto n_seeds = static_cast<std::uint64_t>(returns.cols());
  for (int b = 0; b < n_boot; ++b) {
    std::size_t k = 0;
    for (const auto& row : rows)
      for (std::uint64_t j = 0; j < n_seeds; ++j) sample[k++] = row[static_cast<Eigen::Index>(uniform_index(rng, n_seeds))];
    boots[b] = iqm(sample);
  }
  rep.ci_low = percentile(boots, 2.5);
  rep.ci_high = percentile(boots, 97.5);
  return rep;
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(const Vector& a, const Vector& b) {
  require_dims(a.size() == b.size() && a.size() >= 2, "spearman: need two equal-length vectors");
  auto ranks = [](const Vector& v) {
    std::vector<Eigen::Index> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index x, Eigen::Index y) { return v[x] < v[y]; });
    Vector r(v.size());
    for (Eigen::Index i = 0; i < v.size();) {
      Eigen::Index j = i;
      while (j + 1 < v.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (Eigen::Index k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
      i = j + 1;
    }
    return r;
  };
  Vector x = ranks(a);
  Vector y = ranks(b);
  x.array() -= x.mean();
  y.array() -= y.mean();
  const double den = std::sqrt(x.squaredNorm() * y.squaredNorm());
  if (den == 0.0) return 0.0;
  return x.dot(y) / den;
}

// ---------------------------------------------------------------------------
// Exports

/// CSV "row,col,value" for every free cell in state order; walls omitted.
inline void export_heatmap(const Vector& values, const maze::CellMap& map, const std::string& path) {
  require_dims(values.size() == map.n_states(), "export_heatmap: value count differs from state count");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "row,col,value\n";
  for (int s = 0; s < map.n_states(); ++s) {
    const maze::Cell c = map.cell(s);
    out << c.row << ',' << c.col << ',' << format_double(values[s]) << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

inline Vector read_heatmap(const std::string& path, const maze::CellMap& map) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  Vector v = Vector::Constant(map.n_states(), std::nan(""));
  std::string line;
  std::getline(in, line);
  if (line != "row,col,value") throw IoError(path + ": missing heatmap header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string a, b, c;
    if (!std::getline(ls, a, ',') || !std::getline(ls, b, ',') || !std::getline(ls, c))
      throw IoError(path + ": malformed line '" + line + "'");
    try {
      v[map.state({std::stoi(a), std::stoi(b)})] = std::stod(c);
    } catch (const std::logic_error&) {
      throw IoError(path + ": malformed line '" + line + "'");
    }
  }
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (std::isnan(v[i])) throw IoError(path + ": missing state " + std::to_string(i));
  return v;
}

/// Per-step subgoal trace "t,s,w,a" (w = -1 without a subgoal).
inline void write_subgoal_trace(const std::string& path, const RolloutRecord& rec) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "t,s,w,a\n";
  for (std::size_t t = 0; t < rec.actions.size(); ++t)
    out << t << ',' << rec.states[t] << ',' << rec.subgoals[t] << ',' << rec.actions[t] << '\n';
}

inline nlohmann::json stats_json(const SeedStats& s) {
  return {{"per_seed", s.per_seed}, {"mean", s.mean}, {"sd", s.sd}};
}

/// {"task", "per_seed", "mean", "sd", "iqm", "ci"} where the headline metric is
/// success percentage for goal tasks and mean return otherwise.
inline nlohmann::json task_report(const TaskEvaluation& ev, const AggregateReport& agg) {
  const SeedStats& head = ev.goal_task ? ev.success : ev.returns;
  return {{"task", ev.task},
          {"metric", ev.goal_task ? "success_percent" : "return"},
          {"per_seed", head.per_seed},
          {"mean", head.mean},
          {"sd", head.sd},
          {"iqm", agg.iqm},
          {"ci", {agg.ci_low, agg.ci_high}},
          {"return", stats_json(ev.returns)},
          {"pre_highest", stats_json(ev.pre)},
          {"post_highest", stats_json(ev.post)}};
}

}  // namespace switchsim::eval
