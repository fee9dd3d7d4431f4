#pragma once

// Offline trajectory datasets and the samplers used by the training losses.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "switchsim/common.hpp"
#include "switchsim/mdp.hpp"

namespace switchsim::data {

struct Trajectory {
  std::vector<int> states;
  std::vector<int> actions;  // states.size() - 1 entries
};

struct Transition {
  int s = 0;
  int a = 0;
  int next = 0;
  std::uint32_t traj = 0;
  std::uint32_t t = 0;
};

/// Trajectories stored as flat state/action arrays with per-trajectory offsets.
struct OfflineDataset {
  int n_states = 0;
  std::uint64_t seed = 0;
  std::vector<std::uint32_t> states;
  std::vector<std::uint32_t> actions;
  std::vector<std::uint64_t> offsets{0};  // n_traj + 1 entries into `states`
  StateDist rho;

  std::size_t n_trajectories() const { return offsets.size() - 1; }
  std::size_t n_states_stored() const { return states.size(); }
  std::size_t n_transitions() const { return actions.size(); }
  std::size_t length(std::size_t traj) const { return offsets[traj + 1] - offsets[traj]; }
  int state(std::size_t traj, std::size_t t) const { return static_cast<int>(states[offsets[traj] + t]); }
  int action(std::size_t traj, std::size_t t) const { return static_cast<int>(actions[offsets[traj] - traj + t]); }

  Trajectory trajectory(std::size_t traj) const {
    Trajectory out;
    const std::size_t len = length(traj);
    for (std::size_t t = 0; t < len; ++t) out.states.push_back(state(traj, t));
    for (std::size_t t = 0; t + 1 < len; ++t) out.actions.push_back(action(traj, t));
    return out;
  }

  void append(const Trajectory& tr) {
    if (tr.states.empty() || tr.actions.size() + 1 != tr.states.size())
      throw DimensionError("trajectory needs states.size() == actions.size() + 1 >= 1");
    for (int s : tr.states) states.push_back(static_cast<std::uint32_t>(s));
    for (int a : tr.actions) actions.push_back(static_cast<std::uint32_t>(a));
    offsets.push_back(states.size());
  }

  /// Normalized visit histogram over every stored state.
  void recompute_rho() {
    rho.probs = Vector::Zero(n_states);
    for (auto s : states) {
      require_dims(static_cast<int>(s) < n_states, "dataset state index out of range");
      rho.probs[s] += 1.0;
    }
    if (!states.empty()) rho.probs /= static_cast<double>(states.size());
  }
};

/// Mixture over goal sources: the anchor itself, a later state of the same
/// trajectory, or a uniformly random dataset state.
struct GoalSamplerConfig {
  double p_cur = 0.2;
  double p_traj = 0.5;
  double p_rand = 0.3;
  bool geometric = true;
  std::optional<double> geometric_param;  // defaults to 1 - gamma

  void validate() const {
    if (p_cur < 0 || p_traj < 0 || p_rand < 0 || std::abs(p_cur + p_traj + p_rand - 1.0) > 1e-9)
      throw ConfigError("goal sampler probabilities must be nonnegative and sum to 1");
    if (geometric_param && !(*geometric_param > 0.0 && *geometric_param <= 1.0))
      throw ConfigError("geometric parameter must lie in (0,1]");
  }

  static GoalSamplerConfig value_goals() { return {0.2, 0.5, 0.3, true, std::nullopt}; }
  static GoalSamplerConfig high_actor_goals() { return {0.0, 1.0, 0.0, false, std::nullopt}; }
};

namespace detail {

// Sparse cumulative rows so sampling a deterministic transition is O(1).
struct SparseKernel {
  std::vector<std::vector<std::pair<int, double>>> rows;  // index s * n_actions + a
  int n_actions = 0;

  explicit SparseKernel(const Mdp& mdp) : rows(static_cast<std::size_t>(mdp.n_states) * mdp.n_actions), n_actions(mdp.n_actions) {
    for (int s = 0; s < mdp.n_states; ++s)
      for (int a = 0; a < mdp.n_actions; ++a) {
        auto& row = rows[static_cast<std::size_t>(s) * n_actions + a];
        double acc = 0.0;
        for (int t = 0; t < mdp.n_states; ++t) {
          const double p = mdp.transitions[a](s, t);
          if (p > 0.0) {
            acc += p;
            row.emplace_back(t, acc);
          }
        }
      }
  }

  int sample(int s, int a, Rng& rng) const {
    const auto& row = rows[static_cast<std::size_t>(s) * n_actions + a];
    if (row.size() == 1) return row.front().first;
    const double u = uniform01(rng) * row.back().second;
    for (const auto& [t, c] : row)
      if (u < c) return t;
    return row.back().first;
  }
};

}  // namespace detail

/// Rolls out `policy` for `n_traj` trajectories of `max_len` states each.
/// Trajectory i draws from its own generator seeded by (seed, i), so the result
/// does not depend on how generation is scheduled.
inline OfflineDataset generate(const Mdp& mdp, const PolicyTable& policy, std::size_t n_traj, std::size_t max_len,
                               std::uint64_t seed, const std::optional<StateDist>& start = std::nullopt) {
  if (n_traj < 1 || max_len < 1) throw ConfigError("generate: n_traj and max_len must be >= 1");
  validate_policy(mdp, policy);
  if (start) require_dims(start->probs.size() == mdp.n_states, "generate: start distribution length mismatch");
  const detail::SparseKernel kernel(mdp);
  OfflineDataset ds;
  ds.n_states = mdp.n_states;
  ds.seed = seed;
  ds.states.reserve(n_traj * max_len);
  ds.actions.reserve(n_traj * (max_len - 1));
  ds.offsets.reserve(n_traj + 1);
  for (std::size_t i = 0; i < n_traj; ++i) {
    Rng rng(derive_seed(seed, i));
    int s = start ? sample_categorical(start->probs, rng) : static_cast<int>(uniform_index(rng, mdp.n_states));
    ds.states.push_back(static_cast<std::uint32_t>(s));
    for (std::size_t t = 1; t < max_len; ++t) {
      const int a = sample_categorical(policy.probs.row(s), rng);
      s = kernel.sample(s, a, rng);
      ds.actions.push_back(static_cast<std::uint32_t>(a));
      ds.states.push_back(static_cast<std::uint32_t>(s));
    }
    ds.offsets.push_back(ds.states.size());
  }
  ds.recompute_rho();
  return ds;
}

inline std::vector<Transition> sample_transitions(const OfflineDataset& ds, std::size_t batch, Rng& rng) {
  if (ds.n_transitions() == 0) throw ConfigError("sample_transitions: dataset has no transitions");
  if (batch < 1) throw ConfigError("sample_transitions: batch must be >= 1");
  std::vector<Transition> out(batch);
  for (auto& tr : out) {
    const std::uint64_t slot = uniform_index(rng, ds.n_transitions());
    // Trajectory i owns action slots [offsets[i] - i, offsets[i+1] - i - 1).
    std::size_t lo = 0;
    std::size_t hi = ds.n_trajectories();
    while (hi - lo > 1) {
      const std::size_t mid = (lo + hi) / 2;
      if (ds.offsets[mid] - mid <= slot) lo = mid;
      else hi = mid;
    }
    const std::size_t t = slot - (ds.offsets[lo] - lo);
    tr.traj = static_cast<std::uint32_t>(lo);
    tr.t = static_cast<std::uint32_t>(t);
    tr.s = ds.state(lo, t);
    tr.a = ds.action(lo, t);
    tr.next = ds.state(lo, t + 1);
  }
  return out;
}

/// A rho-distributed state: uniform over every stored state.
inline int sample_rho_state(const OfflineDataset& ds, Rng& rng) {
  if (ds.states.empty()) throw ConfigError("dataset is empty");
  return static_cast<int>(ds.states[uniform_index(rng, ds.states.size())]);
}

/// Offset of a future-trajectory goal from geometric(p) on {1, 2, ...}, with the
/// tail mass beyond the episode end placed on the final index.
inline std::size_t truncated_geometric(double p, std::size_t remaining, Rng& rng) {
  if (remaining == 0) return 0;
  if (p >= 1.0) return 1;
  const double u = 1.0 - uniform01(rng);  // (0, 1]
  const double k = std::floor(std::log(u) / std::log1p(-p));
  if (k >= static_cast<double>(remaining - 1)) return remaining;
  return 1 + static_cast<std::size_t>(k);
}

inline int sample_goal(const OfflineDataset& ds, std::size_t traj, std::size_t t, const GoalSamplerConfig& cfg,
                       double discount, Rng& rng) {
  require_dims(traj < ds.n_trajectories() && t < ds.length(traj), "sample_goal: anchor out of range");
  const double u = uniform01(rng);
  if (u < cfg.p_cur) return ds.state(traj, t);
  if (u < cfg.p_cur + cfg.p_traj || cfg.p_rand <= 0.0) {
    const std::size_t remaining = ds.length(traj) - 1 - t;
    if (remaining == 0) return ds.state(traj, t);
    std::size_t delta;
    if (cfg.geometric) delta = truncated_geometric(cfg.geometric_param.value_or(1.0 - discount), remaining, rng);
    else delta = 1 + static_cast<std::size_t>(uniform_index(rng, remaining));
    return ds.state(traj, t + delta);
  }
  return sample_rho_state(ds, rng);
}

/// Uniform direction scaled to radius sqrt(d).
inline Vector sphere_latent(int d, Rng& rng) {
  if (d < 1) throw ConfigError("latent dimension must be >= 1");
  Vector z(d);
  double n2 = 0.0;
  do {
    for (int i = 0; i < d; ++i) z[i] = standard_normal(rng);
    n2 = z.squaredNorm();
  } while (n2 == 0.0);
  return z * (std::sqrt(static_cast<double>(d)) / std::sqrt(n2));
}

/// Rescales to norm sqrt(d); the zero vector is returned unchanged.
inline Vector normalize_latent(const Vector& z) {
  const double n = z.norm();
  if (n == 0.0) return z;
  return z * (std::sqrt(static_cast<double>(z.size())) / n);
}

/// With probability mix_prob a sphere latent, otherwise B(s) of a rho-random
/// state rescaled to the sphere. A zero B row falls back to a sphere draw.
inline Vector sample_latent(const OfflineDataset& ds, const Matrix& backward, int d, double mix_prob, Rng& rng) {
  if (d < 1) throw ConfigError("sample_latent: d must be >= 1");
  if (mix_prob < 0.0 || mix_prob > 1.0) throw ConfigError("sample_latent: mix_prob must lie in [0,1]");
  require_dims(backward.cols() == d, "sample_latent: backward table width differs from d");
  if (uniform01(rng) < mix_prob) return sphere_latent(d, rng);
  const int s = sample_rho_state(ds, rng);
  const Vector b = backward.row(s).transpose();
  if (b.squaredNorm() == 0.0) return sphere_latent(d, rng);
  return normalize_latent(b);
}

/// Linear schedule for the sphere-latent probability across epochs.
struct LatentMixSchedule {
  double start = 0.0;
  double end = 0.5;

  double at(int epoch, int n_epochs) const {
    if (n_epochs <= 1) return end;
    const double frac = std::clamp(static_cast<double>(epoch) / (n_epochs - 1), 0.0, 1.0);
    return start + (end - start) * frac;
  }
};

// ---------------------------------------------------------------------------
// Binary format: "SSDS", u32 version, u64 n_traj, then per trajectory
// u32 n_states, u32 states[n_states], u32 n_actions, u32 actions[n_actions].
// All little-endian. A JSON sidecar (<path>.json) records n_states and seed.

inline constexpr std::uint32_t kDatasetVersion = 1;

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}
inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated dataset file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
inline std::uint64_t get_u64(std::istream& is) {
  const std::uint64_t lo = get_u32(is);
  const std::uint64_t hi = get_u32(is);
  return lo | (hi << 32);
}
}  // namespace detail

inline void save_dataset(const OfflineDataset& ds, const std::string& path, const nlohmann::json& config = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path);
  out.write("SSDS", 4);
  detail::put_u32(out, kDatasetVersion);
  detail::put_u64(out, ds.n_trajectories());
  for (std::size_t i = 0; i < ds.n_trajectories(); ++i) {
    const std::size_t len = ds.length(i);
    detail::put_u32(out, static_cast<std::uint32_t>(len));
    for (std::size_t t = 0; t < len; ++t) detail::put_u32(out, static_cast<std::uint32_t>(ds.state(i, t)));
    detail::put_u32(out, static_cast<std::uint32_t>(len - 1));
    for (std::size_t t = 0; t + 1 < len; ++t) detail::put_u32(out, static_cast<std::uint32_t>(ds.action(i, t)));
  }
  if (!out) throw IoError("write failed: " + path);
  std::ofstream side(path + ".json");
  if (!side) throw IoError("cannot open " + path + ".json");
  nlohmann::json j{{"n_states", ds.n_states}, {"seed", ds.seed}, {"n_traj", ds.n_trajectories()}, {"config", config}};
  side << j.dump(1) << '\n';
}

inline OfflineDataset load_dataset(const std::string& path) {
  std::ifstream side(path + ".json");
  if (!side) throw IoError("missing dataset sidecar " + path + ".json");
  nlohmann::json j;
  try {
    side >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ".json: " + e.what());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "SSDS") throw IoError(path + ": bad magic");
  if (detail::get_u32(in) != kDatasetVersion) throw IoError(path + ": unsupported version");
  OfflineDataset ds;
  ds.n_states = j.at("n_states").get<int>();
  ds.seed = j.at("seed").get<std::uint64_t>();
  const std::uint64_t n_traj = detail::get_u64(in);
  for (std::uint64_t i = 0; i < n_traj; ++i) {
    Trajectory tr;
    const std::uint32_t ns = detail::get_u32(in);
    tr.states.resize(ns);
    for (auto& s : tr.states) s = static_cast<int>(detail::get_u32(in));
    const std::uint32_t na = detail::get_u32(in);
    tr.actions.resize(na);
    for (auto& a : tr.actions) a = static_cast<int>(detail::get_u32(in));
    ds.append(tr);
  }
  ds.recompute_rho();
  return ds;
}

}  // namespace switchsim::data
