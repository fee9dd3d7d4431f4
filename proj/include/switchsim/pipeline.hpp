#pragma once

// Run configuration, per-stage seeds, the verify/solve commands and the
// gen-data -> train-rep -> train-high / train-low -> eval pipeline.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "switchsim/common.hpp"
#include "switchsim/dataset.hpp"
#include "switchsim/eval.hpp"
#include "switchsim/exact.hpp"
#include "switchsim/fb.hpp"
#include "switchsim/hier.hpp"
#include "switchsim/maze.hpp"
#include "switchsim/mdp.hpp"
#include "switchsim/nn.hpp"

namespace switchsim::pipeline {

inline constexpr const char* kVersion = "0.1.0";

namespace fs = std::filesystem;

struct RunConfig {
  std::string maze_config = "configs/medium_maze.json";
  std::string out_dir = "runs/medium";
  std::uint64_t seed = 0;

  // dataset
  std::size_t n_traj = 100000;
  std::size_t max_len = 100;

  // representation
  int d = 24;
  std::vector<int> f_hidden{256, 256};
  int epochs = 250;
  int steps_per_epoch = 1000;
  int batch = 32;
  double lr = 1e-3;
  double tau_expectile = 0.7;
  double tau_target = 0.005;
  double orthonorm_coeff = 1e-4;
  double p_query_current = 0.2;
  double latent_mix_start = 0.0;
  double latent_mix_end = 0.5;
  bool exact_intrinsic = false;

  // policies
  std::vector<int> policy_hidden{256, 256};
  int policy_epochs = 50;
  int policy_steps_per_epoch = 1000;
  double policy_lr = 3e-4;
  double actor_latent_mix = 0.5;
  double beta_low = 3.0;
  double beta_high = 0.1;
  double adv_clip = 5.0;
  std::string advantage = "proxy";

  // evaluation
  int episodes = 50;
  int eval_seeds = 5;
  int n_boot = 2000;
  std::size_t embed_samples = 100000;
  std::string act_mode = "stochastic";

  void validate() const {
    if (n_traj < 1 || max_len < 2) throw ConfigError("n_traj must be >= 1 and max_len >= 2");
    if (d < 1) throw ConfigError("d must be >= 1");
    if (epochs < 0 || steps_per_epoch < 0 || policy_epochs < 0 || policy_steps_per_epoch < 0)
      throw ConfigError("epoch and step counts must be >= 0");
    if (batch < 2) throw ConfigError("batch must be >= 2");
    if (!(lr > 0.0) || !(policy_lr > 0.0)) throw ConfigError("learning rates must be > 0");
    fb::ExpectileConfig{tau_expectile}.validate();
    if (!(tau_target > 0.0 && tau_target <= 1.0)) throw ConfigError("tau_target must lie in (0,1]");
    if (orthonorm_coeff < 0.0) throw ConfigError("orthonorm_coeff must be >= 0");
    for (double p : {p_query_current, latent_mix_start, latent_mix_end, actor_latent_mix})
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("probabilities must lie in [0,1]");
    hier::AwrConfig{beta_low, beta_high, adv_clip}.validate();
    hier::parse_variant(advantage);
    if (episodes < 1 || eval_seeds < 2 || n_boot < 1)
      throw ConfigError("need episodes >= 1, eval_seeds >= 2 and n_boot >= 1");
    if (act_mode != "greedy" && act_mode != "stochastic") throw ConfigError("act_mode must be greedy or stochastic");
    for (int h : f_hidden)
      if (h < 1) throw ConfigError("hidden sizes must be positive");
    for (int h : policy_hidden)
      if (h < 1) throw ConfigError("hidden sizes must be positive");
  }

  nlohmann::json to_json() const {
    return {{"maze_config", maze_config},
            {"out_dir", out_dir},
            {"seed", seed},
            {"n_traj", n_traj},
            {"max_len", max_len},
            {"d", d},
            {"f_hidden", f_hidden},
            {"epochs", epochs},
            {"steps_per_epoch", steps_per_epoch},
            {"batch", batch},
            {"lr", lr},
            {"tau_expectile", tau_expectile},
            {"tau_target", tau_target},
            {"orthonorm_coeff", orthonorm_coeff},
            {"p_query_current", p_query_current},
            {"latent_mix_start", latent_mix_start},
            {"latent_mix_end", latent_mix_end},
            {"exact_intrinsic", exact_intrinsic},
            {"policy_hidden", policy_hidden},
            {"policy_epochs", policy_epochs},
            {"policy_steps_per_epoch", policy_steps_per_epoch},
            {"policy_lr", policy_lr},
            {"actor_latent_mix", actor_latent_mix},
            {"beta_low", beta_low},
            {"beta_high", beta_high},
            {"adv_clip", adv_clip},
            {"advantage", advantage},
            {"episodes", episodes},
            {"eval_seeds", eval_seeds},
            {"n_boot", n_boot},
            {"embed_samples", embed_samples},
            {"act_mode", act_mode}};
  }

  /// Overlays the keys present in `j`; unknown keys are rejected.
  static RunConfig from_json(const nlohmann::json& j) { return from_json(j, RunConfig()); }

  static RunConfig from_json(const nlohmann::json& j, const RunConfig& base) {
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    nlohmann::json merged = base.to_json();
    for (const auto& [k, v] : j.items()) {
      if (!merged.contains(k)) throw ConfigError("unknown run config key '" + k + "'");
      merged[k] = v;
    }
    RunConfig c;
    try {
      c.maze_config = merged.at("maze_config").get<std::string>();
      c.out_dir = merged.at("out_dir").get<std::string>();
      c.seed = merged.at("seed").get<std::uint64_t>();
      c.n_traj = merged.at("n_traj").get<std::size_t>();
      c.max_len = merged.at("max_len").get<std::size_t>();
      c.d = merged.at("d").get<int>();
      c.f_hidden = merged.at("f_hidden").get<std::vector<int>>();
      c.epochs = merged.at("epochs").get<int>();
      c.steps_per_epoch = merged.at("steps_per_epoch").get<int>();
      c.batch = merged.at("batch").get<int>();
      c.lr = merged.at("lr").get<double>();
      c.tau_expectile = merged.at("tau_expectile").get<double>();
      c.tau_target = merged.at("tau_target").get<double>();
      c.orthonorm_coeff = merged.at("orthonorm_coeff").get<double>();
      c.p_query_current = merged.at("p_query_current").get<double>();
      c.latent_mix_start = merged.at("latent_mix_start").get<double>();
      c.latent_mix_end = merged.at("latent_mix_end").get<double>();
      c.exact_intrinsic = merged.at("exact_intrinsic").get<bool>();
      c.policy_hidden = merged.at("policy_hidden").get<std::vector<int>>();
      c.policy_epochs = merged.at("policy_epochs").get<int>();
      c.policy_steps_per_epoch = merged.at("policy_steps_per_epoch").get<int>();
      c.policy_lr = merged.at("policy_lr").get<double>();
      c.actor_latent_mix = merged.at("actor_latent_mix").get<double>();
      c.beta_low = merged.at("beta_low").get<double>();
      c.beta_high = merged.at("beta_high").get<double>();
      c.adv_clip = merged.at("adv_clip").get<double>();
      c.advantage = merged.at("advantage").get<std::string>();
      c.episodes = merged.at("episodes").get<int>();
      c.eval_seeds = merged.at("eval_seeds").get<int>();
      c.n_boot = merged.at("n_boot").get<int>();
      c.embed_samples = merged.at("embed_samples").get<std::size_t>();
      c.act_mode = merged.at("act_mode").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad run config value: ") + e.what());
    }
    return c;
  }

  fb::TrainConfig rep_train_config(std::uint64_t stage) const {
    fb::TrainConfig t;
    t.epochs = epochs;
    t.steps_per_epoch = steps_per_epoch;
    t.batch = batch;
    t.p_query_current = p_query_current;
    t.latent_mix = {latent_mix_start, latent_mix_end};
    t.orthonorm_coeff = orthonorm_coeff;
    t.expectile.tau = tau_expectile;
    t.intrinsic = exact_intrinsic ? fb::IntrinsicReward::kExact : fb::IntrinsicReward::kSimplified;
    t.seed = stage;
    return t;
  }

  hier::PolicyTrainConfig policy_train_config(std::uint64_t stage) const {
    hier::PolicyTrainConfig p;
    p.epochs = policy_epochs;
    p.steps_per_epoch = policy_steps_per_epoch;
    p.batch = batch;
    p.lr = policy_lr;
    p.latent_mix = actor_latent_mix;
    p.awr = {beta_low, beta_high, adv_clip};
    p.variant = hier::parse_variant(advantage);
    p.seed = stage;
    return p;
  }
};

/// Loads a run config; a relative maze_config path is resolved against the
/// config file's directory.
inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open run config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  RunConfig c = RunConfig::from_json(j);
  const fs::path maze(c.maze_config);
  if (maze.is_relative()) c.maze_config = (fs::path(path).parent_path() / maze).lexically_normal().string();
  return c;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a(c.to_json().dump())); }

inline std::uint64_t file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a(bytes);
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

inline void write_json_file(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

/// Stage seeds: derive_seed(master, fnv1a(stage name)).
inline std::uint64_t seed_for(const RunConfig& c, const std::string& stage) { return stage_seed(c.seed, stage); }

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"gen-data", "train-rep", "train-high", "train-low", "embed", "eval"};
  return names;
}

using Logger = std::function<void(const std::string&)>;

// ---------------------------------------------------------------------------
// verify: differential checks of the switching identities on random MDPs.

struct IdentityCheck {
  std::string name;
  double max_deviation = 0.0;
  double tolerance = 0.0;
  bool passed = true;
};

struct VerifyReport {
  int n_mdps = 0;
  std::uint64_t seed = 0;
  std::vector<IdentityCheck> checks;
  std::vector<std::string> warnings;

  bool passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return true;
  }

  nlohmann::json to_json() const {
    nlohmann::json cs = nlohmann::json::array();
    for (const auto& c : checks)
      cs.push_back({{"identity", c.name},
                    {"max_deviation", c.max_deviation},
                    {"tolerance", c.tolerance},
                    {"passed", c.passed}});
    return {{"n_mdps", n_mdps}, {"seed", seed}, {"passed", passed()}, {"checks", cs}, {"warnings", warnings}};
  }
};

/// Random instance of the verification family: |S| in [2,12], |A| in [1,3],
/// gamma in {0.9, 0.95}, dense transitions, random pi_w and pi, random reward.
struct VerifyInstance {
  Mdp mdp;
  PolicyTable pi_w;
  PolicyTable pi;
  RewardVector r;
};

inline VerifyInstance verify_instance(std::uint64_t seed, int index) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(index)));
  const int n = 2 + static_cast<int>(uniform_index(rng, 11));
  const int na = 1 + static_cast<int>(uniform_index(rng, 3));
  const double gamma = uniform_index(rng, 2) == 0 ? 0.9 : 0.95;
  VerifyInstance inst;
  inst.mdp = random_mdp(n, na, gamma, rng);
  inst.pi_w = random_policy(n, na, rng);
  inst.pi = random_policy(n, na, rng);
  inst.r = RewardVector{Vector(n)};
  for (int s = 0; s < n; ++s) inst.r.values[s] = 2.0 * uniform01(rng) - 1.0;
  return inst;
}

/// `fault` names an identity whose closed form is deliberately corrupted.
inline VerifyReport run_verify(int n_mdps, std::uint64_t seed, const std::string& fault = {}) {
  VerifyReport rep;
  rep.n_mdps = n_mdps;
  rep.seed = seed;
  if (n_mdps <= 0) rep.warnings.push_back("no MDPs requested: every identity passes vacuously");
  IdentityCheck measure{"switching_measure_formula_vs_oracle", 0.0, 1e-8};
  IdentityCheck advantage{"switching_advantage_vs_oracle", 0.0, 1e-8};
  IdentityCheck hitting{"hitting_discount_ratio", 0.0, 1e-10};
  IdentityCheck myers{"switching_lower_bound_gap", 0.0, 1e-10};
  IdentityCheck same_policy{"switching_same_policy_reduction", 0.0, 1e-10};
  IdentityCheck k_zero{"k0_switching_reduction", 0.0, 1e-10};
  IdentityCheck row_sums{"successor_row_sums", 0.0, 1e-9};
  IdentityCheck diagonal{"successor_diagonal_at_least_one", 0.0, 0.0};
  IdentityCheck a_fb_self{"a_fb_self_subgoal_zero", 0.0, 0.0};
  IdentityCheck surrogate{"a_fb_exact_surrogate", 0.0, 1e-9};
  const double fault_eps = 1e-6;
  for (int i = 0; i < n_mdps; ++i) {
    const VerifyInstance inst = verify_instance(seed, i);
    const Mdp& mdp = inst.mdp;
    const int n = mdp.n_states;
    const auto m_pw = exact::successor_measure(mdp, inst.pi_w);
    const auto m_p = exact::successor_measure(mdp, inst.pi);
    const Vector v_p = exact::value_of(m_p, inst.r);
    const Vector v_pw = exact::value_of(m_pw, inst.r);
    for (const auto* m : {&m_pw, &m_p}) {
      const double total = 1.0 / (1.0 - mdp.discount);
      row_sums.max_deviation = std::max(row_sums.max_deviation, (m->m.rowwise().sum().array() - total).abs().maxCoeff());
      diagonal.max_deviation = std::max(diagonal.max_deviation, std::max(0.0, 1.0 - m->m.diagonal().minCoeff()));
    }
    const Matrix m_pw_p = exact::k_step_switching_measure(mdp, inst.pi_w, inst.pi, 0);
    k_zero.max_deviation = std::max(k_zero.max_deviation, (m_pw_p - m_p.m).cwiseAbs().maxCoeff());
    for (int w = 0; w < n; ++w) {
      auto formula = exact::switching_measure_formula(m_pw, m_p, w);
      if (fault == "switching_measure") formula.measure(0, 0) += fault_eps;
      const auto oracle = exact::switching_measure_oracle(mdp, inst.pi_w, inst.pi, w);
      measure.max_deviation = std::max(measure.max_deviation, (formula.measure - oracle.measure).cwiseAbs().maxCoeff());

      Vector adv = exact::switching_advantage(mdp, inst.pi_w, inst.pi, w, inst.r);
      if (fault == "switching_advantage") adv[0] += fault_eps;
      const Vector oracle_adv = (oracle.measure - m_p.m) * inst.r.values;
      advantage.max_deviation = std::max(advantage.max_deviation, (adv - oracle_adv).cwiseAbs().maxCoeff());

      Vector h = exact::hitting_discount(mdp, inst.pi, w);
      if (fault == "hitting_discount") h[0] += fault_eps;
      hitting.max_deviation =
          std::max(hitting.max_deviation, (h * m_p.m(w, w) - m_p.m.col(w)).cwiseAbs().maxCoeff());

      Matrix gap = exact::myers_lower_bound_gap(mdp, inst.pi_w, inst.pi, w);
      if (fault == "lower_bound") gap(0, 0) = -1.0;
      myers.max_deviation = std::max(myers.max_deviation, std::max(0.0, -gap.minCoeff()));

      const auto same = exact::switching_measure_formula(m_p, m_p, w);
      same_policy.max_deviation = std::max(same_policy.max_deviation, (same.measure - m_p.m).cwiseAbs().maxCoeff());

      for (int s = 0; s < n; ++s) {
        const auto t = hier::exact_surrogate_terms(m_pw.m, v_pw, v_p, s, w);
        surrogate.max_deviation =
            std::max(surrogate.max_deviation, std::abs(hier::advantage_from_terms(t) - oracle_adv[s]));
      }
    }
    // a_fb(s, s, z) on a random untrained FB model over this state space.
    fb::FbModel model({n, 4, {8}, 0.005, 3e-4, derive_seed(seed, 1000 + static_cast<std::uint64_t>(i))});
    Rng zr(derive_seed(seed, 2000 + static_cast<std::uint64_t>(i)));
    for (int s = 0; s < n; ++s) {
      const auto terms = hier::advantage_terms(model, s, s, data::sphere_latent(4, zr));
      if (terms.degenerate()) continue;
      double v = hier::advantage_from_terms(terms);
      if (fault == "a_fb") v += fault_eps;
      a_fb_self.max_deviation = std::max(a_fb_self.max_deviation, std::abs(v));
    }
  }
  for (auto* c : {&measure, &advantage, &hitting, &myers, &same_policy, &k_zero, &row_sums, &diagonal, &a_fb_self,
                  &surrogate}) {
    c->passed = c->max_deviation <= c->tolerance;
    rep.checks.push_back(*c);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// solve: exact heatmaps per task.

struct SolveOutputs {
  std::vector<std::string> files;
};

/// Per task: reward, optimal value, and, as functions of the subgoal w for the
/// task's first start state s, the switching advantage A_s^{pi_w -> pi*}(r) and
/// its pre-hit part, with pi_w the optimal policy for reaching w.
inline SolveOutputs solve(const maze::MazeConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const auto env = maze::build_mdp(cfg.spec);
  const int n = env.map.n_states();
  std::vector<PolicyTable> goal_policies;
  goal_policies.reserve(n);
  for (int w = 0; w < n; ++w) goal_policies.push_back(exact::optimal_goal_policy(env.mdp, w));
  SolveOutputs out;
  for (const auto& task : cfg.tasks) {
    const RewardVector r = maze::reward_vector(task.reward, env.map);
    const auto vi = exact::value_iteration(env.mdp, r);
    const int s = task.start_cells.empty() ? 0 : env.map.state(task.start_cells.front());
    Vector adv(n), pre(n);
    for (int w = 0; w < n; ++w) {
      adv[w] = exact::switching_advantage(env.mdp, goal_policies[w], vi.policy, w, r)[s];
      pre[w] = exact::prehit_advantage(env.mdp, goal_policies[w], vi.policy, w, r)[s];
    }
    const std::string base = (fs::path(out_dir) / task.name).string();
    eval::export_heatmap(r.values, env.map, base + "_reward.csv");
    eval::export_heatmap(vi.values, env.map, base + "_value.csv");
    eval::export_heatmap(adv, env.map, base + "_switching_advantage.csv");
    eval::export_heatmap(pre, env.map, base + "_prehit.csv");
    for (const char* suffix : {"_reward.csv", "_value.csv", "_switching_advantage.csv", "_prehit.csv"})
      out.files.push_back(base + suffix);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline stages

struct Paths {
  fs::path root;
  fs::path dataset() const { return root / "dataset.bin"; }
  std::string fb() const { return (root / "fb").string(); }
  std::string high() const { return (root / "high").string(); }
  std::string low() const { return (root / "low").string(); }
  fs::path report() const { return root / "report.json"; }
  fs::path manifest() const { return root / "manifest.json"; }
  fs::path exports() const { return root / "exports"; }
};

inline nlohmann::json dataset_identity(const RunConfig& c) {
  return {{"maze_hash", hex64(file_hash(c.maze_config))},
          {"n_traj", c.n_traj},
          {"max_len", c.max_len},
          {"seed", seed_for(c, "gen-data")},
          {"policy", "uniform"}};
}

/// Loads the cached dataset when its recorded identity matches, otherwise
/// generates trajectories under the uniform random policy and writes them.
inline data::OfflineDataset stage_gen_data(const RunConfig& c, const maze::MazeMdp& env, const Paths& p,
                                           const Logger& log) {
  const nlohmann::json ident = dataset_identity(c);
  const fs::path side = p.dataset().string() + ".json";
  if (fs::exists(p.dataset()) && fs::exists(side)) {
    try {
      const nlohmann::json j = nn::read_json(side.string());
      if (j.contains("config") && j.at("config") == ident) {
        if (log) log("gen-data: using cached " + p.dataset().string());
        return data::load_dataset(p.dataset().string());
      }
    } catch (const Error&) {
    }
  }
  if (log) log("gen-data: " + std::to_string(c.n_traj) + " trajectories");
  const auto ds = data::generate(env.mdp, PolicyTable::uniform(env.mdp.n_states, env.mdp.n_actions), c.n_traj,
                                 c.max_len, seed_for(c, "gen-data"));
  data::save_dataset(ds, p.dataset().string(), ident);
  return ds;
}

inline fb::FbModel stage_train_rep(const RunConfig& c, const maze::MazeMdp& env, const data::OfflineDataset& ds,
                                   const Paths& p, const Logger& log) {
  const std::uint64_t seed = seed_for(c, "train-rep");
  fb::FbModel model({env.map.n_states(), c.d, c.f_hidden, c.tau_target, c.lr, seed});
  const auto tc = c.rep_train_config(derive_seed(seed, 1));
  const auto trace = fb::train(model, ds, env.mdp.discount, tc, [&](int epoch, double loss) {
    if (log && (epoch % 10 == 9 || epoch + 1 == tc.epochs))
      log("train-rep: epoch " + std::to_string(epoch + 1) + " loss " + format_double(loss));
  });
  fb::save_model(p.fb(), model);
  write_json_file(p.root / "rep_trace.json", {{"config", tc.to_json()}, {"epoch_mean_loss", trace.epoch_mean_loss}});
  return model;
}

template <class Policy>
Policy stage_train_policy(const RunConfig& c, const fb::FbModel& model, const data::OfflineDataset& ds,
                          double discount, const std::string& stage, const Paths& p, const Logger& log) {
  const std::uint64_t seed = seed_for(c, stage);
  const bool high = stage == "train-high";
  Policy pol(model.n_states, model.d, high ? model.n_states : maze::kNumActions, c.policy_hidden, seed);
  const auto pc = c.policy_train_config(derive_seed(seed, 1));
  std::vector<double> trace;
  if constexpr (std::is_same_v<Policy, hier::HighPolicy>) trace = hier::train_high(pol, model, ds, discount, pc);
  else trace = hier::train_low(pol, model, ds, pc);
  std::vector<double> epoch_mean;
  for (int e = 0; e < pc.epochs && pc.steps_per_epoch > 0; ++e) {
    double s = 0.0;
    for (int i = 0; i < pc.steps_per_epoch; ++i) s += trace[static_cast<std::size_t>(e) * pc.steps_per_epoch + i];
    epoch_mean.push_back(s / pc.steps_per_epoch);
  }
  if (log && !epoch_mean.empty()) log(stage + ": final epoch loss " + format_double(epoch_mean.back()));
  hier::save_policy(high ? p.high() : p.low(), pol, high ? "high_policy" : "low_policy");
  write_json_file(p.root / (stage + "_trace.json"), {{"config", pc.to_json()}, {"epoch_mean_loss", epoch_mean}});
  return pol;
}

/// Normalized reward embedding of a task.
inline Vector task_latent(const RunConfig& c, const fb::FbModel& model, const data::OfflineDataset& ds,
                          const maze::MazeMdp& env, const maze::Task& task, std::size_t task_index) {
  const RewardVector r = maze::reward_vector(task.reward, env.map);
  const auto emb = fb::reward_embedding(model, r, ds, c.embed_samples,
                                        derive_seed(seed_for(c, "embed"), task_index), task.name);
  return data::normalize_latent(emb.z);
}

struct MethodResult {
  std::string method;
  std::vector<eval::TaskEvaluation> tasks;
};

inline Matrix headline_matrix(const MethodResult& m) {
  Matrix out(static_cast<Eigen::Index>(m.tasks.size()), static_cast<Eigen::Index>(m.tasks.front().returns.per_seed.size()));
  for (std::size_t t = 0; t < m.tasks.size(); ++t) {
    const auto& head = m.tasks[t].goal_task ? m.tasks[t].success : m.tasks[t].returns;
    for (std::size_t j = 0; j < head.per_seed.size(); ++j)
      out(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)) = head.per_seed[j];
  }
  return out;
}

/// Evaluates the hierarchical agent (unless disabled), the agent without the
/// high level, and the uniform random policy on every task; IQMs are computed on
/// per-task min-max normalized scores across these methods.
inline nlohmann::json stage_eval(const RunConfig& c, const maze::MazeMdp& env, const maze::MazeConfig& mcfg,
                                 const fb::FbModel& model, const data::OfflineDataset& ds,
                                 const std::optional<hier::HighPolicy>& high, const hier::LowPolicy& low,
                                 const Paths& p, int n_threads, const Logger& log) {
  const std::uint64_t seed = seed_for(c, "eval");
  const hier::ActMode mode = c.act_mode == "greedy" ? hier::ActMode::kGreedy : hier::ActMode::kStochastic;
  std::vector<Vector> latents;
  for (std::size_t t = 0; t < mcfg.tasks.size(); ++t)
    latents.push_back(task_latent(c, model, ds, env, mcfg.tasks[t], t));

  const hier::HierAgent flat(model, high ? *high : hier::HighPolicy{}, low, false);
  std::optional<hier::HierAgent> full;
  if (high) full.emplace(model, *high, low, true);

  std::vector<MethodResult> methods;
  auto run_method = [&](const std::string& name, const std::function<eval::Controller(std::size_t)>& make) {
    MethodResult m{name, {}};
    for (std::size_t t = 0; t < mcfg.tasks.size(); ++t) {
      const auto ctl = make(t);
      m.tasks.push_back(eval::evaluate_task(env, ctl, mcfg.tasks[t], c.episodes, c.eval_seeds,
                                            derive_seed(seed, t), n_threads));
    }
    if (log) log("eval: " + name + " done");
    methods.push_back(std::move(m));
  };
  if (full)
    run_method("fb_pi_switch", [&](std::size_t t) { return eval::agent_controller(*full, latents[t], mode); });
  run_method("no_high_policy", [&](std::size_t t) { return eval::agent_controller(flat, latents[t], mode); });
  run_method("uniform_random", [&](std::size_t) { return eval::uniform_controller(maze::kNumActions); });

  std::vector<Matrix> mats;
  for (const auto& m : methods) mats.push_back(headline_matrix(m));
  const auto bounds = eval::task_bounds(mats);

  nlohmann::json jm = nlohmann::json::object();
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    const auto agg = eval::iqm_with_ci(mats[mi], c.n_boot, derive_seed(seed, 10000 + mi), bounds);
    nlohmann::json tasks = nlohmann::json::array();
    for (std::size_t t = 0; t < methods[mi].tasks.size(); ++t) {
      Matrix row = mats[mi].row(static_cast<Eigen::Index>(t));
      const std::optional<std::vector<eval::TaskBounds>> tb = std::vector<eval::TaskBounds>{bounds[t]};
      nlohmann::json tr;
      try {
        tr = eval::task_report(methods[mi].tasks[t], eval::iqm_with_ci(row, c.n_boot, derive_seed(seed, 20000 + t), tb));
      } catch (const ConfigError&) {
        tr = eval::task_report(methods[mi].tasks[t], eval::iqm_with_ci(row, c.n_boot, derive_seed(seed, 20000 + t)));
        tr["normalization"] = "degenerate; raw scores";
      }
      tasks.push_back(tr);
    }
    jm[methods[mi].method] = {{"tasks", tasks},
                              {"iqm_normalized", agg.iqm},
                              {"ci_normalized", {agg.ci_low, agg.ci_high}},
                              {"warnings", agg.warnings}};
  }

  // Subgoal traces of the first episode of every task.
  fs::create_directories(p.exports());
  for (std::size_t t = 0; t < mcfg.tasks.size(); ++t) {
    const hier::HierAgent& agent = full ? *full : flat;
    const auto rec = eval::rollout(env, eval::agent_controller(agent, latents[t], mode), mcfg.tasks[t],
                                   eval::episode_seed(derive_seed(seed, t), 0, 0), mcfg.tasks[t].episode_length);
    eval::write_subgoal_trace((p.exports() / (mcfg.tasks[t].name + "_trace.csv")).string(), rec);
  }

  nlohmann::json report{{"methods", jm},
                        {"episodes", c.episodes},
                        {"eval_seeds", c.eval_seeds},
                        {"act_mode", c.act_mode},
                        {"hierarchical", high.has_value()}};
  write_json_file(p.report(), report);
  return report;
}

/// Learned heatmaps per task: V(s; z_r) over s, and A_FB / its proxy / the
/// pre-hit part as functions of w at the task's first start state.
inline std::vector<std::string> export_learned(const RunConfig& c, const maze::MazeMdp& env,
                                               const maze::MazeConfig& mcfg, const fb::FbModel& model,
                                               const data::OfflineDataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<std::string> files;
  const int n = model.n_states;
  for (std::size_t t = 0; t < mcfg.tasks.size(); ++t) {
    const auto& task = mcfg.tasks[t];
    const Vector z = task_latent(c, model, ds, env, task, t);
    const int s = task.start_cells.empty() ? 0 : env.map.state(task.start_cells.front());
    std::vector<int> ss(n, s), ws(n);
    for (int w = 0; w < n; ++w) ws[w] = w;
    const auto terms = hier::advantage_terms(model, ss, ws, z.replicate(1, n));
    Vector full(n), proxy(n), pre(n);
    for (int w = 0; w < n; ++w) {
      const auto& tm = terms[w];
      const bool bad = tm.degenerate();
      full[w] = bad ? 0.0 : hier::advantage_from_terms(tm);
      proxy[w] = bad ? 0.0 : hier::proxy_from_terms(tm);
      pre[w] = bad ? 0.0 : tm.s_zw_z - tm.ratio() * tm.w_zw_z;
    }
    const std::string base = (dir / task.name).string();
    eval::export_heatmap(fb::values_all_states(model, z), env.map, base + "_learned_value.csv");
    eval::export_heatmap(full, env.map, base + "_a_fb.csv");
    eval::export_heatmap(proxy, env.map, base + "_a_fb_proxy.csv");
    eval::export_heatmap(pre, env.map, base + "_a_fb_prehit.csv");
    for (const char* suffix : {"_learned_value.csv", "_a_fb.csv", "_a_fb_proxy.csv", "_a_fb_prehit.csv"})
      files.push_back(base + suffix);
  }
  return files;
}

struct PipelineOptions {
  bool hierarchical = true;
  std::string stop_after;  // "", "data", "rep", "high", "low"
  int eval_threads = 1;
};

/// Writes a manifest listing the config, its hash, per-stage seeds, versions
/// and a content hash of every artifact.
inline void write_manifest(const RunConfig& c, const PipelineOptions& opt, const Paths& p,
                           const std::vector<std::string>& stages) {
  nlohmann::json seeds = nlohmann::json::object();
  for (const auto& s : stage_names()) seeds[s] = seed_for(c, s);
  nlohmann::json artifacts = nlohmann::json::object();
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(p.root))
    if (e.is_regular_file() && e.path() != p.manifest()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) artifacts[fs::relative(f, p.root).generic_string()] = hex64(file_hash(f.string()));
  write_json_file(p.manifest(), {{"config", c.to_json()},
                                 {"config_hash", config_hash(c)},
                                 {"master_seed", c.seed},
                                 {"stage_seeds", seeds},
                                 {"stages", stages},
                                 {"hierarchical", opt.hierarchical},
                                 {"versions",
                                  {{"switchsim", kVersion},
                                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                                 std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                                 std::to_string(EIGEN_MINOR_VERSION)},
                                   {"dataset_format", data::kDatasetVersion}}},
                                 {"artifacts", artifacts}});
}

/// Thrown with the failing stage's name prepended.
struct StageError : Error {
  using Error::Error;
};

template <class F>
auto run_stage(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(name + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError(name + ": " + e.what());
  } catch (const Error& e) {
    throw StageError(name + ": " + e.what());
  }
}

inline nlohmann::json run_pipeline(const RunConfig& c, const PipelineOptions& opt, const Logger& log = {}) {
  c.validate();
  if (!opt.stop_after.empty() && opt.stop_after != "data" && opt.stop_after != "rep" && opt.stop_after != "high" &&
      opt.stop_after != "low")
    throw ConfigError("unknown stage '" + opt.stop_after + "' (expected data, rep, high or low)");
  const maze::MazeConfig mcfg = maze::load_maze_config(c.maze_config);
  const auto env = maze::build_mdp(mcfg.spec);
  Paths p{c.out_dir};
  fs::create_directories(p.root);
  std::vector<std::string> stages;
  auto finish = [&](const nlohmann::json& result) {
    write_manifest(c, opt, p, stages);
    return result;
  };

  const auto ds = run_stage("gen-data", [&] { return stage_gen_data(c, env, p, log); });
  stages.push_back("gen-data");
  if (opt.stop_after == "data") return finish({{"stopped_after", "data"}});

  const auto model = run_stage("train-rep", [&] { return stage_train_rep(c, env, ds, p, log); });
  stages.push_back("train-rep");
  if (opt.stop_after == "rep") return finish({{"stopped_after", "rep"}});

  std::optional<hier::HighPolicy> high;
  if (opt.hierarchical) {
    high = run_stage("train-high", [&] {
      return stage_train_policy<hier::HighPolicy>(c, model, ds, env.mdp.discount, "train-high", p, log);
    });
    stages.push_back("train-high");
  }
  if (opt.stop_after == "high") return finish({{"stopped_after", "high"}});

  const auto low = run_stage("train-low", [&] {
    return stage_train_policy<hier::LowPolicy>(c, model, ds, env.mdp.discount, "train-low", p, log);
  });
  stages.push_back("train-low");
  if (opt.stop_after == "low") return finish({{"stopped_after", "low"}});

  const auto report =
      run_stage("eval", [&] { return stage_eval(c, env, mcfg, model, ds, high, low, p, opt.eval_threads, log); });
  stages.push_back("eval");
  run_stage("export", [&] { return export_learned(c, env, mcfg, model, ds, p.exports()); });
  stages.push_back("export");
  return finish(report);
}

/// Evaluation from the checkpoints already present in the output directory.
inline nlohmann::json run_eval(const RunConfig& c, const PipelineOptions& opt, const Logger& log = {}) {
  c.validate();
  const maze::MazeConfig mcfg = maze::load_maze_config(c.maze_config);
  const auto env = maze::build_mdp(mcfg.spec);
  Paths p{c.out_dir};
  const auto ds = run_stage("gen-data", [&] { return stage_gen_data(c, env, p, log); });
  const auto model = run_stage("load", [&] { return fb::load_model(p.fb()); });
  std::optional<hier::HighPolicy> high;
  if (opt.hierarchical)
    high = run_stage("load", [&] { return hier::load_policy<hier::HighPolicy>(p.high(), "high_policy"); });
  const auto low = run_stage("load", [&] { return hier::load_policy<hier::LowPolicy>(p.low(), "low_policy"); });
  const auto report =
      run_stage("eval", [&] { return stage_eval(c, env, mcfg, model, ds, high, low, p, opt.eval_threads, log); });
  run_stage("export", [&] { return export_learned(c, env, mcfg, model, ds, p.exports()); });
  write_manifest(c, opt, p, {"eval", "export"});
  return report;
}

/// Learned heatmaps from the stored representation checkpoint.
inline std::vector<std::string> run_export(const RunConfig& c, const Logger& log = {}) {
  c.validate();
  const maze::MazeConfig mcfg = maze::load_maze_config(c.maze_config);
  const auto env = maze::build_mdp(mcfg.spec);
  Paths p{c.out_dir};
  const auto ds = run_stage("gen-data", [&] { return stage_gen_data(c, env, p, log); });
  const auto model = run_stage("load", [&] { return fb::load_model(p.fb()); });
  return run_stage("export", [&] { return export_learned(c, env, mcfg, model, ds, p.exports()); });
}

}  // namespace switchsim::pipeline
