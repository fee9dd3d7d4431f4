#pragma once

// Hierarchical policies on top of a frozen FB model: the FB switching-advantage
// approximation, AWR training of the subgoal (high) and action (low) policies,
// and cascade execution.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "switchsim/common.hpp"
#include "switchsim/dataset.hpp"
#include "switchsim/fb.hpp"
#include "switchsim/nn.hpp"

namespace switchsim::hier {

inline constexpr double kDegenerateDenominator = 1e-8;

struct AwrConfig {
  double beta_low = 3.0;
  double beta_high = 0.1;
  double adv_clip = 5.0;

  void validate() const {
    if (!(beta_low >= 0.0) || !(beta_high >= 0.0)) throw ConfigError("AWR temperatures must be >= 0");
    if (!(adv_clip > 0.0)) throw ConfigError("advantage clip must be > 0");
  }
};

enum class AdvantageVariant { kProxy, kFull };

inline AdvantageVariant parse_variant(const std::string& name) {
  if (name == "proxy") return AdvantageVariant::kProxy;
  if (name == "full") return AdvantageVariant::kFull;
  throw ConfigError("unknown advantage variant '" + name + "' (expected proxy or full)");
}

inline std::string variant_name(AdvantageVariant v) { return v == AdvantageVariant::kProxy ? "proxy" : "full"; }

/// exp(beta * min(adv, clip)); no lower clip.
inline double awr_weight(double adv, double beta, double clip) { return std::exp(beta * std::min(adv, clip)); }

/// The six inner products entering the FB switching advantage.
struct AdvantageTerms {
  double s_zw_z = 0.0;   // F(s,z_w)^T z
  double w_z_z = 0.0;    // F(w,z)^T z
  double w_zw_z = 0.0;   // F(w,z_w)^T z
  double s_z_z = 0.0;    // F(s,z)^T z
  double s_zw_zw = 0.0;  // F(s,z_w)^T z_w
  double w_zw_zw = 0.0;  // F(w,z_w)^T z_w

  bool degenerate() const { return !(std::abs(w_zw_zw) >= kDegenerateDenominator); }
  double ratio() const { return s_zw_zw / w_zw_zw; }
};

/// F(s,z_w)^T z + ratio * (F(w,z) - F(w,z_w))^T z - F(s,z)^T z, grouped so that
/// w = s and z = z_w give exactly zero.
inline double advantage_from_terms(const AdvantageTerms& t) {
  const double r = t.ratio();
  return (t.s_zw_z - r * t.w_zw_z) + (r * t.w_z_z - t.s_z_z);
}

/// The full advantage without the subtracted ratio * F(w,z_w)^T z term.
inline double proxy_from_terms(const AdvantageTerms& t) {
  const double r = t.ratio();
  return t.s_zw_z + (r * t.w_z_z - t.s_z_z);
}

inline double variant_from_terms(const AdvantageTerms& t, AdvantageVariant v) {
  return v == AdvantageVariant::kProxy ? proxy_from_terms(t) : advantage_from_terms(t);
}

/// The a_fb template filled with exact tabular quantities: values of pi_w and pi
/// under r for the z-terms, M^{pi_w} entries for the ratio.
inline AdvantageTerms exact_surrogate_terms(const Matrix& m_pw, const Vector& v_pw, const Vector& v_p, int s, int w) {
  AdvantageTerms t;
  t.s_zw_z = v_pw[s];
  t.w_z_z = v_p[w];
  t.w_zw_z = v_pw[w];
  t.s_z_z = v_p[s];
  t.s_zw_zw = m_pw(s, w);
  t.w_zw_zw = m_pw(w, w);
  return t;
}

/// z_w = B(w) rescaled to the sqrt(d) sphere.
inline Vector subgoal_latent(const fb::FbModel& model, int w) {
  require_dims(w >= 0 && w < model.n_states, "subgoal out of range");
  return data::normalize_latent(model.b.row(w).transpose());
}

/// Batched terms for sample columns (s_i, w_i, z_i).
inline std::vector<AdvantageTerms> advantage_terms(const fb::FbModel& model, std::span<const int> s,
                                                   std::span<const int> w, const Matrix& z) {
  const auto n = static_cast<Eigen::Index>(s.size());
  require_dims(static_cast<Eigen::Index>(w.size()) == n && z.cols() == n && z.rows() == model.d,
               "advantage_terms: argument sizes differ");
  Matrix zw(model.d, n);
  for (Eigen::Index i = 0; i < n; ++i) zw.col(i) = subgoal_latent(model, w[i]);
  const Matrix f_s_zw = fb::f_batch(model, s, zw);
  const Matrix f_w_zw = fb::f_batch(model, w, zw);
  const Matrix f_w_z = fb::f_batch(model, w, z);
  const Matrix f_s_z = fb::f_batch(model, s, z);
  std::vector<AdvantageTerms> out(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    auto& t = out[static_cast<std::size_t>(i)];
    t.s_zw_z = f_s_zw.col(i).dot(z.col(i));
    t.w_z_z = f_w_z.col(i).dot(z.col(i));
    t.w_zw_z = f_w_zw.col(i).dot(z.col(i));
    t.s_z_z = f_s_z.col(i).dot(z.col(i));
    t.s_zw_zw = f_s_zw.col(i).dot(zw.col(i));
    t.w_zw_zw = f_w_zw.col(i).dot(zw.col(i));
  }
  return out;
}

inline AdvantageTerms advantage_terms(const fb::FbModel& model, int s, int w, const Vector& z) {
  require_dims(s >= 0 && s < model.n_states, "state out of range");
  const int ss[1] = {s};
  const int ws[1] = {w};
  return advantage_terms(model, ss, ws, Matrix(z)).front();
}

inline double a_fb(const fb::FbModel& model, int s, int w, const Vector& z) {
  const AdvantageTerms t = advantage_terms(model, s, w, z);
  if (t.degenerate()) throw NumericalError("degenerate subgoal " + std::to_string(w) + ": |F(w,z_w)^T z_w| < 1e-8");
  return advantage_from_terms(t);
}

inline double a_fb_proxy(const fb::FbModel& model, int s, int w, const Vector& z) {
  const AdvantageTerms t = advantage_terms(model, s, w, z);
  if (t.degenerate()) throw NumericalError("degenerate subgoal " + std::to_string(w) + ": |F(w,z_w)^T z_w| < 1e-8");
  return proxy_from_terms(t);
}

// ---------------------------------------------------------------------------
// Policies

/// Categorical policy over `n_out` classes given (one-hot state, latent).
struct CategoricalPolicy {
  nn::DenseNet net;
  int n_states = 0;
  int d = 0;
  double temperature = 1.0;

  CategoricalPolicy() = default;
  CategoricalPolicy(int n_states_, int d_, int n_out, const std::vector<int>& hidden, std::uint64_t seed)
      : n_states(n_states_), d(d_) {
    std::vector<int> sizes{n_states_ + d_};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(n_out);
    net = nn::DenseNet(sizes, seed);
  }

  int n_out() const { return net.output_dim(); }

  Matrix logits(std::span<const int> states, const Matrix& latents, nn::DenseNet::Cache* cache = nullptr) const {
    return net.forward(fb::encode_inputs(n_states, states, latents), cache);
  }

  Vector logits(int s, const Vector& z) const {
    const int ss[1] = {s};
    return logits(ss, Matrix(z)).col(0);
  }

  Vector probs(int s, const Vector& z) const {
    const Vector l = logits(s, z) / temperature;
    return nn::log_softmax(l).col(0).array().exp();
  }
};

/// pi^h(w | s, z): logits over candidate subgoal states.
struct HighPolicy : CategoricalPolicy {
  using CategoricalPolicy::CategoricalPolicy;
};

/// pi^l(a | s, z): logits over actions.
struct LowPolicy : CategoricalPolicy {
  using CategoricalPolicy::CategoricalPolicy;
};

struct PolicyLossResult {
  double loss = 0.0;
  Vector grad;
  Vector weights;
  std::size_t n_dropped = 0;
};

/// -(1/n) sum_i weight_i * log pi(target_i | s_i, z_i), skipping samples with
/// a negative weight marker.
inline PolicyLossResult weighted_cross_entropy(const CategoricalPolicy& pol, std::span<const int> states,
                                               std::span<const int> targets, const Matrix& latents,
                                               const Vector& weights) {
  const auto n = static_cast<Eigen::Index>(states.size());
  nn::DenseNet::Cache cache;
  const Matrix logits = pol.logits(states, latents, &cache);
  const Matrix logp = nn::log_softmax(logits);
  PolicyLossResult out;
  out.grad = pol.net.zero_grad();
  out.weights = weights;
  Eigen::Index kept = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    if (weights[i] >= 0.0) ++kept;
  out.n_dropped = static_cast<std::size_t>(n - kept);
  if (kept == 0) return out;
  const double inv = 1.0 / static_cast<double>(kept);
  Matrix up = Matrix::Zero(logits.rows(), n);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (weights[i] < 0.0) continue;
    require_dims(targets[i] >= 0 && targets[i] < logits.rows(), "policy target out of range");
    total -= weights[i] * logp(targets[i], i);
    up.col(i) = weights[i] * inv * logp.col(i).array().exp();
    up(targets[i], i) -= weights[i] * inv;
  }
  out.loss = total * inv;
  pol.net.backward(cache, up, out.grad);
  return out;
}

/// AWR subgoal loss: weight exp(beta_high * min(A, clip)) with A the chosen FB
/// advantage of (s, w, z). Samples with a degenerate denominator are dropped.
inline PolicyLossResult plan_loss(const HighPolicy& high, const fb::FbModel& model, std::span<const int> anchors,
                                  std::span<const int> subgoals, const Matrix& latents, const AwrConfig& cfg,
                                  AdvantageVariant variant = AdvantageVariant::kProxy) {
  cfg.validate();
  const auto n = static_cast<Eigen::Index>(anchors.size());
  require_dims(n > 0 && static_cast<Eigen::Index>(subgoals.size()) == n && latents.cols() == n,
               "plan_loss: batch sizes differ");
  const auto terms = advantage_terms(model, anchors, subgoals, latents);
  Vector w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = terms[static_cast<std::size_t>(i)];
    w[i] = t.degenerate() ? -1.0 : awr_weight(variant_from_terms(t, variant), cfg.beta_high, cfg.adv_clip);
  }
  return weighted_cross_entropy(high, anchors, subgoals, latents, w);
}

/// AWR action loss: weight exp(beta_low * min(V(s_{t+1}) - V(s_t), clip)) with V = F(., z)^T z.
inline PolicyLossResult act_loss(const LowPolicy& low, const fb::FbModel& model,
                                 std::span<const data::Transition> batch, const Matrix& latents,
                                 const AwrConfig& cfg) {
  cfg.validate();
  const auto n = static_cast<Eigen::Index>(batch.size());
  require_dims(n > 0 && latents.cols() == n, "act_loss: batch sizes differ");
  std::vector<int> cur(n), next(n), acts(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    cur[i] = batch[i].s;
    next[i] = batch[i].next;
    acts[i] = batch[i].a;
  }
  const Matrix f_cur = fb::f_batch(model, cur, latents);
  const Matrix f_next = fb::f_batch(model, next, latents);
  Vector w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double adv = f_next.col(i).dot(latents.col(i)) - f_cur.col(i).dot(latents.col(i));
    w[i] = awr_weight(adv, cfg.beta_low, cfg.adv_clip);
  }
  return weighted_cross_entropy(low, cur, acts, latents, w);
}

// ---------------------------------------------------------------------------
// Training

struct PolicyTrainConfig {
  int epochs = 250;
  int steps_per_epoch = 1000;
  int batch = 32;
  double lr = 3e-4;
  double latent_mix = 0.5;
  AwrConfig awr{};
  AdvantageVariant variant = AdvantageVariant::kProxy;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"epochs", epochs},         {"steps_per_epoch", steps_per_epoch}, {"batch", batch},
            {"lr", lr},                 {"latent_mix", latent_mix},           {"beta_low", awr.beta_low},
            {"beta_high", awr.beta_high}, {"adv_clip", awr.adv_clip},         {"variant", variant_name(variant)},
            {"seed", seed}};
  }
};

inline Matrix sample_latent_batch(const data::OfflineDataset& ds, const fb::FbModel& model, std::size_t n,
                                  double mix, Rng& rng) {
  Matrix z(model.d, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    z.col(static_cast<Eigen::Index>(i)) = data::sample_latent(ds, model.b, model.d, mix, rng);
  return z;
}

inline std::vector<double> train_high(HighPolicy& high, const fb::FbModel& model, const data::OfflineDataset& ds,
                                      double discount, const PolicyTrainConfig& cfg) {
  if (ds.n_transitions() == 0) throw ConfigError("train_high: dataset has no transitions");
  require_dims(high.n_out() == model.n_states, "train_high: policy must have one logit per state");
  const auto goals = data::GoalSamplerConfig::high_actor_goals();
  Rng rng(cfg.seed);
  nn::AdamState opt = nn::AdamState::for_params(high.net.n_params(), cfg.lr);
  std::vector<double> trace;
  const auto steps = static_cast<std::size_t>(cfg.epochs) * static_cast<std::size_t>(cfg.steps_per_epoch);
  for (std::size_t it = 0; it < steps; ++it) {
    const auto batch = data::sample_transitions(ds, static_cast<std::size_t>(cfg.batch), rng);
    std::vector<int> anchors(batch.size()), subgoals(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      anchors[i] = batch[i].s;
      subgoals[i] = data::sample_goal(ds, batch[i].traj, batch[i].t, goals, discount, rng);
    }
    const Matrix z = sample_latent_batch(ds, model, batch.size(), cfg.latent_mix, rng);
    const auto res = plan_loss(high, model, anchors, subgoals, z, cfg.awr, cfg.variant);
    nn::adam_step(opt, high.net.params(), res.grad);
    trace.push_back(res.loss);
  }
  return trace;
}

inline std::vector<double> train_low(LowPolicy& low, const fb::FbModel& model, const data::OfflineDataset& ds,
                                     const PolicyTrainConfig& cfg) {
  if (ds.n_transitions() == 0) throw ConfigError("train_low: dataset has no transitions");
  Rng rng(cfg.seed);
  nn::AdamState opt = nn::AdamState::for_params(low.net.n_params(), cfg.lr);
  std::vector<double> trace;
  const auto steps = static_cast<std::size_t>(cfg.epochs) * static_cast<std::size_t>(cfg.steps_per_epoch);
  for (std::size_t it = 0; it < steps; ++it) {
    const auto batch = data::sample_transitions(ds, static_cast<std::size_t>(cfg.batch), rng);
    const Matrix z = sample_latent_batch(ds, model, batch.size(), cfg.latent_mix, rng);
    const auto res = act_loss(low, model, batch, z, cfg.awr);
    nn::adam_step(opt, low.net.params(), res.grad);
    trace.push_back(res.loss);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Execution

enum class ActMode { kStochastic, kGreedy };

struct HierAgent {
  HighPolicy high;
  LowPolicy low;
  Matrix subgoal_latents;  // row w: B(w) on the sqrt(d) sphere
  bool hierarchical = true;
  int commitment = 1;

  HierAgent() = default;
  HierAgent(const fb::FbModel& model, HighPolicy h, LowPolicy l, bool use_high = true)
      : high(std::move(h)), low(std::move(l)), hierarchical(use_high) {
    subgoal_latents = Matrix(model.n_states, model.d);
    for (int w = 0; w < model.n_states; ++w) subgoal_latents.row(w) = subgoal_latent(model, w).transpose();
  }
};

struct ActResult {
  int action = 0;
  std::optional<int> subgoal;
};

/// First index of the maximum.
inline int argmax_lowest(const Vector& v) {
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = static_cast<int>(i);
  return best;
}

inline int choose(const CategoricalPolicy& pol, int s, const Vector& z, ActMode mode, Rng& rng) {
  const Vector l = pol.logits(s, z);
  if (mode == ActMode::kGreedy) return argmax_lowest(l);
  const Vector p = nn::log_softmax(l / pol.temperature).col(0).array().exp();
  return sample_categorical(p, rng);
}

/// w ~ pi^h(.|s, z_r), then a ~ pi^l(.|s, z_w). Without the high level the
/// low policy receives z_r directly.
inline ActResult act(const HierAgent& agent, int s, const Vector& z_r, Rng& rng, ActMode mode = ActMode::kGreedy) {
  ActResult out;
  if (!agent.hierarchical) {
    out.action = choose(agent.low, s, z_r, mode, rng);
    return out;
  }
  const int w = choose(agent.high, s, z_r, mode, rng);
  out.subgoal = w;
  out.action = choose(agent.low, s, agent.subgoal_latents.row(w).transpose(), mode, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_policy(const std::string& prefix, const CategoricalPolicy& pol, const std::string& kind) {
  nn::ParamBundle bundle;
  bundle.meta = {{"kind", kind},
                 {"n_states", pol.n_states},
                 {"d", pol.d},
                 {"temperature", pol.temperature},
                 {"net", nn::net_meta(pol.net)}};
  bundle.tensors.emplace_back("net", pol.net.params());
  nn::save_bundle(prefix, bundle);
}

template <class Policy>
Policy load_policy(const std::string& prefix, const std::string& kind) {
  const nn::ParamBundle bundle = nn::load_bundle(prefix);
  if (bundle.meta.value("kind", "") != kind) throw IoError(prefix + ": not a " + kind + " checkpoint");
  Policy pol;
  pol.n_states = bundle.meta.at("n_states").get<int>();
  pol.d = bundle.meta.at("d").get<int>();
  pol.temperature = bundle.meta.value("temperature", 1.0);
  pol.net = nn::net_from(bundle.meta.at("net"), bundle.get("net"));
  return pol;
}

}  // namespace switchsim::hier
