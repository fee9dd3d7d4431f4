#pragma once

// Action-free forward-backward successor representation M_s(s') ~ F(s,z)^T B(s'),
// learned with intention-conditioned expectile regression.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "switchsim/common.hpp"
#include "switchsim/dataset.hpp"
#include "switchsim/mdp.hpp"
#include "switchsim/nn.hpp"

namespace switchsim::fb {

inline constexpr int kEnsembleSize = 2;

struct ExpectileConfig {
  double tau = 0.7;

  void validate() const {
    if (!(tau >= 0.5 && tau < 1.0)) throw ConfigError("expectile parameter must lie in [0.5, 1)");
  }
};

enum class IntrinsicReward { kSimplified, kExact };

/// Pairwise estimator for the orthonormalization loss. kUnbiased averages over
/// distinct batch slots (i != j); kAllPairs includes i == j, which equals
/// ||E_batch[B B^T] - I||_F^2 - d when the batch is the whole state set.
enum class OrthonormEstimator { kUnbiased, kAllPairs };

struct FbModelConfig {
  int n_states = 0;
  int d = 24;
  std::vector<int> hidden{64, 64};
  double tau_target = 0.005;
  double lr = 3e-4;
  std::uint64_t seed = 0;
};

/// F ensemble (input: one-hot state concatenated with z), backward table B with
/// one row per state, Polyak targets for both, and optimizer state.
struct FbModel {
  int n_states = 0;
  int d = 0;
  std::array<nn::TargetPair, kEnsembleSize> f;
  Matrix b;
  Matrix b_target;
  double tau_target = 0.005;
  std::array<nn::AdamState, kEnsembleSize> f_opt;
  nn::AdamState b_opt;
  std::int64_t step = 0;

  FbModel() = default;

  explicit FbModel(const FbModelConfig& cfg) : n_states(cfg.n_states), d(cfg.d), tau_target(cfg.tau_target) {
    if (cfg.n_states < 1) throw ConfigError("FbModel: n_states must be >= 1");
    if (cfg.d < 1) throw ConfigError("FbModel: latent dimension must be >= 1");
    std::vector<int> sizes{cfg.n_states + cfg.d};
    sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
    sizes.push_back(cfg.d);
    for (int k = 0; k < kEnsembleSize; ++k) {
      f[k] = nn::TargetPair(nn::DenseNet(sizes, derive_seed(cfg.seed, 100 + k)), cfg.tau_target);
      f_opt[k] = nn::AdamState::for_params(f[k].online.n_params(), cfg.lr);
    }
    Rng rng(derive_seed(cfg.seed, 200));
    b = Matrix(cfg.n_states, cfg.d);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = standard_normal(rng) * scale;
    b_target = b;
    b_opt = nn::AdamState::for_params(b.size(), cfg.lr);
  }

  Eigen::RowVectorXd backward(int s) const { return b.row(s); }
};

/// Network input: one-hot states stacked over latents, one column per sample.
inline Matrix encode_inputs(int n_states, std::span<const int> states, const Matrix& latents) {
  require_dims(static_cast<Eigen::Index>(states.size()) == latents.cols(), "encode_inputs: batch size mismatch");
  Matrix x = Matrix::Zero(n_states + latents.rows(), latents.cols());
  for (std::size_t i = 0; i < states.size(); ++i) {
    require_dims(states[i] >= 0 && states[i] < n_states, "encode_inputs: state out of range");
    x(states[i], static_cast<Eigen::Index>(i)) = 1.0;
  }
  x.bottomRows(latents.rows()) = latents;
  return x;
}

inline Matrix stack_latents(const std::vector<Vector>& zs, int d) {
  Matrix out(d, static_cast<Eigen::Index>(zs.size()));
  for (std::size_t i = 0; i < zs.size(); ++i) {
    require_dims(zs[i].size() == d, "latent dimension mismatch");
    out.col(static_cast<Eigen::Index>(i)) = zs[i];
  }
  return out;
}

/// Ensemble-mean F for a batch (d x N).
inline Matrix f_batch(const FbModel& model, std::span<const int> states, const Matrix& latents, bool target = false) {
  require_dims(latents.rows() == model.d, "f_batch: latent dimension mismatch");
  const Matrix x = encode_inputs(model.n_states, states, latents);
  Matrix sum = Matrix::Zero(model.d, latents.cols());
  for (const auto& pair : model.f) sum += (target ? pair.target : pair.online).forward(x);
  return sum / static_cast<double>(kEnsembleSize);
}

inline Vector f_value(const FbModel& model, int s, const Vector& z, bool target = false) {
  require_dims(s >= 0 && s < model.n_states, "f_value: state out of range");
  require_dims(z.size() == model.d, "f_value: latent dimension mismatch");
  const int states[1] = {s};
  return f_batch(model, states, Matrix(z), target).col(0);
}

/// V(s; z) = F(s, z)^T z.
inline double value(const FbModel& model, int s, const Vector& z) { return f_value(model, s, z).dot(z); }

/// Values F(s,z)^T z for every state at one latent.
inline Vector values_all_states(const FbModel& model, const Vector& z) {
  std::vector<int> states(model.n_states);
  for (int s = 0; s < model.n_states; ++s) states[s] = s;
  const Matrix zs = z.replicate(1, model.n_states);
  const Matrix f = f_batch(model, states, zs);
  return (f.transpose() * z);
}

/// (sum over visited s of B(s) B(s)^T + ridge * I)^{-1}; the rho weights cancel
/// against the 1/rho in the full definition.
inline Matrix gram_inverse(const FbModel& model, const StateDist& rho, double ridge = 1e-6) {
  require_dims(rho.probs.size() == model.n_states, "gram_inverse: rho length mismatch");
  Matrix g = ridge * Matrix::Identity(model.d, model.d);
  for (int s = 0; s < model.n_states; ++s)
    if (rho.probs[s] > 0.0) g.noalias() += model.b.row(s).transpose() * model.b.row(s);
  Eigen::FullPivLU<Matrix> lu(g);
  if (!lu.isInvertible()) throw NumericalError("singular B Gram matrix (use a positive ridge)");
  return lu.inverse();
}

/// r_z(s): B(s)^T z by default, B(s)^T G^{-1} z when `gram_inv` is supplied.
inline double intrinsic_reward(const FbModel& model, int s, const Vector& z, const Matrix* gram_inv = nullptr) {
  require_dims(s >= 0 && s < model.n_states && z.size() == model.d, "intrinsic_reward: bad arguments");
  if (gram_inv) return model.b.row(s).dot(*gram_inv * z);
  return model.b.row(s).dot(z);
}

struct RepLossResult {
  double loss = 0.0;
  std::array<Vector, kEnsembleSize> grad_f;
  Matrix grad_b;
  double mean_abs_td = 0.0;
};

/// Bootstrap targets 1{s_t = s'} + gamma * Fbar(s_{t+1}, z)^T Bbar(s'), held constant.
inline Vector bootstrap_targets(const FbModel& model, double discount, std::span<const data::Transition> batch,
                                std::span<const int> queries, const Matrix& latents) {
  std::vector<int> next(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) next[i] = batch[i].next;
  const Matrix fbar = f_batch(model, next, latents, /*target=*/true);
  Vector out(static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    out[c] = (batch[i].s == queries[i] ? 1.0 : 0.0) + discount * fbar.col(c).dot(model.b_target.row(queries[i]));
  }
  return out;
}

/// Expectile representation loss with precomputed bootstrap targets:
/// mean over ensemble members and batch of |tau - 1{Delta < 0}| * delta_k^2, where
/// Delta = r_z(s_t) + gamma F(s_{t+1},z)^T z - F(s_t,z)^T z uses the ensemble mean
/// and delta_k = target - F_k(s_t,z)^T B(s').
inline RepLossResult rep_loss_with_targets(const FbModel& model, const ExpectileConfig& cfg, double discount,
                                           std::span<const data::Transition> batch, std::span<const int> queries,
                                           const Matrix& latents, const Vector& targets,
                                           const Matrix* gram_inv = nullptr) {
  cfg.validate();
  const auto n = static_cast<Eigen::Index>(batch.size());
  require_dims(n > 0, "rep_loss: empty batch");
  require_dims(static_cast<Eigen::Index>(queries.size()) == n && latents.cols() == n && targets.size() == n,
               "rep_loss: batch, queries, latents and targets must have equal length");
  std::vector<int> cur(n), next(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    cur[i] = batch[i].s;
    next[i] = batch[i].next;
  }
  const Matrix x_cur = encode_inputs(model.n_states, cur, latents);
  std::array<nn::DenseNet::Cache, kEnsembleSize> caches;
  std::array<Matrix, kEnsembleSize> f_cur;
  for (int k = 0; k < kEnsembleSize; ++k) f_cur[k] = model.f[k].online.forward(x_cur, &caches[k]);
  const Matrix f_next = f_batch(model, next, latents);
  const Matrix f_mean = (f_cur[0] + f_cur[1]) / static_cast<double>(kEnsembleSize);

  RepLossResult out;
  out.grad_b = Matrix::Zero(model.n_states, model.d);
  std::array<Matrix, kEnsembleSize> up;
  for (auto& u : up) u = Matrix::Zero(model.d, n);
  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_k = 1.0 / static_cast<double>(kEnsembleSize);
  double total = 0.0;
  double abs_td = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector z = latents.col(i);
    const double r = intrinsic_reward(model, cur[i], z, gram_inv);
    const double adv = r + discount * f_next.col(i).dot(z) - f_mean.col(i).dot(z);
    const double weight = std::abs(cfg.tau - (adv < 0.0 ? 1.0 : 0.0));
    const Eigen::VectorXd bq = model.b.row(queries[i]).transpose();
    for (int k = 0; k < kEnsembleSize; ++k) {
      const double delta = targets[i] - f_cur[k].col(i).dot(bq);
      total += weight * delta * delta;
      abs_td += std::abs(delta);
      const double g = -2.0 * weight * delta * inv_n * inv_k;
      up[k].col(i) = g * bq;
      out.grad_b.row(queries[i]) += g * f_cur[k].col(i).transpose();
    }
  }
  out.loss = total * inv_n * inv_k;
  out.mean_abs_td = abs_td * inv_n * inv_k;
  for (int k = 0; k < kEnsembleSize; ++k) {
    out.grad_f[k] = model.f[k].online.zero_grad();
    model.f[k].online.backward(caches[k], up[k], out.grad_f[k]);
  }
  return out;
}

inline RepLossResult rep_loss(const FbModel& model, const ExpectileConfig& cfg, double discount,
                              std::span<const data::Transition> batch, std::span<const int> queries,
                              const Matrix& latents, const Matrix* gram_inv = nullptr) {
  require_dims(queries.size() == batch.size() && static_cast<std::size_t>(latents.cols()) == batch.size(),
               "rep_loss: batch, queries and latents must have equal length");
  const Vector targets = bootstrap_targets(model, discount, batch, queries, latents);
  return rep_loss_with_targets(model, cfg, discount, batch, queries, latents, targets, gram_inv);
}

struct OrthonormResult {
  double loss = 0.0;
  Matrix grad_b;
};

/// coeff * E_{s,s'}[(B(s)^T B(s'))^2 - 2 ||B(s)||^2] over the given rho-batch.
inline OrthonormResult orthonorm_loss(const FbModel& model, std::span<const int> states, double coeff = 1.0,
                                      OrthonormEstimator est = OrthonormEstimator::kUnbiased) {
  const auto n = static_cast<Eigen::Index>(states.size());
  if (n < 2) throw ConfigError("orthonorm_loss: batch must hold at least 2 states");
  Matrix bb(n, model.d);
  for (Eigen::Index i = 0; i < n; ++i) {
    require_dims(states[i] >= 0 && states[i] < model.n_states, "orthonorm_loss: state out of range");
    bb.row(i) = model.b.row(states[i]);
  }
  Matrix gram = bb * bb.transpose();  // n x n inner products
  const double pair_norm = (est == OrthonormEstimator::kUnbiased) ? 1.0 / (static_cast<double>(n) * (n - 1))
                                                                   : 1.0 / (static_cast<double>(n) * n);
  if (est == OrthonormEstimator::kUnbiased) gram.diagonal().setZero();
  const double pair_term = gram.squaredNorm() * pair_norm;
  const double norm_term = 2.0 * bb.squaredNorm() / static_cast<double>(n);
  OrthonormResult out;
  out.loss = coeff * (pair_term - norm_term);
  // d/db_i: 4 * pair_norm * sum_j g_ij b_j - (4/n) b_i (diagonal term included in kAllPairs via g_ii).
  const Matrix g_slots = coeff * (4.0 * pair_norm * (gram * bb) - (4.0 / static_cast<double>(n)) * bb);
  out.grad_b = Matrix::Zero(model.n_states, model.d);
  for (Eigen::Index i = 0; i < n; ++i) out.grad_b.row(states[i]) += g_slots.row(i);
  return out;
}

struct RewardEmbedding {
  Vector z;
  std::string source;
  std::size_t n_samples = 0;
};

/// z_r = E_{s~rho}[r(s) B(s)]: a Monte Carlo average over n_samples rho-draws,
/// or the exact rho-weighted sum when n_samples == 0.
inline RewardEmbedding reward_embedding(const FbModel& model, const RewardVector& r, const data::OfflineDataset& ds,
                                        std::size_t n_samples, std::uint64_t seed = 0, std::string source = {}) {
  require_dims(r.size() == model.n_states && ds.n_states == model.n_states, "reward_embedding: size mismatch");
  RewardEmbedding out{Vector::Zero(model.d), std::move(source), n_samples};
  if (n_samples == 0) {
    for (int s = 0; s < model.n_states; ++s)
      if (ds.rho.probs[s] != 0.0 && r[s] != 0.0) out.z += ds.rho.probs[s] * r[s] * model.b.row(s).transpose();
    return out;
  }
  Rng rng(seed);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const int s = data::sample_rho_state(ds, rng);
    if (r[s] != 0.0) out.z += r[s] * model.b.row(s).transpose();
  }
  out.z /= static_cast<double>(n_samples);
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 250;
  int steps_per_epoch = 1000;
  int batch = 32;
  double p_query_current = 0.2;
  data::LatentMixSchedule latent_mix{0.0, 0.5};
  double orthonorm_coeff = 1e-4;
  ExpectileConfig expectile{};
  IntrinsicReward intrinsic = IntrinsicReward::kSimplified;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"steps_per_epoch", steps_per_epoch},
            {"batch", batch},
            {"p_query_current", p_query_current},
            {"latent_mix_start", latent_mix.start},
            {"latent_mix_end", latent_mix.end},
            {"orthonorm_coeff", orthonorm_coeff},
            {"tau_expectile", expectile.tau},
            {"intrinsic", intrinsic == IntrinsicReward::kExact ? "exact" : "simplified"},
            {"seed", seed}};
  }
};

struct TrainTrace {
  std::vector<double> step_loss;
  std::vector<double> epoch_mean_loss;
};

inline void apply_gradients(FbModel& model, const std::array<Vector, kEnsembleSize>& grad_f, const Matrix& grad_b) {
  for (int k = 0; k < kEnsembleSize; ++k) nn::adam_step(model.f_opt[k], model.f[k].online.params(), grad_f[k]);
  Eigen::Map<Vector> bflat(model.b.data(), model.b.size());
  Vector bvec = bflat;
  nn::adam_step(model.b_opt, bvec, Eigen::Map<const Vector>(grad_b.data(), grad_b.size()));
  bflat = bvec;
  for (auto& pair : model.f) nn::polyak_update(pair);
  model.b_target = (1.0 - model.tau_target) * model.b_target + model.tau_target * model.b;
  ++model.step;
}

/// One optimization step of L_rep + coeff * L_orthonorm; returns the loss.
inline double train_step(FbModel& model, const data::OfflineDataset& ds, double discount, const TrainConfig& cfg,
                         double mix_prob, Rng& rng) {
  const auto batch = data::sample_transitions(ds, static_cast<std::size_t>(cfg.batch), rng);
  std::vector<int> queries(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i)
    queries[i] = uniform01(rng) < cfg.p_query_current ? batch[i].s : data::sample_rho_state(ds, rng);
  Matrix latents(model.d, static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i)
    latents.col(static_cast<Eigen::Index>(i)) = data::sample_latent(ds, model.b, model.d, mix_prob, rng);
  std::vector<int> ortho(batch.size());
  for (auto& s : ortho) s = data::sample_rho_state(ds, rng);

  Matrix gram_inv;
  const Matrix* gi = nullptr;
  if (cfg.intrinsic == IntrinsicReward::kExact) {
    gram_inv = gram_inverse(model, ds.rho);
    gi = &gram_inv;
  }
  RepLossResult rep = rep_loss(model, cfg.expectile, discount, batch, queries, latents, gi);
  const OrthonormResult orth = orthonorm_loss(model, ortho, cfg.orthonorm_coeff);
  rep.grad_b += orth.grad_b;
  apply_gradients(model, rep.grad_f, rep.grad_b);
  return rep.loss + orth.loss;
}

using ProgressFn = std::function<void(int epoch, double mean_loss)>;

/// Deterministic given (model init, dataset, cfg.seed).
inline TrainTrace train(FbModel& model, const data::OfflineDataset& ds, double discount, const TrainConfig& cfg,
                        const ProgressFn& progress = {}) {
  if (ds.n_transitions() == 0) throw ConfigError("train: dataset has no transitions");
  require_dims(ds.n_states == model.n_states, "train: dataset and model state counts differ");
  cfg.expectile.validate();
  TrainTrace trace;
  Rng rng(cfg.seed);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double mix = cfg.latent_mix.at(epoch, cfg.epochs);
    double sum = 0.0;
    for (int it = 0; it < cfg.steps_per_epoch; ++it) {
      const double l = train_step(model, ds, discount, cfg, mix, rng);
      trace.step_loss.push_back(l);
      sum += l;
    }
    trace.epoch_mean_loss.push_back(cfg.steps_per_epoch > 0 ? sum / cfg.steps_per_epoch : 0.0);
    if (progress) progress(epoch, trace.epoch_mean_loss.back());
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_model(const std::string& prefix, const FbModel& model) {
  nn::ParamBundle bundle;
  bundle.meta = {{"kind", "fb"},
                 {"n_states", model.n_states},
                 {"d", model.d},
                 {"tau_target", model.tau_target},
                 {"step", model.step},
                 {"lr", model.f_opt[0].lr},
                 {"f_net", nn::net_meta(model.f[0].online)},
                 {"f_seeds", {model.f[0].online.seed(), model.f[1].online.seed()}}};
  for (int k = 0; k < kEnsembleSize; ++k) {
    bundle.tensors.emplace_back("f" + std::to_string(k), model.f[k].online.params());
    bundle.tensors.emplace_back("f" + std::to_string(k) + "_target", model.f[k].target.params());
  }
  bundle.tensors.emplace_back("b", Eigen::Map<const Vector>(model.b.data(), model.b.size()));
  bundle.tensors.emplace_back("b_target", Eigen::Map<const Vector>(model.b_target.data(), model.b_target.size()));
  nn::save_bundle(prefix, bundle);
}

inline FbModel load_model(const std::string& prefix) {
  const nn::ParamBundle bundle = nn::load_bundle(prefix);
  const auto& m = bundle.meta;
  if (m.value("kind", "") != "fb") throw IoError(prefix + ": not an FB checkpoint");
  FbModel model;
  model.n_states = m.at("n_states").get<int>();
  model.d = m.at("d").get<int>();
  model.tau_target = m.at("tau_target").get<double>();
  model.step = m.at("step").get<std::int64_t>();
  const double lr = m.value("lr", 3e-4);
  const auto seeds = m.at("f_seeds").get<std::vector<std::uint64_t>>();
  for (int k = 0; k < kEnsembleSize; ++k) {
    nlohmann::json meta = m.at("f_net");
    meta["seed"] = seeds[k];
    model.f[k].online = nn::net_from(meta, bundle.get("f" + std::to_string(k)));
    model.f[k].target = nn::net_from(meta, bundle.get("f" + std::to_string(k) + "_target"));
    model.f[k].tau = model.tau_target;
    model.f_opt[k] = nn::AdamState::for_params(model.f[k].online.n_params(), lr);
  }
  const Vector& b = bundle.get("b");
  const Vector& bt = bundle.get("b_target");
  if (b.size() != static_cast<Eigen::Index>(model.n_states) * model.d || bt.size() != b.size())
    throw IoError(prefix + ": backward table size mismatch");
  model.b = Eigen::Map<const Matrix>(b.data(), model.n_states, model.d);
  model.b_target = Eigen::Map<const Matrix>(bt.data(), model.n_states, model.d);
  model.b_opt = nn::AdamState::for_params(model.b.size(), lr);
  return model;
}

}  // namespace switchsim::fb
