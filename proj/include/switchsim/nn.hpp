#pragma once

// Small dense feedforward networks with hand-written reverse mode, Adam and
// Polyak-averaged target copies. Batches are stored column-wise (dim x batch).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "switchsim/common.hpp"

namespace switchsim::nn {

inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

/// Exact GELU x * Phi(x).
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
inline double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

/// Dense net with GELU hidden layers and a linear output layer. All parameters
/// live in one flat vector: per layer the weight (out x in, column-major) then the bias.
class DenseNet {
 public:
  struct Cache {
    std::vector<Matrix> inputs;  // input of each layer
    std::vector<Matrix> pre;     // pre-activation of each layer
  };

  DenseNet() = default;

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization from `seed`.
  DenseNet(std::vector<int> sizes, std::uint64_t seed) : sizes_(std::move(sizes)), seed_(seed) {
    if (sizes_.size() < 2) throw ConfigError("DenseNet needs at least input and output sizes");
    for (int s : sizes_)
      if (s < 1) throw ConfigError("DenseNet layer sizes must be positive");
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      offsets_.push_back(n);
      n += static_cast<std::size_t>(sizes_[l]) * sizes_[l + 1] + sizes_[l + 1];
    }
    params_ = Vector::Zero(static_cast<Eigen::Index>(n));
    Rng rng(seed);
    for (int l = 0; l < n_layers(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
      auto w = weight(l);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = (2.0 * uniform01(rng) - 1.0) * bound;
      auto b = bias(l);
      for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = (2.0 * uniform01(rng) - 1.0) * bound;
    }
  }

  int n_layers() const { return static_cast<int>(sizes_.size()) - 1; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  const std::vector<int>& sizes() const { return sizes_; }
  std::uint64_t seed() const { return seed_; }
  Eigen::Index n_params() const { return params_.size(); }

  Vector& params() { return params_; }
  const Vector& params() const { return params_; }

  Eigen::Map<Matrix> weight(int l) { return {params_.data() + offsets_[l], sizes_[l + 1], sizes_[l]}; }
  Eigen::Map<const Matrix> weight(int l) const { return {params_.data() + offsets_[l], sizes_[l + 1], sizes_[l]}; }
  Eigen::Map<Vector> bias(int l) {
    return {params_.data() + offsets_[l] + static_cast<std::size_t>(sizes_[l]) * sizes_[l + 1], sizes_[l + 1]};
  }
  Eigen::Map<const Vector> bias(int l) const {
    return {params_.data() + offsets_[l] + static_cast<std::size_t>(sizes_[l]) * sizes_[l + 1], sizes_[l + 1]};
  }

  Matrix forward(const Matrix& x, Cache* cache = nullptr) const {
    require_dims(x.rows() == input_dim(), "DenseNet::forward: input dimension mismatch");
    if (cache) {
      cache->inputs.resize(n_layers());
      cache->pre.resize(n_layers());
    }
    Matrix a = x;
    for (int l = 0; l < n_layers(); ++l) {
      Matrix z = weight(l) * a;
      z.colwise() += bias(l);
      if (cache) {
        cache->inputs[l] = std::move(a);
        cache->pre[l] = z;
      }
      if (l + 1 < n_layers()) a = z.unaryExpr([](double v) { return gelu(v); });
      else a = std::move(z);
    }
    return a;
  }

  Vector forward(const Vector& x) const { return forward(Matrix(x)).col(0); }

  /// Adds d(loss)/d(params) into `grad` given d(loss)/d(output) = `upstream`.
  /// Returns d(loss)/d(input).
  Matrix backward(const Cache& cache, const Matrix& upstream, Vector& grad) const {
    require_dims(static_cast<int>(cache.pre.size()) == n_layers(), "DenseNet::backward: cache from another net");
    require_dims(upstream.rows() == output_dim() && upstream.cols() == cache.pre.back().cols(),
                 "DenseNet::backward: upstream shape mismatch");
    require_dims(grad.size() == n_params(), "DenseNet::backward: gradient buffer size mismatch");
    Matrix g = upstream;
    for (int l = n_layers() - 1; l >= 0; --l) {
      if (l + 1 < n_layers()) g = g.cwiseProduct(cache.pre[l].unaryExpr([](double v) { return gelu_grad(v); }));
      Eigen::Map<Matrix> gw(grad.data() + offsets_[l], sizes_[l + 1], sizes_[l]);
      Eigen::Map<Vector> gb(grad.data() + offsets_[l] + static_cast<std::size_t>(sizes_[l]) * sizes_[l + 1],
                            sizes_[l + 1]);
      gw.noalias() += g * cache.inputs[l].transpose();
      gb += g.rowwise().sum();
      g = weight(l).transpose() * g;
    }
    return g;
  }

  Vector zero_grad() const { return Vector::Zero(n_params()); }

 private:
  std::vector<int> sizes_;
  std::vector<std::size_t> offsets_;
  Vector params_;
  std::uint64_t seed_ = 0;
};

/// Bias-corrected Adam.
struct AdamState {
  Vector m;
  Vector v;
  std::int64_t step = 0;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_params(Eigen::Index n, double lr) {
    AdamState s;
    s.m = Vector::Zero(n);
    s.v = Vector::Zero(n);
    s.lr = lr;
    return s;
  }
};

inline void adam_step(AdamState& st, Vector& params, const Vector& grads) {
  require_dims(params.size() == grads.size() && st.m.size() == params.size() && st.v.size() == params.size(),
               "adam_step: shape mismatch");
  ++st.step;
  st.m = st.beta1 * st.m + (1.0 - st.beta1) * grads;
  st.v = st.beta2 * st.v + (1.0 - st.beta2) * grads.cwiseProduct(grads);
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  params.array() -= st.lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + st.eps);
}

/// Online network with a slowly tracking target copy.
struct TargetPair {
  DenseNet online;
  DenseNet target;
  double tau = 0.005;

  TargetPair() = default;
  TargetPair(DenseNet net, double tau_target) : online(net), target(std::move(net)), tau(tau_target) {}
};

/// target <- (1 - tau) * target + tau * online.
inline void polyak_update(Vector& target, const Vector& online, double tau) {
  require_dims(target.size() == online.size(), "polyak_update: shape mismatch");
  target = (1.0 - tau) * target + tau * online;
}

inline void polyak_update(TargetPair& pair) { polyak_update(pair.target.params(), pair.online.params(), pair.tau); }

/// Row-wise log-softmax over a (classes x batch) logit matrix.
inline Matrix log_softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const double mx = logits.col(j).maxCoeff();
    const double lse = mx + std::log((logits.col(j).array() - mx).exp().sum());
    out.col(j) = logits.col(j).array() - lse;
  }
  return out;
}

struct GradCheck {
  double max_rel_error = 0.0;
  Eigen::Index worst = -1;
  Vector numeric;
};

/// Compares `analytic` against central differences of `loss` around `params`.
/// Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheck grad_check(const std::function<double(const Vector&)>& loss, const Vector& params,
                            const Vector& analytic, double h = 1e-5, double floor = 1e-6) {
  require_dims(params.size() == analytic.size(), "grad_check: gradient size mismatch");
  GradCheck out;
  out.numeric = Vector::Zero(params.size());
  Vector x = params;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    x[i] = params[i] + h;
    const double up = loss(x);
    x[i] = params[i] - h;
    const double down = loss(x);
    x[i] = params[i];
    out.numeric[i] = (up - down) / (2.0 * h);
    const double scale = std::max({std::abs(analytic[i]), std::abs(out.numeric[i]), floor});
    const double err = std::abs(analytic[i] - out.numeric[i]) / scale;
    if (err >= out.max_rel_error) {
      out.max_rel_error = err;
      out.worst = i;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: a JSON manifest plus a raw little-endian float64 blob.

inline void write_blob(const std::string& path, std::span<const double> values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path);
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
  }
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<double> read_blob(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<double> out;
  unsigned char b[8];
  while (in.read(reinterpret_cast<char*>(b), 8)) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, sizeof v);
    out.push_back(v);
  }
  if (in.gcount() != 0) throw IoError(path + ": trailing partial value");
  return out;
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path);
  out << j.dump(1) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
}

/// Named flat tensors concatenated into a single blob.
struct ParamBundle {
  std::vector<std::pair<std::string, Vector>> tensors;
  nlohmann::json meta = nlohmann::json::object();

  const Vector& get(const std::string& name) const {
    for (const auto& [n, v] : tensors)
      if (n == name) return v;
    throw IoError("checkpoint has no tensor '" + name + "'");
  }
};

/// Writes `<prefix>.json` and `<prefix>.bin`.
inline void save_bundle(const std::string& prefix, const ParamBundle& bundle) {
  nlohmann::json layout = nlohmann::json::array();
  std::vector<double> flat;
  for (const auto& [name, v] : bundle.tensors) {
    layout.push_back({{"name", name}, {"offset", flat.size()}, {"size", v.size()}});
    flat.insert(flat.end(), v.data(), v.data() + v.size());
  }
  const std::string blob = prefix + ".bin";
  const auto slash = blob.find_last_of('/');
  write_json(prefix + ".json", {{"format", "switchsim-params"},
                                {"version", 1},
                                {"blob", slash == std::string::npos ? blob : blob.substr(slash + 1)},
                                {"tensors", layout},
                                {"meta", bundle.meta}});
  write_blob(blob, flat);
}

inline ParamBundle load_bundle(const std::string& prefix) {
  const nlohmann::json j = read_json(prefix + ".json");
  const std::vector<double> flat = read_blob(prefix + ".bin");
  ParamBundle b;
  b.meta = j.value("meta", nlohmann::json::object());
  for (const auto& t : j.at("tensors")) {
    const std::size_t off = t.at("offset").get<std::size_t>();
    const std::size_t n = t.at("size").get<std::size_t>();
    if (off + n > flat.size()) throw IoError(prefix + ".bin: blob shorter than manifest");
    b.tensors.emplace_back(t.at("name").get<std::string>(),
                           Eigen::Map<const Vector>(flat.data() + off, static_cast<Eigen::Index>(n)));
  }
  return b;
}

inline nlohmann::json net_meta(const DenseNet& net) { return {{"layer_sizes", net.sizes()}, {"seed", net.seed()}}; }

/// Rebuilds a net from its manifest entry and flat parameters.
inline DenseNet net_from(const nlohmann::json& meta, const Vector& params) {
  DenseNet net(meta.at("layer_sizes").get<std::vector<int>>(), meta.at("seed").get<std::uint64_t>());
  if (params.size() != net.n_params()) throw IoError("checkpoint parameter count mismatch");
  net.params() = params;
  return net;
}

inline void save_net(const std::string& prefix, const DenseNet& net, std::int64_t step = 0) {
  ParamBundle b;
  b.meta = {{"net", net_meta(net)}, {"step", step}};
  b.tensors.emplace_back("params", net.params());
  save_bundle(prefix, b);
}

inline DenseNet load_net(const std::string& prefix) {
  const ParamBundle b = load_bundle(prefix);
  return net_from(b.meta.at("net"), b.get("params"));
}

}  // namespace switchsim::nn
