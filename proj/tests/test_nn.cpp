#include <gtest/gtest.h>

#include <filesystem>

#include "switchsim/nn.hpp"

using namespace switchsim;
using namespace switchsim::nn;

namespace {

Matrix random_matrix(int rows, int cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
  return m;
}

// Loss on a net output plus its gradient with respect to that output.
using OutputLoss = std::function<double(const Matrix&, Matrix*)>;

double squared_loss(const Matrix& y, Matrix* g) {
  if (g) *g = y / static_cast<double>(y.cols());
  return 0.5 * y.squaredNorm() / static_cast<double>(y.cols());
}

OutputLoss expectile_loss(const Matrix& target, double tau) {
  return [target, tau](const Matrix& y, Matrix* g) {
    const Matrix d = target - y;
    double loss = 0.0;
    if (g) *g = Matrix::Zero(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      const double w = d.data()[i] < 0 ? 1.0 - tau : tau;
      loss += w * d.data()[i] * d.data()[i];
      if (g) g->data()[i] = -2.0 * w * d.data()[i];
    }
    return loss;
  };
}

OutputLoss log_softmax_loss(const std::vector<int>& labels) {
  return [labels](const Matrix& y, Matrix* g) {
    const Matrix lp = log_softmax(y);
    double loss = 0.0;
    if (g) *g = lp.array().exp();
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      loss -= lp(labels[j], j);
      if (g) (*g)(labels[j], j) -= 1.0;
    }
    return loss;
  };
}

double check_net(const std::vector<int>& sizes, const OutputLoss& loss, std::uint64_t seed, int batch) {
  DenseNet net(sizes, seed);
  Rng rng(seed + 1);
  const Matrix x = random_matrix(sizes.front(), batch, rng);
  DenseNet::Cache cache;
  Matrix up;
  loss(net.forward(x, &cache), &up);
  Vector grad = net.zero_grad();
  net.backward(cache, up, grad);
  DenseNet probe = net;
  const auto f = [&](const Vector& p) {
    probe.params() = p;
    return loss(probe.forward(x), nullptr);
  };
  return grad_check(f, net.params(), grad).max_rel_error;
}

}  // namespace

TEST(Gelu, Identities) {
  EXPECT_EQ(gelu(0.0), 0.0);
  EXPECT_NEAR(gelu(10.0), 10.0, 1e-12);
  EXPECT_NEAR(gelu(-10.0), 0.0, 1e-12);
  for (double x : {-2.0, -0.3, 0.0, 0.7, 3.1}) {
    const double h = 1e-6;
    EXPECT_NEAR(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), 1e-8);
  }
}

TEST(DenseNet, ZeroParametersGiveZeroOutput) {
  DenseNet net({3, 5, 2}, 1);
  net.params().setZero();
  Rng rng(0);
  EXPECT_EQ(net.forward(random_matrix(3, 4, rng)), Matrix::Zero(2, 4));
}

TEST(DenseNet, SingleLayerIsAffineMap) {
  DenseNet net({3, 2}, 7);
  Rng rng(1);
  const Matrix x = random_matrix(3, 5, rng);
  Matrix expect = net.weight(0) * x;
  expect.colwise() += Vector(net.bias(0));
  EXPECT_TRUE(net.forward(x).isApprox(expect, 1e-15));
}

TEST(DenseNet, LinearLayerGradientIsOuterProduct) {
  DenseNet net({3, 2}, 7);
  Rng rng(2);
  const Vector x = random_matrix(3, 1, rng).col(0);
  const Vector up = random_matrix(2, 1, rng).col(0);
  DenseNet::Cache cache;
  net.forward(Matrix(x), &cache);
  Vector grad = net.zero_grad();
  const Matrix gin = net.backward(cache, Matrix(up), grad);
  const Eigen::Map<const Matrix> gw(grad.data(), 2, 3);
  EXPECT_TRUE(gw.isApprox(up * x.transpose(), 1e-15));
  EXPECT_TRUE(grad.tail(2).isApprox(up, 1e-15));
  EXPECT_TRUE(gin.col(0).isApprox(net.weight(0).transpose() * up, 1e-15));
}

TEST(DenseNet, ZeroUpstreamGivesZeroGradients) {
  DenseNet net({4, 6, 3}, 3);
  Rng rng(3);
  DenseNet::Cache cache;
  net.forward(random_matrix(4, 2, rng), &cache);
  Vector grad = net.zero_grad();
  const Matrix gin = net.backward(cache, Matrix::Zero(3, 2), grad);
  EXPECT_EQ(grad, net.zero_grad());
  EXPECT_EQ(gin, Matrix::Zero(4, 2));
}

TEST(DenseNet, ShapeErrors) {
  DenseNet net({4, 3}, 3);
  EXPECT_THROW(net.forward(Matrix(Matrix::Zero(5, 1))), DimensionError);
  DenseNet::Cache cache;
  net.forward(Matrix::Zero(4, 2), &cache);
  Vector grad = net.zero_grad();
  EXPECT_THROW(net.backward(cache, Matrix::Zero(3, 1), grad), DimensionError);
  EXPECT_THROW(DenseNet({4}, 0), ConfigError);
  EXPECT_THROW(DenseNet({4, 0}, 0), ConfigError);
}

TEST(DenseNet, GradientsMatchFiniteDifferences) {
  Rng rng(10);
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const std::vector<std::vector<int>> shapes{{5, 16, 3}, {4, 8, 8, 3}, {6, 3}};
    const auto& sizes = shapes[seed % shapes.size()];
    const int batch = 4;
    const Matrix target = random_matrix(sizes.back(), batch, rng);
    std::vector<int> labels;
    for (int j = 0; j < batch; ++j) labels.push_back(static_cast<int>(uniform_index(rng, sizes.back())));
    EXPECT_LE(check_net(sizes, squared_loss, seed, batch), 1e-4);
    EXPECT_LE(check_net(sizes, expectile_loss(target, 0.7), seed, batch), 1e-4);
    EXPECT_LE(check_net(sizes, log_softmax_loss(labels), seed, batch), 1e-4);
  }
}

TEST(DenseNet, InputGradientMatchesFiniteDifferences) {
  DenseNet net({4, 8, 2}, 5);
  Rng rng(4);
  const Vector x = random_matrix(4, 1, rng).col(0);
  DenseNet::Cache cache;
  Matrix up;
  squared_loss(net.forward(Matrix(x), &cache), &up);
  Vector grad = net.zero_grad();
  const Vector gin = net.backward(cache, up, grad).col(0);
  const auto f = [&](const Vector& v) { return squared_loss(net.forward(Matrix(v)), nullptr); };
  EXPECT_LE(grad_check(f, x, gin).max_rel_error, 1e-4);
}

TEST(DenseNet, InitializationIsSeededAndBounded) {
  DenseNet a({10, 7, 3}, 9), b({10, 7, 3}, 9), c({10, 7, 3}, 10);
  EXPECT_EQ(a.params(), b.params());
  EXPECT_NE(a.params(), c.params());
  EXPECT_LE(a.weight(0).cwiseAbs().maxCoeff(), 1.0 / std::sqrt(10.0));
  EXPECT_LE(a.weight(1).cwiseAbs().maxCoeff(), 1.0 / std::sqrt(7.0));
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Vector p = Vector::LinSpaced(4, -1, 1);
  const Vector before = p;
  auto st = AdamState::for_params(4, 1e-3);
  adam_step(st, p, Vector::Zero(4));
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, FirstStepClosedForm) {
  Vector p = Vector::Zero(3);
  Vector g(3);
  g << 2.0, -0.5, 1e-3;
  auto st = AdamState::for_params(3, 0.01);
  adam_step(st, p, g);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], -0.01 * g[i] / (std::abs(g[i]) + st.eps), 1e-15);
}

TEST(Adam, UpdateMagnitudeBoundedAndDeterministic) {
  Rng rng(6);
  Vector p = Vector::Zero(20), q = Vector::Zero(20);
  auto s1 = AdamState::for_params(20, 3e-4), s2 = s1;
  for (int k = 0; k < 200; ++k) {
    const Vector g = random_matrix(20, 1, rng).col(0) * std::exp(standard_normal(rng));
    const Vector before = p;
    adam_step(s1, p, g);
    adam_step(s2, q, g);
    // Cauchy-Schwarz on the moment sums; the bias-correction ratio never exceeds 1.
    const double bound = (1 - 0.9) / std::sqrt((1 - 0.999) * (1 - 0.81 / 0.999));
    EXPECT_LE((p - before).cwiseAbs().maxCoeff(), 3e-4 * bound);
  }
  EXPECT_EQ(p, q);
}

TEST(Polyak, Extremes) {
  TargetPair pair(DenseNet({3, 2}, 1), 1.0);
  pair.online.params().setConstant(0.25);
  polyak_update(pair);
  EXPECT_EQ(pair.target.params(), pair.online.params());
  const Vector before = pair.target.params();
  pair.tau = 0.0;
  pair.online.params().setConstant(-1.0);
  polyak_update(pair);
  EXPECT_EQ(pair.target.params(), before);
}

TEST(Polyak, GeometricConvergence) {
  Vector target = Vector::Constant(5, 1.0);
  const Vector online = Vector::Zero(5);
  double gap = (target - online).norm();
  for (int k = 0; k < 50; ++k) {
    polyak_update(target, online, 0.005);
    const double next = (target - online).norm();
    EXPECT_NEAR(next, 0.995 * gap, 1e-14);
    gap = next;
  }
}

TEST(LogSoftmax, ColumnsNormalizeAndShiftInvariant) {
  Rng rng(8);
  const Matrix l = random_matrix(5, 3, rng);
  const Matrix lp = log_softmax(l);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(lp.col(j).array().exp().sum(), 1.0, 1e-14);
  EXPECT_TRUE(log_softmax(l.array() + 100.0).isApprox(lp, 1e-12));
  Matrix big = Matrix::Zero(2, 1);
  big(0, 0) = 1000.0;
  EXPECT_TRUE(log_softmax(big).allFinite());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  DenseNet net({6, 9, 4}, 21);
  net.params()[0] = 1.0 / 3.0;
  net.params()[1] = -0.0;
  net.params()[2] = 1e-310;
  const std::string prefix = (std::filesystem::temp_directory_path() / "switchsim_test_net").string();
  save_net(prefix, net, 17);
  const DenseNet back = load_net(prefix);
  EXPECT_EQ(back.sizes(), net.sizes());
  EXPECT_EQ(back.seed(), net.seed());
  ASSERT_EQ(back.n_params(), net.n_params());
  EXPECT_EQ(std::memcmp(back.params().data(), net.params().data(), sizeof(double) * net.n_params()), 0);
  EXPECT_EQ(read_json(prefix + ".json").at("meta").at("step"), 17);
  std::filesystem::remove(prefix + ".json");
  std::filesystem::remove(prefix + ".bin");
  EXPECT_THROW(load_net(prefix), IoError);
}

TEST(GradCheck, FlagsWrongGradient) {
  const auto f = [](const Vector& p) { return p.squaredNorm(); };
  const Vector p = Vector::Constant(3, 0.5);
  EXPECT_LE(grad_check(f, p, 2.0 * p).max_rel_error, 1e-8);
  const auto bad = grad_check(f, p, 3.0 * p);
  EXPECT_GT(bad.max_rel_error, 0.1);
}
