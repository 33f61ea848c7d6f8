#include <gtest/gtest.h>

#include <cstring>
#include <sstream>

#include "h2o/nn.hpp"
#include "test_support.hpp"

using namespace h2o;
using namespace h2o::nn;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Straight-line forward pass written independently of nn::forward.
VectorXd reference_forward(const Mlp& net, const VectorXd& x) {
  std::vector<double> h(x.data(), x.data() + x.size());
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    const auto& W = net.weights[l];
    std::vector<double> z(static_cast<std::size_t>(W.cols()));
    for (Eigen::Index j = 0; j < W.cols(); ++j) {
      double acc = net.biases[l](j);
      for (Eigen::Index i = 0; i < W.rows(); ++i) acc += h[static_cast<std::size_t>(i)] * W(i, j);
      z[static_cast<std::size_t>(j)] = acc;
    }
    const bool last = l + 1 == net.weights.size();
    const Activation act = last ? net.output_activation : net.hidden_activation;
    for (auto& v : z) {
      if (act == Activation::relu) v = v > 0 ? v : 0.0;
      if (act == Activation::tanh2) v = 2.0 * std::tanh(v);
    }
    h = z;
  }
  return Eigen::Map<VectorXd>(h.data(), static_cast<Eigen::Index>(h.size()));
}

struct Shape {
  const char* name;
  std::vector<int> sizes;
  Activation out;
};

// Every network shape the agents and discriminators use, at two widths.
std::vector<Shape> artifact_shapes() {
  std::vector<Shape> s;
  for (int h : {32, 64}) {
    s.push_back({"actor", {3, h, h, 2}, Activation::identity});
    s.push_back({"critic", {4, h, h, 1}, Activation::identity});
    s.push_back({"disc_sa", {4, h, 2}, Activation::tanh2});
    s.push_back({"disc_sas", {7, h, 2}, Activation::tanh2});
  }
  return s;
}

}  // namespace

TEST(MlpForward, ZeroWeightsCollapseToActivatedBias) {
  Mlp net = Mlp::zeros({3, 5, 2}, Activation::tanh2);
  net.biases.back() << 0.3, -1.2;
  VectorXd out = mlp_forward(net, VectorXd::Constant(3, 7.0));
  EXPECT_DOUBLE_EQ(out(0), 2.0 * std::tanh(0.3));
  EXPECT_DOUBLE_EQ(out(1), 2.0 * std::tanh(-1.2));
}

TEST(MlpForward, SingleLinearLayer) {
  Mlp net = Mlp::zeros({1, 1}, Activation::identity);
  net.weights[0](0, 0) = 2.0;
  net.biases[0](0) = 1.0;
  VectorXd x(1);
  x << 3.0;
  EXPECT_EQ(mlp_forward(net, x)(0), 7.0);
}

TEST(MlpForward, MatchesReferenceOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    Mlp net = Mlp::create({4, 16, 16, 3}, Activation::identity, rng);
    VectorXd x = testutil::random_matrix(4, 1, rng).col(0);
    VectorXd a = mlp_forward(net, x), b = reference_forward(net, x);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MlpForward, SoftmaxOutputIsDistribution) {
  Rng rng(3);
  Mlp net = Mlp::create({2, 8, 4}, Activation::softmax, rng);
  VectorXd y = mlp_forward(net, VectorXd::Ones(2));
  EXPECT_NEAR(y.sum(), 1.0, 1e-15);
  EXPECT_TRUE((y.array() > 0).all());
}

TEST(MlpForward, DimensionMismatchRejected) {
  Rng rng(1);
  Mlp net = Mlp::create({3, 4, 1}, Activation::identity, rng);
  EXPECT_THROW(mlp_forward(net, VectorXd::Zero(2)), InvalidInput);
}

TEST(MlpForward, Deterministic) {
  Rng rng(9);
  Mlp net = Mlp::create({3, 32, 32, 2}, Activation::identity, rng);
  MatrixXd x = testutil::random_matrix(10, 3, rng);
  MatrixXd a = forward(net, x), b = forward(net, x);
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()), 0);
}

TEST(MlpBackward, LinearLayerGradients) {
  Mlp net = Mlp::zeros({3, 1}, Activation::identity);
  VectorXd x(3), up(1);
  x << 1.5, -2.0, 0.25;
  up << 1.0;
  Backward b = mlp_backward(net, x, up);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(b.grads.weights[0](i, 0), x(i));
  EXPECT_EQ(b.grads.biases[0](0), 1.0);
}

TEST(MlpBackward, ZeroUpstreamGivesZeroGradients) {
  Rng rng(4);
  Mlp net = Mlp::create({3, 8, 8, 2}, Activation::tanh2, rng);
  Backward b = mlp_backward(net, VectorXd::Ones(3), VectorXd::Zero(2));
  for (std::size_t i = 0; i < b.grads.size(); ++i) EXPECT_EQ(b.grads.at(i), 0.0);
  EXPECT_EQ(b.input_grad.cwiseAbs().maxCoeff(), 0.0);
}

TEST(MlpBackward, ShapeMismatchRejected) {
  Rng rng(4);
  Mlp net = Mlp::create({3, 8, 2}, Activation::identity, rng);
  EXPECT_THROW(mlp_backward(net, VectorXd::Ones(3), VectorXd::Zero(3)), InvalidInput);
  EXPECT_THROW(mlp_backward(net, VectorXd::Ones(2), VectorXd::Zero(2)), InvalidInput);
}

TEST(MlpBackward, EveryEntryMatchesFiniteDifferences) {
  Rng rng(11);
  Mlp net = Mlp::create({3, 6, 5, 2}, Activation::tanh2, rng);
  VectorXd x = testutil::random_matrix(3, 1, rng).col(0);
  VectorXd up = testutil::random_matrix(2, 1, rng).col(0);
  Backward b = mlp_backward(net, x, up);
  auto f = [&](const Mlp& m) { return up.dot(mlp_forward(m, x)); };
  EXPECT_LT(testutil::max_rel_error_all(net, b.grads, f), 1e-4);
  // input gradient
  for (int i = 0; i < 3; ++i) {
    VectorXd xp = x, xm = x;
    xp(i) += 1e-6;
    xm(i) -= 1e-6;
    double fd = (up.dot(mlp_forward(net, xp)) - up.dot(mlp_forward(net, xm))) / 2e-6;
    EXPECT_NEAR(b.input_grad(0, i), fd, 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST(MlpBackward, SoftmaxOutputMatchesFiniteDifferences) {
  Rng rng(12);
  Mlp net = Mlp::create({2, 6, 3}, Activation::softmax, rng);
  VectorXd x = testutil::random_matrix(2, 1, rng).col(0);
  VectorXd up = testutil::random_matrix(3, 1, rng).col(0);
  Backward b = mlp_backward(net, x, up);
  auto f = [&](const Mlp& m) { return up.dot(mlp_forward(m, x)); };
  EXPECT_LT(testutil::max_rel_error_all(net, b.grads, f), 1e-4);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  Rng rng(2);
  Mlp net = Mlp::create({2, 4, 1}, Activation::identity, rng);
  Mlp before = net;
  AdamState st = AdamState::for_params(net);
  adam_step(net, net.zeros_like(), st);
  EXPECT_TRUE(identical(net, before));
  EXPECT_EQ(st.step_count, 1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Mlp net = Mlp::zeros({1, 1}, Activation::identity);
  AdamState st = AdamState::for_params(net, 0.01);
  Params g = net.zeros_like();
  g.weights[0](0, 0) = -3.7;
  adam_step(net, g, st);
  EXPECT_NEAR(net.weights[0](0, 0), 0.01 * 3.7 / (3.7 + 1e-8), 1e-15);
}

TEST(Adam, QuadraticDescentIsMonotone) {
  Mlp net = Mlp::zeros({1, 1}, Activation::identity);
  net.weights[0](0, 0) = 1.0;
  AdamState st = AdamState::for_params(net, 0.1);
  double prev = 1.0;
  for (int k = 0; k < 10; ++k) {
    Params g = net.zeros_like();
    g.weights[0](0, 0) = 2.0 * net.weights[0](0, 0);
    adam_step(net, g, st);
    const double w = std::abs(net.weights[0](0, 0));
    EXPECT_LT(w, prev);
    prev = w;
  }
}

TEST(Adam, PoisonedGradientNamesLayer) {
  Rng rng(5);
  Mlp net = Mlp::create({2, 3, 3, 1}, Activation::identity, rng);
  AdamState st = AdamState::for_params(net);
  Params g = net.zeros_like();
  g.biases[1](2) = std::numeric_limits<double>::quiet_NaN();
  try {
    adam_step(net, g, st);
    FAIL() << "expected PoisonedGradient";
  } catch (const PoisonedGradient& e) {
    EXPECT_EQ(e.layer(), 1);
  }
  EXPECT_EQ(st.step_count, 0);
}

TEST(Adam, ShapesPreservedAndSecondMomentNonNegative) {
  Rng rng(6);
  Mlp net = Mlp::create({3, 8, 2}, Activation::identity, rng);
  AdamState st = AdamState::for_params(net);
  MatrixXd x = testutil::random_matrix(16, 3, rng), t = testutil::random_matrix(16, 2, rng);
  for (int k = 0; k < 50; ++k) adam_step(net, testutil::squared_loss(net, x, t).grad, st);
  net.validate();
  EXPECT_TRUE(net.same_shape(st.first_moment));
  for (std::size_t i = 0; i < st.second_moment.size(); ++i) EXPECT_GE(st.second_moment.at(i), 0.0);
}

TEST(GradCheck, LinearLeastSquaresIsExact) {
  Rng rng(7);
  Mlp net = Mlp::create({4, 2}, Activation::identity, rng);
  MatrixXd x = testutil::random_matrix(8, 4, rng), t = testutil::random_matrix(8, 2, rng);
  EXPECT_LT(grad_check(net, [&](const Mlp& m) { return testutil::squared_loss(m, x, t); }, 10, rng), 1e-6);
}

TEST(GradCheck, ConstantLoss) {
  Rng rng(7);
  Mlp net = Mlp::create({4, 3, 2}, Activation::identity, rng);
  auto f = [](const Mlp& m) { return LossAndGrad{1.5, m.zeros_like()}; };
  EXPECT_LT(grad_check(net, f, 10, rng), 1e-6);
}

TEST(GradCheck, TwoHiddenLayerSquaredLoss) {
  Rng rng(8);
  Mlp net = Mlp::create({3, 16, 16, 2}, Activation::identity, rng);
  MatrixXd x = testutil::random_matrix(8, 3, rng), t = testutil::random_matrix(8, 2, rng);
  EXPECT_LT(grad_check(net, [&](const Mlp& m) { return testutil::squared_loss(m, x, t); }, 50, rng), 1e-4);
}

TEST(GradCheck, AllArtifactShapesOverTwentySeeds) {
  for (const auto& shape : artifact_shapes()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(1000 + seed);
      Mlp net = Mlp::create(shape.sizes, shape.out, rng);
      MatrixXd x = testutil::random_matrix(8, shape.sizes.front(), rng);
      MatrixXd t = testutil::random_matrix(8, shape.sizes.back(), rng);
      const double err =
          grad_check(net, [&](const Mlp& m) { return testutil::squared_loss(m, x, t); }, 40, rng);
      EXPECT_LT(err, 1e-4) << shape.name << " seed " << seed;
    }
  }
}

TEST(Snapshot, RoundTripIsBitExact) {
  Rng rng(13);
  Mlp net = Mlp::create({7, 32, 2}, Activation::tanh2, rng);
  net.weights[0](0, 0) = 1.0 / 3.0;
  net.biases[1](1) = -5e-310;  // subnormal
  std::stringstream ss;
  write_mlp(ss, net);
  Mlp back = read_mlp(ss);
  EXPECT_TRUE(identical(net, back));
  std::stringstream again;
  write_mlp(again, back);
  std::stringstream first;
  write_mlp(first, net);
  EXPECT_EQ(first.str(), again.str());
}

TEST(Snapshot, FileRoundTrip) {
  auto dir = testutil::scratch_dir("nn_snapshot");
  Rng rng(14);
  Mlp net = Mlp::create({3, 16, 16, 2}, Activation::identity, rng);
  save_mlp((dir / "a.mlp").string(), net);
  EXPECT_TRUE(identical(net, load_mlp((dir / "a.mlp").string())));
  EXPECT_THROW(load_mlp((dir / "missing.mlp").string()), IoError);
}

TEST(Snapshot, RejectsCorruptInput) {
  std::stringstream bad("h2o-mlp 2\n");
  EXPECT_THROW(read_mlp(bad), IoError);
  Rng rng(1);
  std::stringstream ss;
  write_mlp(ss, Mlp::create({2, 3, 1}, Activation::identity, rng));
  std::string text = ss.str();
  std::stringstream truncated(text.substr(0, text.size() / 2));
  EXPECT_THROW(read_mlp(truncated), IoError);
}

TEST(SoftUpdate, ExponentialTrailingAverage) {
  Rng rng(15);
  Mlp target = Mlp::create({2, 3, 1}, Activation::identity, rng);
  Mlp source = Mlp::create({2, 3, 1}, Activation::identity, rng);
  const double t0 = target.at(4), s0 = source.at(4);
  soft_update(target, source, 0.25);
  EXPECT_DOUBLE_EQ(target.at(4), 0.75 * t0 + 0.25 * s0);
  soft_update(target, source, 1.0);
  EXPECT_TRUE(identical(target, source));
}

TEST(Init, UniformWithinFanInBound) {
  Rng rng(16);
  Mlp net = Mlp::create({16, 64, 1}, Activation::identity, rng);
  EXPECT_LE(net.weights[0].cwiseAbs().maxCoeff(), 0.25);
  EXPECT_LE(net.weights[1].cwiseAbs().maxCoeff(), 0.125);
  EXPECT_THROW(Mlp::create({3, 0, 1}, Activation::identity, rng), InvalidInput);
}
