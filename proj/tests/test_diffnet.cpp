#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedadv/model.hpp"
#include "fedadv/optim.hpp"
#include "oracles.hpp"

using namespace fedadv;

namespace {

Tensor random_inputs(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t({rows, cols});
  for (auto& v : t.values()) v = u(rng);
  return t;
}

Tensor random_targets(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  Tensor t({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (auto& v : t.row(r)) s += v = u(rng);
    for (auto& v : t.row(r)) v /= s;
  }
  return t;
}

ModelParams random_params(const ModelSpec& spec, std::mt19937_64& rng, double scale = 0.5) {
  std::normal_distribution<double> n(0.0, scale);
  ModelParams p = ModelParams::zeros(spec);
  for (auto& v : p.values) v = n(rng);
  return p;
}

std::vector<std::vector<double>> to_rows(const Tensor& t) {
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < t.rows(); ++r) out.emplace_back(t.row(r).begin(), t.row(r).end());
  return out;
}

} // namespace

TEST(Forward, IdentityDenseLayer) {
  ModelSpec spec;
  spec.input = {1, 1, 2};
  spec.num_classes = 2;
  spec.layers = {Dense{2, 2, Activation::identity}};
  ModelParams p{{1, 0, 0, 1, 0, 0}};
  const Tensor out = forward(spec, p, Tensor::matrix(1, 2, {0.2, 0.7}));
  EXPECT_DOUBLE_EQ(out(0, 0), 0.2);
  EXPECT_DOUBLE_EQ(out(0, 1), 0.7);
}

TEST(Forward, SingleDenseHandArithmetic) {
  ModelSpec spec;
  spec.input = {1, 1, 2};
  spec.num_classes = 1;
  spec.layers = {Dense{2, 1, Activation::identity}};
  ModelParams p{{1, -1, 0.5}};
  EXPECT_DOUBLE_EQ(forward(spec, p, Tensor::matrix(1, 2, {1, 1}))(0, 0), 0.5);
}

TEST(Forward, MatchesHandRolledMlp) {
  std::mt19937_64 rng(7);
  const ModelSpec spec = ModelSpec::mlp(5, {7}, 3);
  const ModelParams p = random_params(spec, rng);
  const Tensor x = random_inputs(4, 5, rng);
  const Tensor got = forward(spec, p, x);
  const auto want = oracle::mlp_forward({5, 7, 3}, p.values, to_rows(x));
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(got(r, k), want[r][k], 1e-12);
  }
}

TEST(Forward, ShapeErrorsNameTheLayer) {
  ModelSpec bad = ModelSpec::mlp(4, {8}, 3);
  std::get<Dense>(bad.layers[1]).in = 9;
  try {
    (void)bad.layout();
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
  }
  const ModelSpec spec = ModelSpec::mlp(4, {8}, 3);
  const ModelParams p = ModelParams::zeros(spec);
  try {
    (void)forward(spec, p, Tensor({2, 5}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos) << e.what();
  }
  EXPECT_THROW((void)forward(spec, ModelParams{{1, 2, 3}}, Tensor({2, 4})), DimensionError);
}

TEST(Forward, ConvOutputGeometry) {
  const ModelSpec spec = ModelSpec::small_conv({1, 8, 8}, 4, 4);
  const auto lay = spec.layout();
  EXPECT_EQ(lay.layers[0].out, (InputShape{4, 8, 8}));
  EXPECT_EQ(lay.layers[1].out, (InputShape{8, 4, 4}));
  EXPECT_EQ(lay.layers[2].out.volume(), 4u);
}

TEST(Forward, ConvMatchesDirectConvolution) {
  // One 2x2 kernel, stride 1, no padding, on a 3x3 image.
  ModelSpec spec;
  spec.input = {1, 3, 3};
  spec.num_classes = 4;
  spec.layers = {Conv2d{1, 1, 2, 1, 0, Activation::identity}};
  ModelParams p{{1, 2, 3, 4, 0.5}};
  const Tensor x = Tensor::matrix(1, 9, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Tensor z = forward(spec, p, x);
  EXPECT_DOUBLE_EQ(z(0, 0), 1 * 1 + 2 * 2 + 3 * 4 + 4 * 5 + 0.5);
  EXPECT_DOUBLE_EQ(z(0, 3), 1 * 5 + 2 * 6 + 3 * 8 + 4 * 9 + 0.5);
}

TEST(Loss, UniformLogitsOneHot) {
  Tensor logits({1, 10});
  Tensor target({1, 10});
  target(0, 3) = 1;
  EXPECT_NEAR(loss_soft_ce(logits, target), std::log(10.0), 1e-12);
}

TEST(Loss, EqualsEntropyWhenLogitsAreLogTargets) {
  Tensor t = Tensor::matrix(1, 4, {0.1, 0.2, 0.3, 0.4});
  Tensor logits(t.shape());
  double entropy = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    logits[i] = std::log(t[i]);
    entropy -= t[i] * std::log(t[i]);
  }
  EXPECT_NEAR(loss_soft_ce(logits, t), entropy, 1e-12);
}

TEST(Loss, MatchesTermByTermOracle) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 2.0);
  Tensor logits({8, 5});
  for (auto& v : logits.values()) v = n(rng);
  const Tensor targets = random_targets(8, 5, rng);
  EXPECT_NEAR(loss_soft_ce(logits, targets), oracle::soft_ce(to_rows(logits), to_rows(targets)), 1e-12);
}

TEST(Loss, RejectsUnnormalizedTargets) {
  EXPECT_THROW((void)loss_soft_ce(Tensor({1, 3}), Tensor::matrix(1, 3, {0.5, 0.2, 0.2})), ValidationError);
  EXPECT_THROW((void)loss_soft_ce(Tensor({1, 2}), Tensor::matrix(1, 2, {1.5, -0.5})), ValidationError);
}

TEST(Loss, StaysFiniteForExtremeLogits) {
  Tensor logits = Tensor::matrix(1, 2, {0, 1e4});
  Tensor target = Tensor::matrix(1, 2, {1, 0});
  const double l = loss_soft_ce(logits, target);
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, -std::log(1e-12), 1e-9);
}

TEST(LossProperty, NonNegativeAndShiftInvariant) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 3.0);
  std::uniform_int_distribution<int> cls(0, 5);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor logits({1, 6});
    for (auto& v : logits.values()) v = n(rng);
    Tensor onehot({1, 6});
    onehot(0, static_cast<std::size_t>(cls(rng))) = 1;
    const double base = loss_soft_ce(logits, onehot);
    EXPECT_GE(base, 0.0);
    Tensor shifted = logits;
    const double c = n(rng) * 10;
    for (auto& v : shifted.values()) v += c;
    EXPECT_NEAR(loss_soft_ce(shifted, onehot), base, 1e-9);
    const Tensor soft = random_targets(1, 6, rng);
    Tensor shifted_soft = logits;
    for (auto& v : shifted_soft.values()) v -= c;
    EXPECT_NEAR(loss_soft_ce(shifted_soft, soft), loss_soft_ce(logits, soft), 1e-9);
  }
}

TEST(GradParams, ZeroLinearModelBiasGradientIsMeanResidual) {
  ModelSpec spec;
  spec.input = {1, 1, 2};
  spec.num_classes = 3;
  spec.layers = {Dense{2, 3, Activation::identity}};
  const ModelParams p = ModelParams::zeros(spec);
  LabeledBatch batch;
  batch.inputs = Tensor::matrix(2, 2, {0.3, 0.6, 0.6, 0.3});
  batch.targets = Tensor::matrix(2, 3, {1, 0, 0, 0, 1, 0});
  batch.hard_labels = {0, 1};
  const ModelParams g = grad_params(spec, p, batch);
  // softmax is uniform: bias gradient = mean over batch of (1/3 - t).
  EXPECT_NEAR(g.values[6], 1.0 / 3 - 0.5, 1e-15);
  EXPECT_NEAR(g.values[7], 1.0 / 3 - 0.5, 1e-15);
  EXPECT_NEAR(g.values[8], 1.0 / 3, 1e-15);
}

TEST(GradParams, MatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (const ModelSpec& spec : {ModelSpec::mlp(6, {5, 4}, 3), ModelSpec::small_conv({1, 5, 5}, 3, 2)}) {
    const ModelParams p = random_params(spec, rng);
    const Tensor x = random_inputs(3, spec.input_dim(), rng);
    const Tensor t = random_targets(3, 3, rng);
    const ModelParams g = loss_and_grad(spec, p, x, t).grad;
    const auto fd = oracle::central_difference(p.values, [&](const std::vector<Real>& v) {
      return loss_soft_ce(forward(spec, ModelParams{v}, x), t);
    });
    for (std::size_t i = 0; i < fd.size(); ++i) {
      EXPECT_LT(oracle::relative_error(g.values[i], fd[i]), 1e-4) << "coordinate " << i;
    }
  }
}

TEST(GradParams, DuplicatedBatchGivesSameGradient) {
  std::mt19937_64 rng(9);
  const ModelSpec spec = ModelSpec::mlp(4, {6}, 3);
  const ModelParams p = random_params(spec, rng);
  const Tensor x = random_inputs(5, 4, rng);
  const Tensor t = random_targets(5, 3, rng);
  const Tensor* xs[] = {&x, &x};
  const Tensor* ts[] = {&t, &t};
  const auto g1 = loss_and_grad(spec, p, x, t).grad;
  const auto g2 = loss_and_grad(spec, p, concat_rows(xs), concat_rows(ts)).grad;
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g1.values[i], g2.values[i], 1e-12);
}

TEST(GradInput, ConstantModelHasZeroGradient) {
  const ModelSpec spec = ModelSpec::mlp(4, {3}, 2);
  const ModelParams p = ModelParams::zeros(spec);
  const Tensor g = grad_input(spec, p, Tensor({2, 4}, 0.5), Tensor::matrix(2, 2, {1, 0, 0, 1}));
  for (Real v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(GradInput, LogisticHandDerivative) {
  // logits (0, w x + b): P(class 1) = sigmoid(w x + b); dL/dx = (sigmoid - y) w.
  ModelSpec spec;
  spec.input = {1, 1, 1};
  spec.num_classes = 2;
  spec.layers = {Dense{1, 2, Activation::identity}};
  const double w = 1.7, b = -0.4, x = 0.3;
  ModelParams p{{0, w, 0, b}};
  for (int y : {0, 1}) {
    Tensor t({1, 2});
    t(0, static_cast<std::size_t>(y)) = 1;
    const double s = 1 / (1 + std::exp(-(w * x + b)));
    EXPECT_NEAR(grad_input(spec, p, Tensor::matrix(1, 1, {x}), t)[0], (s - y) * w, 1e-12);
  }
}

TEST(GradInput, MatchesFiniteDifferencesAndLeavesParamsAlone) {
  std::mt19937_64 rng(13);
  const ModelSpec spec = ModelSpec::mlp(7, {9, 5}, 4);
  const ModelParams p = random_params(spec, rng);
  const ModelParams before = p;
  const Tensor x = random_inputs(3, 7, rng);
  const Tensor t = random_targets(3, 4, rng);
  const Tensor g = grad_input(spec, p, x, t);
  const auto fd = oracle::central_difference(x.storage(), [&](const std::vector<Real>& v) {
    return loss_soft_ce(forward(spec, p, Tensor(x.shape(), v)), t);
  });
  for (std::size_t i = 0; i < fd.size(); ++i) EXPECT_LT(oracle::relative_error(g[i], fd[i]), 1e-4);
  EXPECT_EQ(p, before);
}

TEST(Sgd, VanillaStep) {
  ModelParams p{{1}};
  OptimizerState s{{}, 0, 0, 0.1, {}};
  sgd_step(p, ModelParams{{2}}, s, 0.1);
  EXPECT_NEAR(p.values[0], 0.8, 1e-15);
}

TEST(Sgd, MomentumTwoSteps) {
  ModelParams p{{1}};
  OptimizerState s{{}, 0.9, 0, 1, {}};
  sgd_step(p, ModelParams{{1}}, s, 1);
  EXPECT_DOUBLE_EQ(p.values[0], 0.0);
  sgd_step(p, ModelParams{{1}}, s, 1);
  EXPECT_DOUBLE_EQ(p.values[0], -1.9);
}

TEST(Sgd, ZeroGradientIsFixedPoint) {
  ModelParams p{{0.25, -3}};
  OptimizerState s{{}, 0, 0, 1, {}};
  sgd_step(p, ModelParams{{0, 0}}, s, 0.5);
  EXPECT_EQ(p, (ModelParams{{0.25, -3}}));
}

TEST(Sgd, WeightDecayFoldsIntoGradient) {
  ModelParams p{{2}};
  OptimizerState s{{}, 0, 0.5, 1, {}};
  sgd_step(p, ModelParams{{0}}, s, 0.1);
  EXPECT_NEAR(p.values[0], 2 - 0.1 * 0.5 * 2, 1e-15);
}

TEST(Sgd, RejectsNonFiniteGradient) {
  ModelParams p{{1}};
  OptimizerState s;
  EXPECT_THROW(sgd_step(p, ModelParams{{std::nan("")}}, s, 0.1), NumericError);
}

TEST(LrSchedule, StepDecay) {
  const std::vector<int> ms{100, 150};
  EXPECT_DOUBLE_EQ(lr_schedule(0, 0.1, ms), 0.1);
  EXPECT_DOUBLE_EQ(lr_schedule(99, 0.1, ms), 0.1);
  EXPECT_NEAR(lr_schedule(100, 0.1, ms), 0.01, 1e-17);
  EXPECT_NEAR(lr_schedule(150, 0.1, ms), 0.001, 1e-18);
  EXPECT_DOUBLE_EQ(lr_schedule(1000, 0.1, {}), 0.1);
}

TEST(OptimizerState, Validation) {
  OptimizerState s;
  s.momentum = 1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = OptimizerState{};
  s.milestones = {5, 5};
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Params, FlattenUnflattenRoundTrip) {
  std::mt19937_64 rng(17);
  for (const ModelSpec& spec : {ModelSpec::mlp(16, {128, 64}, 4), ModelSpec::small_conv({3, 8, 8}, 10)}) {
    const ModelParams p = random_params(spec, rng);
    const auto tensors = unflatten(spec, p);
    EXPECT_EQ(flatten(spec, tensors), p);
    EXPECT_EQ(tensors.size(), spec.layers.size());
  }
}

TEST(Params, InitIsSeededAndBounded) {
  const ModelSpec spec = ModelSpec::mlp(16, {128, 64}, 4);
  const auto a = ModelParams::init(spec, 42), b = ModelParams::init(spec, 42), c = ModelParams::init(spec, 43);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  const auto lay = spec.layout();
  const double bound = std::sqrt(6.0 / 16);
  for (std::size_t i = 0; i < lay.layers[0].weight_count; ++i) EXPECT_LE(std::abs(a.values[i]), bound);
  for (std::size_t i = 0; i < lay.layers[0].bias_count; ++i) EXPECT_EQ(a.values[lay.layers[0].bias_offset + i], 0.0);
}

TEST(Determinism, ForwardAndGradientsAreBitIdentical) {
  std::mt19937_64 rng(21);
  const ModelSpec spec = ModelSpec::mlp(8, {16}, 3);
  const ModelParams p = random_params(spec, rng);
  const Tensor x = random_inputs(4, 8, rng);
  const Tensor t = random_targets(4, 3, rng);
  EXPECT_EQ(forward(spec, p, x), forward(spec, p, x));
  EXPECT_EQ(loss_and_grad(spec, p, x, t).grad, loss_and_grad(spec, p, x, t).grad);
}

TEST(Batch, ValidateChecksArgmax) {
  LabeledBatch b;
  b.inputs = Tensor({1, 2});
  b.targets = Tensor::matrix(1, 2, {0.9, 0.1});
  b.hard_labels = {1};
  EXPECT_THROW(b.validate(), ValidationError);
  b.hard_labels = {0};
  EXPECT_NO_THROW(b.validate());
}
