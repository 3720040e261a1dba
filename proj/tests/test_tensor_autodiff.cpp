#include <gtest/gtest.h>

#include <cmath>

#include "episodic/grad_check.hpp"
#include "episodic/ops.hpp"
#include "support/grad_fixtures.hpp"

using namespace episodic;
using namespace episodic::fixtures;

TEST(TensorTest, ShapeInvariant) {
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor(Shape{0, 2}), ShapeError);
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_THROW(t.reshaped({4}), ShapeError);
}

TEST(ForwardTest, Conv1dHandExample) {
  Var x(Tensor(Shape{1, 3, 1}, {1, 2, 3}));
  Var k(Tensor(Shape{2, 1, 1}, {1, 1}));
  Var b(Tensor(Shape{1}, {0}));
  const Var y = conv1d(x, k, b);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 1}));
  EXPECT_EQ(y.value()[0], 3.0);
  EXPECT_EQ(y.value()[1], 5.0);
}

TEST(ForwardTest, ReluAndMaxOverTime) {
  const Var r = relu(Var(Tensor::vector({1, -1})));
  EXPECT_EQ(r.value(), Tensor::vector({1, 0}));
  const Var m = max_over_time(Var(Tensor::matrix(2, 2, {1, 0, 0, 2})));
  EXPECT_EQ(m.value(), Tensor::vector({1, 2}));
}

TEST(ForwardTest, AttentionSinglePositionReturnsValue) {
  Rng rng(3);
  Var q(random_tensor({2, 1, 4}, rng)), k(random_tensor({2, 1, 4}, rng)), v(random_tensor({2, 1, 4}, rng));
  const Var y = scaled_dot_product_attention(q, k, v, 2);
  EXPECT_LE(max_abs_diff(y.value(), v.value()), 1e-15);
}

TEST(ForwardTest, MatmulIdentity) {
  Rng rng(4);
  Tensor eye(Shape{3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  Var a(random_tensor({3, 5}, rng));
  EXPECT_EQ(matmul(Var(eye), a).value(), a.value());
}

TEST(ForwardTest, ShapeErrorsNameOpAndShapes) {
  Var a(Tensor(Shape{2, 3})), b(Tensor(Shape{4, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("[4, 2]"), std::string::npos);
  }
  Var x(Tensor(Shape{1, 3, 2})), k(Tensor(Shape{4, 2, 1})), bias(Tensor(Shape{1}));
  EXPECT_THROW(conv1d(x, k, bias), ShapeError);
}

TEST(ForwardTest, NonFiniteOutputIsAnError) {
  Var a(Tensor::vector({1e308, 1e308}));
  EXPECT_THROW(scale(a, 10.0), NumericError);
}

TEST(ForwardTest, EmbeddingGatherRejectsOutOfRangeIds) {
  Var table(Tensor(Shape{3, 2}, 1.0));
  std::vector<std::int64_t> ids{0, 3};
  EXPECT_THROW(embedding_gather(table, ids, {2}), DataError);
}

TEST(BackwardTest, ReluSubgradient) {
  Var x(Tensor::vector({1, -1}), true);
  backward(sum(relu(x)));
  EXPECT_EQ(x.grad(), Tensor::vector({1, 0}));
  Var z(Tensor::vector({0.0}), true);
  backward(sum(relu(z)));
  EXPECT_EQ(z.grad()[0], 0.0);
}

TEST(BackwardTest, DotWithSelf) {
  Var x(Tensor::vector({2, 3}), true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad(), Tensor::vector({4, 6}));
}

TEST(BackwardTest, MatrixVectorProduct) {
  Var w(Tensor::matrix(2, 2, {0.3, -1.0, 2.0, 0.5}), true);
  Var v(Tensor::matrix(2, 1, {1, 2}));
  backward(sum(matmul(w, v)));
  EXPECT_EQ(w.grad(), Tensor::matrix(2, 2, {1, 2, 1, 2}));
}

TEST(BackwardTest, LossGradientIsOne) {
  Var x(Tensor::vector({1, 2}), true);
  Var loss = sum(x);
  backward(loss);
  EXPECT_EQ(x.grad(), Tensor::vector({1, 1}));
}

TEST(BackwardTest, NonScalarLossRejected) {
  Var x(Tensor::vector({1, 2}), true);
  EXPECT_THROW(backward(relu(x)), ShapeError);
}

TEST(BackwardTest, ReleasedGraphRejected) {
  Var x(Tensor::vector({1, 2}), true);
  Var loss = sum(mul(x, x));
  backward(loss);
  EXPECT_THROW(backward(loss), std::logic_error);
}

TEST(BackwardTest, MaxOverTimeTiesRouteToFirst) {
  Var x(Tensor::matrix(3, 1, {2, 2, 1}), true);
  backward(sum(max_over_time(x)));
  EXPECT_EQ(x.grad(), Tensor::matrix(3, 1, {1, 0, 0}));
}

TEST(BackwardTest, ParameterSetGradientsByName) {
  ParameterSet ps;
  ps.add("layer.w", Tensor::vector({1, 2}));
  ps.add("layer.unused", Tensor::vector({5}));
  backward(sum(mul(ps.get("layer.w"), ps.get("layer.w"))));
  auto g = ps.gradients();
  EXPECT_EQ(g.at("layer.w"), Tensor::vector({2, 4}));
  EXPECT_EQ(g.at("layer.unused"), Tensor::vector({0}));
  EXPECT_EQ(g.at("layer.w").shape(), ps.get("layer.w").shape());
}

TEST(GradCheckTest, QuadraticIsExact) {
  auto f = [](const std::vector<Var>& in) { return sum(mul(in[0], in[0])); };
  Rng rng(11);
  const auto report = grad_check(f, {random_tensor({7}, rng, -3, 3)});
  EXPECT_LE(report.max_rel_err, 1e-7);
}

TEST(GradCheckTest, ConstantHasZeroGradient) {
  auto f = [](const std::vector<Var>& in) {
    return sum(scale(in[0], 0.0));
  };
  const auto report = grad_check(f, {Tensor::vector({1, 2, 3})});
  for (double a : report.analytic) EXPECT_EQ(a, 0.0);
  for (double n : report.numeric) EXPECT_EQ(n, 0.0);
  EXPECT_EQ(report.max_rel_err, 0.0);
}

// Every primitive at 10 random points.
TEST(GradCheckTest, EveryPrimitive) {
  for (const auto& c : primitive_cases()) EXPECT_LE(run_case(c), 1e-4) << c.name;
}

TEST(PropertyTest, SoftmaxIsADistribution) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Var y = softmax(Var(random_tensor({4, 7}, rng, -20, 20)), -1);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_GE(y.value().at(r, j), 0.0);
        s += y.value().at(r, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(PropertyTest, LayerNormStandardizesRows) {
  Rng rng(6);
  const Tensor x = random_tensor({5, 16}, rng, -10, 10);
  const Var y = layer_norm(Var(x), Var(Tensor(Shape{16}, 1.0)), Var(Tensor(Shape{16}, 0.0)));
  for (std::size_t r = 0; r < 5; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 16; ++j) mu += y.value().at(r, j);
    mu /= 16;
    for (std::size_t j = 0; j < 16; ++j) var += std::pow(y.value().at(r, j) - mu, 2);
    var /= 16;
    EXPECT_LE(std::abs(mu), 1e-9);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(PropertyTest, EvalModeIsPure) {
  Rng rng(7);
  const Tensor x = random_tensor({6, 3}, rng);
  BatchNormState st{Tensor::vector({0.2, 0.0, -0.1}), Tensor::vector({1.0, 0.5, 2.0})};
  const BatchNormState before = st;
  Var g(Tensor(Shape{3}, 1.0)), b(Tensor(Shape{3}, 0.0));
  const Var y1 = batch_norm(Var(x), g, b, st, Mode::eval);
  const Var y2 = batch_norm(Var(x), g, b, st, Mode::eval);
  EXPECT_EQ(y1.value(), y2.value());
  EXPECT_EQ(st.running_mean, before.running_mean);
  EXPECT_EQ(st.running_var, before.running_var);
  const Var d1 = dropout(Var(x), 0.5, Mode::eval, nullptr);
  EXPECT_EQ(d1.value(), x);
}

TEST(PropertyTest, BatchNormTrainUpdatesRunningStats) {
  Var x(Tensor::matrix(2, 1, {1.0, 3.0}));
  BatchNormState st{Tensor(Shape{1}, 0.0), Tensor(Shape{1}, 1.0)};
  batch_norm(x, Var(Tensor(Shape{1}, 1.0)), Var(Tensor(Shape{1}, 0.0)), st, Mode::train);
  EXPECT_DOUBLE_EQ(st.running_mean[0], 0.1 * 2.0);
  // unbiased batch variance of {1, 3} is 2
  EXPECT_DOUBLE_EQ(st.running_var[0], 0.9 + 0.1 * 2.0);
  // zero-variance batch stays finite
  Var c(Tensor::matrix(3, 1, {2.0, 2.0, 2.0}));
  const Var y = batch_norm(c, Var(Tensor(Shape{1}, 1.0)), Var(Tensor(Shape{1}, 0.0)), st, Mode::train);
  EXPECT_TRUE(y.value().all_finite());
}

TEST(PropertyTest, SeededDropoutIsReproducible) {
  Rng rng(8);
  const Tensor x = random_tensor({10, 10}, rng);
  Rng a(42), b(42);
  EXPECT_EQ(dropout(Var(x), 0.4, Mode::train, &a).value(), dropout(Var(x), 0.4, Mode::train, &b).value());
}
