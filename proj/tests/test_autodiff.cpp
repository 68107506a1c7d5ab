#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "vqc/autodiff.hpp"

namespace vqc::ad {
namespace {

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Largest relative error between backward and central differences over all
// coordinates of all inputs.
double fd_max_rel_error(const std::vector<Array>& inputs, const Builder& build,
                        double step = 1e-5, double floor = 1e-6) {
  auto eval = [&](const std::vector<Array>& xs) {
    Tape tape;
    std::vector<Var> leaves;
    for (const Array& x : xs) leaves.push_back(tape.leaf(x));
    return tape.value(build(tape, leaves)).item();
  };
  Tape tape;
  std::vector<Var> leaves;
  for (const Array& x : inputs) leaves.push_back(tape.leaf(x));
  tape.backward(build(tape, leaves));

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Array analytic = tape.grad(leaves[i]);
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      std::vector<Array> plus = inputs;
      std::vector<Array> minus = inputs;
      plus[i][j] += step;
      minus[i][j] -= step;
      const double numeric = (eval(plus) - eval(minus)) / (2.0 * step);
      const double denom = std::max({std::abs(analytic[j]), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic[j] - numeric) / denom);
    }
  }
  return worst;
}

Array random_array(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Array a(r, c);
  for (auto& x : a.data()) x = d(rng);
  return a;
}

TEST(Autodiff, AddValueAndGradient) {
  Tape tape;
  const Var a = tape.leaf(Array::row({1.0, 2.0}));
  const Var b = tape.leaf(Array::row({3.0, 4.0}));
  const Var c = a + b;
  EXPECT_EQ(c.value(), Array::row({4.0, 6.0}));
  tape.backward(sum(c));
  EXPECT_EQ(tape.grad(a), Array::row({1.0, 1.0}));
  EXPECT_EQ(tape.grad(b), Array::row({1.0, 1.0}));
}

TEST(Autodiff, SquareAtThree) {
  Tape tape;
  const Var x = tape.leaf(Array::scalar(3.0));
  const Var y = square(x);
  EXPECT_EQ(y.value().item(), 9.0);
  tape.backward(y);
  EXPECT_EQ(tape.grad(x).item(), 6.0);
}

TEST(Autodiff, LeafLossHasUnitGradient) {
  Tape tape;
  const Var x = tape.leaf(Array::scalar(-2.5));
  tape.backward(x);
  EXPECT_EQ(tape.grad(x).item(), 1.0);
}

TEST(Autodiff, ChainSquareSum) {
  Tape tape;
  const Var x = tape.leaf(Array::row({1.0, 2.0}));
  tape.backward(sum(square(x)));
  EXPECT_EQ(tape.grad(x), Array::row({2.0, 4.0}));
}

TEST(Autodiff, MatmulKnownProduct) {
  Tape tape;
  const Var a = tape.constant(Array(2, 2, {1, 2, 3, 4}));
  const Var b = tape.constant(Array(2, 2, {5, 6, 7, 8}));
  EXPECT_EQ(matmul(a, b).value(), Array(2, 2, {19, 22, 43, 50}));
  const Var eye = tape.constant(Array(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  const Var v = tape.constant(Array(3, 1, {0.5, -1.5, 2.0}));
  EXPECT_EQ(matmul(eye, v).value(), v.value());
}

TEST(Autodiff, MatmulGradientMatchesFiniteDifferences) {
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const double err = fd_max_rel_error({random_array(3, 4, rng), random_array(4, 2, rng)},
                                        [](Tape&, const std::vector<Var>& x) {
                                          return sum(square(matmul(x[0], x[1])));
                                        });
    EXPECT_LT(err, 1e-6);
  }
}

TEST(Autodiff, ActivationsAtZero) {
  Tape tape;
  const Var x = tape.leaf(Array::scalar(0.0));
  const Var t = tanh(x);
  EXPECT_EQ(t.value().item(), 0.0);
  tape.backward(t);
  EXPECT_EQ(tape.grad(x).item(), 1.0);
  tape.zero_grad();
  const Var s = sigmoid(x);
  EXPECT_EQ(s.value().item(), 0.5);
  tape.backward(s);
  EXPECT_EQ(tape.grad(x).item(), 0.25);
}

TEST(Autodiff, ReluMatchesFiniteDifferencesAwayFromKink) {
  Rng rng(2);
  std::uniform_real_distribution<double> mag(0.01, 2.0);
  std::bernoulli_distribution sign(0.5);
  for (int i = 0; i < 20; ++i) {
    Array a(2, 5);
    for (auto& v : a.data()) v = sign(rng) ? mag(rng) : -mag(rng);
    const double err = fd_max_rel_error(
        {a}, [](Tape&, const std::vector<Var>& x) { return sum(square(relu(x[0]))); });
    EXPECT_LT(err, 1e-6);
  }
}

TEST(Autodiff, SumAndMean) {
  Tape tape;
  const Var x = tape.leaf(Array(1, 4, 1.0));
  const Var s = sum(x);
  EXPECT_EQ(s.value().item(), 4.0);
  tape.backward(s);
  EXPECT_EQ(tape.grad(x), Array(1, 4, 1.0));
  tape.zero_grad();
  tape.backward(mean(x));
  EXPECT_EQ(tape.grad(x), Array(1, 4, 0.25));
}

TEST(Autodiff, StopGradient) {
  Tape tape;
  const Var x = tape.leaf(Array::row({1.0, 2.0, 3.0}));
  const Var sg = stop_gradient(x);
  EXPECT_EQ(sg.value(), Array::row({1.0, 2.0, 3.0}));
  tape.backward(sum(sg));
  EXPECT_EQ(tape.grad(x), Array(1, 3, 0.0));

  tape.zero_grad();
  const Var st = sum(x - stop_gradient(x));
  EXPECT_EQ(st.value().item(), 0.0);
  tape.backward(st);
  EXPECT_EQ(tape.grad(x), Array(1, 3, 1.0));
}

TEST(Autodiff, LeafGradientsAccumulateAcrossBackwardCalls) {
  Tape tape;
  const Var x = tape.leaf(Array::row({1.0, 2.0}));
  const Var loss = sum(square(x));
  tape.backward(loss);
  tape.backward(loss);
  EXPECT_EQ(tape.grad(x), Array::row({4.0, 8.0}));
  tape.zero_grad();
  EXPECT_EQ(tape.grad(x), Array(1, 2, 0.0));
}

TEST(Autodiff, ReusedNodeSumsBothPaths) {
  Tape tape;
  const Var x = tape.leaf(Array::scalar(2.0));
  const Var y = x * x + scale(x, 3.0);
  tape.backward(y);
  EXPECT_EQ(tape.grad(x).item(), 7.0);
}

TEST(Autodiff, RandomCompositeMatchesFiniteDifferences) {
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const Array x = random_array(3, 4, rng);
    const Array w = random_array(5, 4, rng);
    const Array b = random_array(1, 5, rng);
    const Array d = random_array(3, 5, rng, 1.0, 2.0);
    const double err = fd_max_rel_error({x, w, b, d}, [](Tape& t, const std::vector<Var>& v) {
      const Var h = tanh(linear(v[0], v[1], v[2]));
      const Var g = sigmoid(h) / v[3] - square(h);
      const Var c = concat({slice(g, 0, 2, 1), sqrt(square(g) + t.constant(Array::scalar(0.5)))}, 1);
      return mean(sum(c, 1)) + sum(mean(g, 0));
    });
    EXPECT_LT(err, 1e-6);
  }
}

TEST(Autodiff, GatherColumnsAndNormalizePairs) {
  Tape tape;
  const Var src = tape.leaf(Array(2, 3, {1, 2, 3, 4, 5, 6}));
  const std::vector<std::size_t> idx{2, 0};
  const Var g = gather_columns(src, idx);
  EXPECT_EQ(g.value(), Array(2, 2, {3, 6, 1, 4}));
  tape.backward(sum(g));
  EXPECT_EQ(tape.grad(src), Array(2, 3, {1, 0, 1, 1, 0, 1}));

  const Var a = tape.leaf(Array(1, 4, {3.0, 0.0, 4.0, 0.0}));
  const Var n = normalize_pairs(a);
  EXPECT_NEAR(n.value()[0], 0.6, 1e-15);
  EXPECT_NEAR(n.value()[2], 0.8, 1e-15);
  EXPECT_EQ(n.value()[1], 1.0);  // zero pair falls back to (1, 0)
  EXPECT_EQ(n.value()[3], 0.0);
  tape.backward(sum(n));
  EXPECT_EQ(tape.grad(a)[1], 0.0);
  EXPECT_EQ(tape.grad(a)[3], 0.0);
}

TEST(Autodiff, ShapeErrorsThrow) {
  Tape tape;
  const Var a = tape.constant(Array(2, 3));
  const Var b = tape.constant(Array(3, 2));
  EXPECT_THROW(add(a, b), InvalidArgument);
  EXPECT_THROW(matmul(a, a), InvalidArgument);
  EXPECT_THROW(sqrt(tape.constant(Array::scalar(-1.0))), InvalidArgument);
  EXPECT_THROW(tape.backward(a), InvalidArgument);
}

TEST(Autodiff, FreezeReplaysStoppedValues) {
  Freeze freeze;
  freeze.mode = Freeze::Mode::record;
  {
    Tape tape;
    tape.set_freeze(&freeze);
    stop_gradient(tape.leaf(Array::scalar(5.0)));
    tape.choose({1, 2});
  }
  freeze.start_replay();
  Tape tape;
  tape.set_freeze(&freeze);
  EXPECT_EQ(stop_gradient(tape.leaf(Array::scalar(7.0))).value().item(), 5.0);
  EXPECT_EQ(tape.choose({0, 0}), (std::vector<std::size_t>{1, 2}));
}

}  // namespace
}  // namespace vqc::ad
