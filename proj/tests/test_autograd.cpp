#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "basinlab/autograd.hpp"

using namespace basinlab;

namespace {

using Fn = std::function<Var<double>(const std::vector<Var<double>>&)>;

// Central-difference check of d(sum of f)/d(inputs) at a smooth point.
void check_gradient(const Fn& f, std::vector<Tensor<double>> inputs, double h = 1e-6, double tol = 1e-6) {
  auto run = [&](const std::vector<Tensor<double>>& in, bool grad) {
    std::vector<Var<double>> vars;
    for (const auto& t : in) vars.push_back(Var<double>::leaf(t, true));
    const Var<double> out = f(vars);
    Var<double> total = out;
    if (out.value().size() != 1) {
      // Weighted sum so every output element contributes differently.
      Tensor<double> w(out.value().shape());
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.1 * static_cast<double>(i % 7);
      const auto prod = mul(out, Var<double>::constant(w));
      Tensor<double> ones(Shape{prod.value().cols(), 1}, 1.0);
      Tensor<double> left(Shape{1, prod.value().rows()}, 1.0);
      total = matmul(matmul(Var<double>::constant(left), prod), Var<double>::constant(ones));
    }
    if (grad) backward(total);
    return std::pair{total.value()[0], vars};
  };
  auto [value, vars] = run(inputs, true);
  (void)value;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    for (std::size_t i = 0; i < inputs[a].size(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[a][i] += h;
      minus[a][i] -= h;
      const double fd = (run(plus, false).first - run(minus, false).first) / (2 * h);
      const double g = vars[a].grad()[i];
      EXPECT_NEAR(g, fd, tol * std::max(1.0, std::abs(fd))) << "input " << a << " element " << i;
    }
  }
}

Tensor<double> random(Shape s, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Tensor<double> t(std::move(s));
  for (auto& v : t.storage()) v = g(rng);
  return t;
}

}  // namespace

TEST(Autograd, ElementwiseOps) {
  std::mt19937_64 rng(2);
  check_gradient([](auto& v) { return add(v[0], v[1]); }, {random({3, 4}, rng), random({3, 4}, rng)});
  check_gradient([](auto& v) { return mul(v[0], v[1]); }, {random({3, 4}, rng), random({3, 4}, rng)});
  check_gradient([](auto& v) { return scale(v[0], -1.7); }, {random({2, 5}, rng)});
}

TEST(Autograd, AddRequiresSameShape) {
  const auto a = Var<double>::constant(Tensor<double>(Shape{4, 3}));
  const auto b = Var<double>::constant(Tensor<double>(Shape{3}));
  EXPECT_THROW(add(a, b), DimensionError);
}

TEST(Autograd, MatmulAndLinear) {
  std::mt19937_64 rng(4);
  check_gradient([](auto& v) { return matmul(v[0], v[1]); }, {random({3, 4}, rng), random({4, 2}, rng)});
  check_gradient([](auto& v) { return linear(v[0], v[1], v[2]); }, {random({5, 3}, rng), random({2, 3}, rng), random({2}, rng)});
}

TEST(Autograd, ReluAwayFromKink) {
  std::mt19937_64 rng(5);
  auto x = random({4, 4}, rng);
  for (auto& v : x.storage()) v += v > 0 ? 0.1 : -0.1;
  check_gradient([](auto& v) { return relu(v[0]); }, {x});
}

TEST(Autograd, LayerNorm) {
  std::mt19937_64 rng(6);
  check_gradient([](auto& v) { return layer_norm(v[0], v[1], v[2]); },
                 {random({4, 6}, rng, 2.0), random({6}, rng), random({6}, rng)}, 1e-6, 1e-5);
}

TEST(Autograd, SoftmaxFamily) {
  std::mt19937_64 rng(7);
  check_gradient([](auto& v) { return softmax(v[0]); }, {random({3, 5}, rng)});
  check_gradient([](auto& v) { return log_softmax(v[0]); }, {random({3, 5}, rng)});
  const std::vector<int> labels{0, 4, 2};
  check_gradient([&](auto& v) { return cross_entropy(v[0], std::span<const int>(labels)); }, {random({3, 5}, rng)});
}

TEST(Autograd, KlDivergence) {
  std::mt19937_64 rng(8);
  const auto p = softmax(Var<double>::constant(random({3, 4}, rng))).value();
  check_gradient([&](auto& v) { return kl_divergence_log(Var<double>::constant(p), log_softmax(v[0])); }, {random({3, 4}, rng)});
  check_gradient([&](auto& v) { return kl_divergence(Var<double>::constant(p), softmax(v[0])); }, {random({3, 4}, rng)});
}

TEST(Autograd, CrossEntropyValue) {
  const auto logits = Var<double>::constant(Tensor<double>::matrix({{0.0, std::log(3.0)}}));
  const std::vector<int> y{1};
  EXPECT_NEAR(cross_entropy(logits, std::span<const int>(y)).value().item(), std::log(4.0 / 3.0), 1e-15);
}

// 2 -> 1 -> 2 network worked out by hand:
//   z = 0.5*1 - 0.25*2 + 0.1 = 0.1, h = relu(z) = 0.1, logits = (0.1, -0.1)
//   label 0: loss = log(1 + e^-0.2); dlogits = (p0 - 1, 1 - p0) with p0 = sigmoid(0.2)
TEST(Autograd, TinyNetworkByHand) {
  auto x = Var<double>::constant(Tensor<double>::matrix({{1.0, 2.0}}));
  auto w1 = Var<double>::leaf(Tensor<double>::matrix({{0.5, -0.25}}));
  auto b1 = Var<double>::leaf(Tensor<double>::vector({0.1}));
  auto w2 = Var<double>::leaf(Tensor<double>::matrix({{1.0}, {-1.0}}));
  auto b2 = Var<double>::leaf(Tensor<double>::vector({0.0, 0.0}));
  const std::vector<int> y{0};
  const auto loss = cross_entropy(linear(relu(linear(x, w1, b1)), w2, b2), std::span<const int>(y));
  backward(loss);
  const double p0 = 1.0 / (1.0 + std::exp(-0.2));
  EXPECT_NEAR(loss.value().item(), std::log1p(std::exp(-0.2)), 1e-15);
  const double d = p0 - 1.0;  // dloss/dlogit0; dloss/dlogit1 = -d
  EXPECT_NEAR(w2.grad()[0], d * 0.1, 1e-15);
  EXPECT_NEAR(w2.grad()[1], -d * 0.1, 1e-15);
  EXPECT_NEAR(b2.grad()[0], d, 1e-15);
  EXPECT_NEAR(b2.grad()[1], -d, 1e-15);
  const double dz = 2.0 * d;  // W2^T dlogits = d - (-d)
  EXPECT_NEAR(b1.grad()[0], dz, 1e-15);
  EXPECT_NEAR(w1.grad()[0], dz * 1.0, 1e-15);
  EXPECT_NEAR(w1.grad()[1], dz * 2.0, 1e-15);
}

TEST(Autograd, SharedSubgraphAccumulates) {
  auto a = Var<double>::leaf(Tensor<double>::matrix({{3.0}}));
  const auto sq = mul(a, a);
  backward(add(sq, a));  // d/da (a^2 + a) = 2a + 1
  EXPECT_DOUBLE_EQ(a.grad()[0], 7.0);
}

TEST(Autograd, DomainChecks) {
  const auto logits = Var<double>::constant(Tensor<double>(Shape{2, 3}));
  const std::vector<int> bad{0, 3};
  EXPECT_THROW(cross_entropy(logits, std::span<const int>(bad)), DomainError);
  const auto p = Var<double>::constant(Tensor<double>::matrix({{0.5, 0.6}}));
  EXPECT_THROW(kl_divergence(p, p), DomainError);
}
