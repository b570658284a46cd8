#include <gtest/gtest.h>

#include <random>

#include "basinlab/autograd.hpp"
#include "basinlab/tensor.hpp"

using namespace basinlab;

namespace {

Tensor<double> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Tensor<double> t(Shape{r, c});
  for (auto& v : t.storage()) v = g(rng);
  return t;
}

}  // namespace

TEST(Tensor, MatmulMatchesTripleLoop) {
  std::mt19937_64 rng(1);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 4, 5}, {7, 2, 9}, {16, 33, 8}}) {
    const auto a = random_matrix(m, k, rng), b = random_matrix(k, n, rng);
    const auto c = matmul(Var<double>::constant(a), Var<double>::constant(b)).value();
    ASSERT_EQ(c.shape(), (Shape{static_cast<std::size_t>(m), static_cast<std::size_t>(n)}));
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
        EXPECT_NEAR(c.at(i, j), s, 1e-12);
      }
  }
}

TEST(Tensor, MatmulRejectsMismatchedInner) {
  const auto a = Var<double>::constant(Tensor<double>(Shape{2, 3}));
  const auto b = Var<double>::constant(Tensor<double>(Shape{2, 3}));
  EXPECT_THROW(matmul(a, b), DimensionError);
}

TEST(Tensor, ConstructionChecksLength) {
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor<float>::matrix({{1, 2}, {3}}), DimensionError);
  EXPECT_EQ(Tensor<float>::scalar(4.0f).item(), 4.0f);
  EXPECT_THROW(Tensor<float>(Shape{2}).item(), DimensionError);
}

TEST(Tensor, TransposeAndSlice) {
  const auto m = Tensor<int>::matrix({{1, 2, 3}, {4, 5, 6}});
  const auto t = transpose(m);
  EXPECT_EQ(t, Tensor<int>::matrix({{1, 4}, {2, 5}, {3, 6}}));
  EXPECT_EQ(slice_rows(m, 1, 2), Tensor<int>::matrix({{4, 5, 6}}));
  EXPECT_THROW(transpose(Tensor<int>(Shape{3})), DimensionError);
}
