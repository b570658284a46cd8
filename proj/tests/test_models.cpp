#include <gtest/gtest.h>

#include <random>

#include "basinlab/models.hpp"

using namespace basinlab;

TEST(Models, PlainLayoutShapesAndGroups) {
  const ParamLayout l = make_layout(ModelSpec::mlp(2, {64, 64}, 4, true));
  ASSERT_EQ(l.entries.size(), 10u);
  EXPECT_EQ(l.entries[0].name, "hidden0.weight");
  EXPECT_EQ(l.entries[0].shape, (Shape{64, 2}));
  EXPECT_EQ(l.entries[0].row_group, 0);
  EXPECT_EQ(l.entries[0].col_group, -1);
  EXPECT_EQ(l.find("hidden1.weight").col_group, 0);
  EXPECT_EQ(l.find("output.weight").col_group, 1);
  EXPECT_EQ(l.find("output.bias").row_group, -1);
  EXPECT_EQ(l.group_widths, (std::vector<std::size_t>{64, 64}));
  // 2*64+64 + 2*64 + 64*64+64 + 2*64 + 4*64+4
  EXPECT_EQ(l.total, 192u + 128u + 4160u + 128u + 260u);
}

TEST(Models, ResLayoutStreamGroup) {
  const ParamLayout l = make_layout(ModelSpec::res_mlp(3, 8, {5}, 2, true));
  EXPECT_EQ(l.group_widths, (std::vector<std::size_t>{8, 5}));
  EXPECT_EQ(l.find("block0.fc2.weight").row_group, 0);
  EXPECT_EQ(l.find("block0.fc2.weight").col_group, 1);
  EXPECT_EQ(l.find("block0.norm_gain").row_group, 0);
}

TEST(Models, SpecValidation) {
  EXPECT_THROW(ModelSpec::mlp(0, {4}, 2).validate(), SpecError);
  EXPECT_THROW(ModelSpec::mlp(2, {}, 2).validate(), SpecError);
  EXPECT_THROW(ModelSpec::mlp(2, {0}, 2).validate(), SpecError);
  EXPECT_THROW(ModelSpec::res_mlp(2, 0, {3}, 2).validate(), SpecError);
  EXPECT_THROW(ParamVector(ModelSpec::mlp(2, {3}, 2), std::vector<float>(5)), SpecError);
}

TEST(Models, InitIsSeededAndNormGainIsOne) {
  const auto spec = ModelSpec::mlp(2, {8}, 3, true);
  EXPECT_EQ(init_params(spec, 5), init_params(spec, 5));
  EXPECT_NE(init_params(spec, 5), init_params(spec, 6));
  const auto p = init_params(spec, 5);
  const auto layout = make_layout(spec);
  for (float v : p.view(layout.find("hidden0.norm_gain"))) EXPECT_EQ(v, 1.0f);
  for (float v : p.view(layout.find("hidden0.bias"))) EXPECT_EQ(v, 0.0f);
}

TEST(Models, PermutationAlgebra) {
  std::mt19937_64 rng(3);
  const auto spec = ModelSpec::mlp(3, {6, 5}, 2);
  const auto p = init_params(spec, 1);
  const auto a = random_permutation(spec, rng), b = random_permutation(spec, rng);
  EXPECT_EQ(apply_permutation(apply_permutation(p, a), inverse(a)), p);
  EXPECT_EQ(apply_permutation(apply_permutation(p, a), b), apply_permutation(p, compose(a, b)));
  EXPECT_EQ(compose(a, inverse(a)), identity_permutation(spec));
}

TEST(Models, PermutationPreservesFunction) {
  std::mt19937_64 rng(4);
  for (const auto& spec : {ModelSpec::mlp(3, {16, 12}, 4, true), ModelSpec::res_mlp(3, 10, {7, 9}, 4, true)}) {
    const auto p = init_params(spec, 2);
    Tensor<float> x(Shape{20, 3});
    std::normal_distribution<float> g;
    for (auto& v : x.storage()) v = g(rng);
    const auto a = forward(p, x), b = forward(apply_permutation(p, random_permutation(spec, rng)), x);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
  }
}

TEST(Models, PermutationValidation) {
  const auto spec = ModelSpec::mlp(2, {3}, 2);
  PermutationSet bad{{{0, 0, 1}}};
  EXPECT_ANY_THROW(apply_permutation(init_params(spec, 0), bad));
  PermutationSet wrong_width{{{0, 1}}};
  EXPECT_ANY_THROW(apply_permutation(init_params(spec, 0), wrong_width));
}

TEST(Models, InterpolateEndpointsAndValidation) {
  const auto spec = ModelSpec::mlp(2, {4}, 2);
  const std::vector<ParamVector> ps{init_params(spec, 1), init_params(spec, 2)};
  const std::vector<double> w0{1.0, 0.0}, bad{0.7, 0.7};
  EXPECT_EQ(interpolate(ps, w0), ps[0]);
  EXPECT_THROW(interpolate(ps, bad), UsageError);
  const std::vector<ParamVector> mixed{init_params(spec, 1), init_params(ModelSpec::mlp(2, {5}, 2), 1)};
  const std::vector<double> half{0.5, 0.5};
  EXPECT_THROW(interpolate(mixed, half), SpecError);
}

TEST(Models, ForwardRejectsWrongWidth) {
  const auto p = init_params(ModelSpec::mlp(2, {4}, 2), 0);
  EXPECT_THROW(forward(p, Tensor<float>(Shape{3, 5})), SpecError);
}
