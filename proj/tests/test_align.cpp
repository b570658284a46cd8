#include <gtest/gtest.h>

#include <random>

#include "basinlab/align.hpp"

using namespace basinlab;

namespace {

ParamVector noisy_copy(const ParamVector& p, double sigma, std::uint64_t seed) {
  ParamVector out = p;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, static_cast<float>(sigma));
  for (auto& v : out.values) v += n(rng);
  return out;
}

}  // namespace

TEST(Pcd, RecoversPlantedPermutation) {
  for (const auto& spec : {ModelSpec::mlp(3, {16, 12}, 4), ModelSpec::res_mlp(3, 8, {10, 10}, 4)}) {
    const ParamVector ref = init_params(spec, 5);
    std::mt19937_64 rng(6);
    const PermutationSet pi = random_permutation(spec, rng);
    const ParamVector member = apply_permutation(ref, pi);
    const AlignmentResult r = pcd_align(ref, member);
    EXPECT_EQ(r.perms[1], inverse(pi));
    EXPECT_EQ(apply_permutation(member, r.perms[1]), ref);
    EXPECT_TRUE(r.converged);
    EXPECT_EQ(r.perms[0], identity_permutation(spec));
  }
}

TEST(Pcd, ObjectiveTraceIsMonotone) {
  const auto spec = ModelSpec::mlp(4, {20, 20}, 3);
  const ParamVector a = init_params(spec, 1), b = init_params(spec, 2);
  const AlignmentResult r = pcd_align(a, b);
  for (std::size_t i = 1; i < r.objective_trace.size(); ++i) EXPECT_GE(r.objective_trace[i], r.objective_trace[i - 1] - 1e-9);
  EXPECT_NEAR(r.objective_trace.back(), matching_objective(a, b, r.perms[1]), 1e-6 * std::abs(r.objective_trace.back()) + 1e-9);
  EXPECT_LT(verify_function_preservation(b, r.perms[1], 50), 1e-5);
}

TEST(Pcd, RejectsMismatchedSpecs) {
  EXPECT_THROW(pcd_align(init_params(ModelSpec::mlp(2, {4}, 2), 0), init_params(ModelSpec::mlp(2, {5}, 2), 0)), UsageError);
}

TEST(MultiPcd, RecoversPlantedPermutationsJointly) {
  const auto spec = ModelSpec::mlp(3, {12, 12}, 3);
  const ParamVector base = init_params(spec, 11);
  std::mt19937_64 rng(12);
  std::vector<ParamVector> members{base};
  std::vector<PermutationSet> planted{identity_permutation(spec)};
  for (int i = 0; i < 3; ++i) {
    planted.push_back(random_permutation(spec, rng));
    members.push_back(apply_permutation(noisy_copy(base, 0.01, 20 + i), planted.back()));
  }
  const AlignmentResult r = multi_pcd_align(members);
  ASSERT_EQ(r.perms.size(), 4u);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_EQ(r.perms[i], inverse(planted[i]));
  EXPECT_TRUE(r.converged);
  for (std::size_t i = 1; i < r.objective_trace.size(); ++i) EXPECT_GE(r.objective_trace[i], r.objective_trace[i - 1] - 1e-6);
  EXPECT_NEAR(r.objective_trace.back(), joint_objective(members, r.perms), 1e-6 * std::abs(r.objective_trace.back()));
}

TEST(MultiPcd, NeverWorseThanPcdStart) {
  const auto spec = ModelSpec::mlp(3, {16}, 3);
  std::vector<ParamVector> members;
  for (std::uint64_t s = 0; s < 4; ++s) members.push_back(init_params(spec, 100 + s));
  const AlignmentResult start = pcd_align_all(members);
  const AlignmentResult r = multi_pcd_align(members, 5, start.perms);
  EXPECT_GE(joint_objective(members, r.perms), joint_objective(members, start.perms) - 1e-6);
  EXPECT_LE(r.sweeps, 5u);
  EXPECT_THROW(multi_pcd_align(std::span<const ParamVector>(members.data(), 2)), UsageError);
}

TEST(PermuteBundle, PreservesPredictions) {
  const auto spec = ModelSpec::mlp(2, {8}, 3);
  EnsembleBundle b;
  for (std::uint64_t s = 0; s < 3; ++s) {
    Checkpoint c;
    c.params = init_params(spec, s);
    b.members.push_back(c);
  }
  const auto params = b.member_params();
  const AlignmentResult r = pcd_align_all(params);
  const EnsembleBundle p = permute_bundle(b, r);
  EXPECT_EQ(p.family, Family::permuted);
  Tensor<float> x(Shape{10, 2});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(i % 7) - 3.0f;
  const Tensor<double> before = ensemble_predict(b, x), after = ensemble_predict(p, x);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(before[i], after[i], 1e-6);
}
