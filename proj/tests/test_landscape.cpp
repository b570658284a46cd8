#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "basinlab/landscape.hpp"

using namespace basinlab;

namespace {

const std::pair<Dataset, Dataset>& blobs() {
  static const auto d = make_gaussian_blobs(3, 1, 90, 120, 2, 0.4, 2);
  return d;
}

std::vector<ParamVector> trained(std::size_t m) {
  std::vector<ParamVector> out;
  for (std::size_t k = 0; k < m; ++k) {
    TrainConfig c;
    c.epochs = 3;
    c.batch_size = 15;
    c.member = k;
    out.push_back(train(ModelSpec::mlp(2, {8}, 3), blobs().first, c).final().params);
  }
  return out;
}

}  // namespace

TEST(Jsd, DisjointOneHotPairIsLn2) {
  const std::vector<Tensor<double>> probs{Tensor<double>::matrix({{1, 0}, {0, 1}}), Tensor<double>::matrix({{0, 1}, {1, 0}})};
  EXPECT_NEAR(one_vs_all_jsd(probs), std::numbers::ln2, 1e-15);
  const std::vector<Tensor<double>> same{Tensor<double>::matrix({{0.3, 0.7}}), Tensor<double>::matrix({{0.3, 0.7}})};
  EXPECT_NEAR(one_vs_all_jsd(same), 0.0, 1e-15);
}

TEST(PredictiveVariance, UnbiasedOverMembers) {
  // True-class probabilities 0.2 and 0.8: mean 0.5, (0.09 + 0.09) / (2 - 1).
  const std::vector<Tensor<double>> probs{Tensor<double>::matrix({{0.2, 0.8}}), Tensor<double>::matrix({{0.8, 0.2}})};
  const std::vector<int> y{0};
  EXPECT_NEAR(predictive_variance(probs, y), 0.18, 1e-15);
  EXPECT_THROW(predictive_variance({probs[0]}, y), UsageError);
}

TEST(EnsembleMetrics, JensenGapIsNonNegative) {
  const auto members = trained(3);
  const auto probs = member_probabilities(members, blobs().second);
  const EnsembleMetrics m = ensemble_metrics(probs, blobs().second.labels);
  EXPECT_GE(m.jensen_gap(), -1e-12);
  EXPECT_EQ(m.member_accuracy.size(), 3u);
}

TEST(Dirichlet, SamplesLieOnTheSimplex) {
  std::mt19937_64 rng(1);
  double mean0 = 0.0;
  const int n = 20000;
  for (int s = 0; s < n; ++s) {
    const auto w = sample_dirichlet(4, rng);
    double sum = 0.0;
    for (double x : w) {
      EXPECT_GE(x, 0.0);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    mean0 += w[0] / n;
  }
  EXPECT_NEAR(mean0, 0.25, 0.01);
  std::mt19937_64 a(5), b(5);
  EXPECT_EQ(sample_dirichlet(3, a), sample_dirichlet(3, b));
  EXPECT_THROW(sample_dirichlet(0, a), UsageError);
}

TEST(LambdaGrid, EndpointsAndSpacing) {
  const auto g = lambda_grid(21);
  ASSERT_EQ(g.size(), 21u);
  EXPECT_EQ(g.front(), 0.0);
  EXPECT_EQ(g.back(), 1.0);
  EXPECT_DOUBLE_EQ(g[10], 0.5);
  EXPECT_THROW(lambda_grid(1), UsageError);
}

TEST(QPair, EndpointsAreExactlyZero) {
  const auto m = trained(2);
  const PairCurve c = q_pair_curve(m[0], m[1], lambda_grid(5), blobs().second);
  EXPECT_EQ(c.q_pair.front(), 0.0);
  EXPECT_EQ(c.q_pair.back(), 0.0);
  EXPECT_EQ(q_pair_curve(m[0], m[0], lambda_grid(5), blobs().second).q_pair, std::vector<double>(5, 0.0));
  EXPECT_THROW(q_pair_curve(m[0], m[1], {0.25, 0.5}, blobs().second), UsageError);
}

TEST(QJoint, IdenticalMembersGiveZeroAndSeedsAreStable) {
  const auto m = trained(3);
  const std::vector<ParamVector> same(3, m[0]);
  const auto z = q_joint_report(same, 10, 1, blobs().second);
  for (double q : z.q_joint) EXPECT_NEAR(q, 0.0, 1e-9);
  const auto a = q_joint_report(m, 8, 3, blobs().second, 1);
  const auto b = q_joint_report(m, 8, 3, blobs().second, 4);
  EXPECT_EQ(a.q_joint, b.q_joint);
  EXPECT_EQ(a.weights, b.weights);
}

TEST(Plane, AnchorsReconstructAndMatchDirectEvaluation) {
  const auto m = trained(3);
  const PlaneGrid g = plane_grid(m[0], m[1], m[2], blobs().second, 5, 0.2);
  EXPECT_EQ(g.loss.size(), 25u);
  for (std::size_t a = 0; a < 3; ++a) {
    const ParamVector p = plane_point(g, g.anchor_alpha[a], g.anchor_beta[a]);
    for (std::size_t k = 0; k < p.size(); ++k) EXPECT_NEAR(p.values[k], m[a].values[k], 1e-6);
    const EvalResult e = evaluate(m[a], blobs().second);
    EXPECT_EQ(g.anchor_loss[a], e.loss);
    EXPECT_EQ(g.anchor_accuracy[a], 100.0 * e.accuracy);
  }
  EXPECT_EQ(g.anchor_alpha[0], 0.0);
  EXPECT_EQ(g.anchor_beta[1], 0.0);
  EXPECT_GT(g.anchor_beta[2], 0.0);
  const std::string csv = plane_csv(g);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 26);
}

TEST(Plane, DegenerateAnchorsAreRejected) {
  const auto m = trained(2);
  EXPECT_THROW(plane_grid(m[0], m[1], m[0], blobs().second, 3), GeometryError);
  EXPECT_THROW(plane_grid(m[0], m[0], m[1], blobs().second, 3), GeometryError);
  EXPECT_THROW(plane_grid(m[0], m[1], m[1], blobs().second, 1), UsageError);
}

TEST(Diversity, ReportCarriesVariant) {
  const auto m = trained(3);
  const DiversityReport d = diversity_report(m, blobs().second);
  EXPECT_GT(d.jsd, 0.0);
  EXPECT_GT(d.predictive_variance, 0.0);
  EXPECT_EQ(d.eval_split, "test");
  EXPECT_EQ(d.jsd_variant, kJsdVariant);
}
