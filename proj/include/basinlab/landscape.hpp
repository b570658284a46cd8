#pragma once

// Connectivity and diversity measurements. Accuracies and connectivity
// values are reported in percentage points; everything else is raw.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "basinlab/ensembles.hpp"
#include "basinlab/eval.hpp"
#include "basinlab/parallel.hpp"

namespace basinlab {

inline constexpr std::size_t kDefaultLambdaPoints = 21;
inline constexpr std::size_t kDefaultJointSamples = 50;
inline constexpr std::size_t kDefaultPlaneResolution = 25;
inline constexpr double kDefaultPlaneMargin = 0.2;
inline constexpr const char* kJsdVariant = "one-vs-rest: 0.5*KL(p_i||m) + 0.5*KL(mean_{j!=i} p_j||m), m = midpoint, natural log";

inline std::vector<double> lambda_grid(std::size_t points = kDefaultLambdaPoints) {
  if (points < 2) throw UsageError("lambda grid needs at least two points");
  std::vector<double> g(points);
  for (std::size_t i = 0; i < points; ++i) g[i] = static_cast<double>(i) / static_cast<double>(points - 1);
  g.back() = 1.0;
  return g;
}

inline double accuracy_pct(const ParamVector& p, const Dataset& data) { return 100.0 * evaluate(p, data).accuracy; }

// ---------------------------------------------------------------------------
// Pairwise connectivity
// ---------------------------------------------------------------------------

struct PairCurve {
  std::size_t member_i = 0;
  std::size_t member_j = 1;
  std::vector<double> lambdas;
  std::vector<double> accuracy;  // percent
  std::vector<double> q_pair;    // percentage points
};

// q_pair(l) = Acc(l a + (1 - l) b) - (l Acc(a) + (1 - l) Acc(b)), written as
// l (A - Acc(a)) + (1 - l)(A - Acc(b)) so that coincident endpoints give 0
// exactly.
inline PairCurve q_pair_curve(const ParamVector& a, const ParamVector& b, const std::vector<double>& lambdas,
                              const Dataset& eval_set, std::size_t i = 0, std::size_t j = 1, std::size_t jobs = 1) {
  if (!(a.spec == b.spec) || a.size() != b.size()) throw UsageError("q_pair_curve: members use different specs");
  if (std::find(lambdas.begin(), lambdas.end(), 0.0) == lambdas.end() ||
      std::find(lambdas.begin(), lambdas.end(), 1.0) == lambdas.end())
    throw UsageError("q_pair_curve: the lambda grid must contain 0 and 1");
  PairCurve c;
  c.member_i = i;
  c.member_j = j;
  c.lambdas = lambdas;
  const double acc_a = accuracy_pct(a, eval_set);
  const double acc_b = accuracy_pct(b, eval_set);
  c.accuracy.assign(lambdas.size(), 0.0);
  c.q_pair.assign(lambdas.size(), 0.0);
  const std::vector<ParamVector> ends{a, b};
  parallel_for(lambdas.size(), jobs, [&](std::size_t k) {
    const double l = lambdas[k];
    const double w[2] = {l, 1.0 - l};
    const double acc = accuracy_pct(interpolate(ends, w), eval_set);
    c.accuracy[k] = acc;
    c.q_pair[k] = l * (acc - acc_a) + (1.0 - l) * (acc - acc_b);
  });
  return c;
}

// ---------------------------------------------------------------------------
// Joint connectivity
// ---------------------------------------------------------------------------

// Dir(1, ..., 1) via normalized unit-rate exponentials. Uses the raw engine
// output so sequences do not depend on the standard library's distributions.
inline std::vector<double> sample_dirichlet(std::size_t m, std::mt19937_64& rng) {
  if (m == 0) throw UsageError("sample_dirichlet: need at least one component");
  std::vector<double> w(m);
  double sum = 0.0;
  for (auto& x : w) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0, 1)
    x = -std::log1p(-u);
    sum += x;
  }
  if (!(sum > 0.0)) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(m));
    return w;
  }
  for (auto& x : w) x /= sum;
  return w;
}

struct JointConnectivityReport {
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  std::string eval_split;
  std::vector<std::vector<double>> weights;
  std::vector<double> q_joint;  // percentage points
  std::vector<double> member_accuracy;
  double mean = 0.0;
  double stddev = 0.0;
};

// Sample s uses its own generator seeded from (seed, s), so results do not
// depend on how samples are spread over workers.
inline JointConnectivityReport q_joint_report(std::span<const ParamVector> members, std::size_t n, std::uint64_t seed,
                                              const Dataset& eval_set, std::size_t jobs = 1) {
  if (members.size() < 2) throw UsageError("q_joint_report: need at least two members");
  if (n < 1) throw UsageError("q_joint_report: N must be >= 1");
  for (const auto& m : members)
    if (!(m.spec == members[0].spec)) throw UsageError("q_joint_report: members use different specs");
  JointConnectivityReport r;
  r.samples = n;
  r.seed = seed;
  r.eval_split = eval_set.split;
  r.member_accuracy.resize(members.size());
  parallel_for(members.size(), jobs, [&](std::size_t i) { r.member_accuracy[i] = accuracy_pct(members[i], eval_set); });
  r.weights.resize(n);
  r.q_joint.resize(n);
  parallel_for(n, jobs, [&](std::size_t s) {
    std::mt19937_64 rng(mix_seed(seed, s));
    r.weights[s] = sample_dirichlet(members.size(), rng);
    const double acc = accuracy_pct(interpolate(members, r.weights[s]), eval_set);
    double q = 0.0;
    for (std::size_t i = 0; i < members.size(); ++i) q += r.weights[s][i] * (acc - r.member_accuracy[i]);
    r.q_joint[s] = q;
  });
  for (double q : r.q_joint) r.mean += q;
  r.mean /= static_cast<double>(n);
  if (n > 1) {
    double ss = 0.0;
    for (double q : r.q_joint) ss += (q - r.mean) * (q - r.mean);
    r.stddev = std::sqrt(ss / static_cast<double>(n - 1));
  }
  return r;
}

inline JointConnectivityReport q_joint_report(const EnsembleBundle& bundle, std::size_t n, std::uint64_t seed,
                                              const Dataset& eval_set, std::size_t jobs = 1) {
  const auto params = bundle.member_params();
  return q_joint_report(std::span<const ParamVector>(params), n, seed, eval_set, jobs);
}

// ---------------------------------------------------------------------------
// 2-D planes through three anchors
// ---------------------------------------------------------------------------

struct PlaneGrid {
  ModelSpec spec;
  std::vector<double> origin;  // theta_1
  std::vector<double> u_hat;
  std::vector<double> v_hat;
  double anchor_alpha[3] = {0, 0, 0};
  double anchor_beta[3] = {0, 0, 0};
  std::size_t resolution = 0;
  double margin = 0.0;
  std::vector<double> alphas;
  std::vector<double> betas;
  // Row-major over (beta, alpha): cell (ib, ia) at ib * resolution + ia.
  std::vector<double> loss;
  std::vector<double> accuracy;  // percent
  double anchor_loss[3] = {0, 0, 0};
  double anchor_accuracy[3] = {0, 0, 0};
};

inline ParamVector plane_point(const PlaneGrid& g, double alpha, double beta) {
  std::vector<float> v(g.origin.size());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = static_cast<float>(g.origin[k] + alpha * g.u_hat[k] + beta * g.v_hat[k]);
  return ParamVector(g.spec, std::move(v));
}

// theta_1 sits at the origin, theta_2 on the positive alpha axis. Anchor
// cells are evaluated from the anchors themselves, so they match direct
// evaluation exactly.
inline PlaneGrid plane_grid(const ParamVector& t1, const ParamVector& t2, const ParamVector& t3, const Dataset& eval_set,
                            std::size_t resolution = kDefaultPlaneResolution, double margin = kDefaultPlaneMargin,
                            std::size_t jobs = 1) {
  if (!(t1.spec == t2.spec) || !(t1.spec == t3.spec)) throw UsageError("plane_grid: anchors use different specs");
  if (resolution < 2) throw UsageError("plane_grid: resolution must be >= 2");
  if (!(margin >= 0.0)) throw UsageError("plane_grid: margin must be >= 0");
  const std::size_t p = t1.size();
  PlaneGrid g;
  g.spec = t1.spec;
  g.resolution = resolution;
  g.margin = margin;
  g.origin.assign(t1.values.begin(), t1.values.end());
  std::vector<double> u(p), w(p);
  for (std::size_t k = 0; k < p; ++k) {
    u[k] = static_cast<double>(t2.values[k]) - g.origin[k];
    w[k] = static_cast<double>(t3.values[k]) - g.origin[k];
  }
  const auto norm = [](const std::vector<double>& x) { return std::sqrt(std::inner_product(x.begin(), x.end(), x.begin(), 0.0)); };
  const double un = norm(u);
  const double wn = norm(w);
  if (!(un > 0.0)) throw GeometryError("plane_grid: the first two anchors coincide");
  for (auto& x : u) x /= un;
  const double proj = std::inner_product(w.begin(), w.end(), u.begin(), 0.0);
  std::vector<double> v(p);
  for (std::size_t k = 0; k < p; ++k) v[k] = w[k] - proj * u[k];
  const double vn = norm(v);
  if (!(vn >= 1e-9 * wn) || !(vn > 0.0)) throw GeometryError("plane_grid: anchors are colinear");
  for (auto& x : v) x /= vn;
  // One re-orthogonalization pass keeps u.v at rounding level.
  const double drift = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
  for (std::size_t k = 0; k < p; ++k) v[k] -= drift * u[k];
  const double vn2 = norm(v);
  for (auto& x : v) x /= vn2;
  g.u_hat = std::move(u);
  g.v_hat = std::move(v);
  g.anchor_alpha[1] = un;
  g.anchor_alpha[2] = proj;
  g.anchor_beta[2] = vn;

  const auto axis = [&](const double* c) {
    const double lo = std::min({c[0], c[1], c[2]}), hi = std::max({c[0], c[1], c[2]});
    const double span = std::max(hi - lo, 1e-12);
    std::vector<double> out(resolution);
    for (std::size_t i = 0; i < resolution; ++i)
      out[i] = lo - margin * span + (hi - lo + 2.0 * margin * span) * static_cast<double>(i) / static_cast<double>(resolution - 1);
    return out;
  };
  g.alphas = axis(g.anchor_alpha);
  g.betas = axis(g.anchor_beta);

  g.loss.assign(resolution * resolution, 0.0);
  g.accuracy.assign(resolution * resolution, 0.0);
  parallel_for(resolution * resolution, jobs, [&](std::size_t cell) {
    const EvalResult e = evaluate(plane_point(g, g.alphas[cell % resolution], g.betas[cell / resolution]), eval_set);
    g.loss[cell] = e.loss;
    g.accuracy[cell] = 100.0 * e.accuracy;
  });
  const ParamVector* anchors[3] = {&t1, &t2, &t3};
  for (std::size_t a = 0; a < 3; ++a) {
    const EvalResult e = evaluate(*anchors[a], eval_set);
    g.anchor_loss[a] = e.loss;
    g.anchor_accuracy[a] = 100.0 * e.accuracy;
  }
  return g;
}

// CSV columns alpha,beta,loss,acc; one row per grid cell.
inline std::string plane_csv(const PlaneGrid& g) {
  std::string out = "alpha,beta,loss,acc\n";
  char buf[160];
  for (std::size_t ib = 0; ib < g.resolution; ++ib)
    for (std::size_t ia = 0; ia < g.resolution; ++ia) {
      const std::size_t c = ib * g.resolution + ia;
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", g.alphas[ia], g.betas[ib], g.loss[c], g.accuracy[c]);
      out += buf;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Diversity and ensemble metrics
// ---------------------------------------------------------------------------

inline std::vector<Tensor<double>> member_probabilities(std::span<const ParamVector> members, const Dataset& eval_set,
                                                        std::size_t jobs = 1) {
  std::vector<Tensor<double>> probs(members.size());
  parallel_for(members.size(), jobs, [&](std::size_t i) { probs[i] = predict_proba(members[i], eval_set.inputs); });
  return probs;
}

// Mean over examples of the unbiased (M - 1) variance of p_i(y_true | x).
inline double predictive_variance(const std::vector<Tensor<double>>& probs, std::span<const int> labels) {
  const std::size_t m = probs.size();
  if (m < 2) throw UsageError("predictive_variance: need at least two members");
  const std::size_t k = probs[0].cols();
  double total = 0.0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const std::size_t y = static_cast<std::size_t>(labels[n]);
    double mean = 0.0;
    for (const auto& p : probs) mean += p[n * k + y];
    mean /= static_cast<double>(m);
    double ss = 0.0;
    for (const auto& p : probs) ss += (p[n * k + y] - mean) * (p[n * k + y] - mean);
    total += ss / static_cast<double>(m - 1);
  }
  return total / static_cast<double>(labels.size());
}

namespace detail {

inline double kl_to(const double* p, const double* q, std::size_t k) {
  double s = 0.0;
  for (std::size_t j = 0; j < k; ++j)
    if (p[j] > 0.0) s += p[j] * std::log(p[j] / q[j]);
  return s;
}

}  // namespace detail

// Mean over members and examples of the JSD between member i and the mean
// of the other members (equal-weight mixture).
inline double one_vs_all_jsd(const std::vector<Tensor<double>>& probs) {
  const std::size_t m = probs.size();
  if (m < 2) throw UsageError("one_vs_all_jsd: need at least two members");
  const std::size_t n = probs[0].rows(), k = probs[0].cols();
  std::vector<double> sum(k), rest(k), mid(k);
  double total = 0.0;
  for (std::size_t x = 0; x < n; ++x) {
    std::fill(sum.begin(), sum.end(), 0.0);
    for (const auto& p : probs)
      for (std::size_t j = 0; j < k; ++j) sum[j] += p[x * k + j];
    for (std::size_t i = 0; i < m; ++i) {
      const double* pi = probs[i].data() + x * k;
      for (std::size_t j = 0; j < k; ++j) {
        rest[j] = (sum[j] - pi[j]) / static_cast<double>(m - 1);
        mid[j] = 0.5 * (pi[j] + rest[j]);
      }
      const double jsd = 0.5 * detail::kl_to(pi, mid.data(), k) + 0.5 * detail::kl_to(rest.data(), mid.data(), k);
      total += std::max(0.0, jsd);
    }
  }
  return total / static_cast<double>(n * m);
}

struct EnsembleMetrics {
  std::vector<double> member_accuracy;  // percent
  std::vector<double> member_log_loss;
  double ensemble_accuracy = 0.0;  // percent
  double ensemble_log_loss = 0.0;
  double mean_member_log_loss = 0.0;
  double jensen_gap() const { return mean_member_log_loss - ensemble_log_loss; }
};

// Member and ensemble metrics from one set of probabilities, so the
// ensemble log-loss never exceeds the mean member log-loss beyond rounding.
inline EnsembleMetrics ensemble_metrics(const std::vector<Tensor<double>>& probs, std::span<const int> labels) {
  const std::size_t m = probs.size();
  if (m == 0) throw UsageError("ensemble_metrics: empty ensemble");
  const std::size_t k = probs[0].cols(), n = labels.size();
  EnsembleMetrics r;
  r.member_accuracy.assign(m, 0.0);
  r.member_log_loss.assign(m, 0.0);
  std::vector<double> avg(k);
  std::size_t ens_correct = 0;
  for (std::size_t x = 0; x < n; ++x) {
    const std::size_t y = static_cast<std::size_t>(labels[x]);
    std::fill(avg.begin(), avg.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const double* p = probs[i].data() + x * k;
      for (std::size_t j = 0; j < k; ++j) avg[j] += p[j];
      r.member_accuracy[i] += static_cast<std::size_t>(std::max_element(p, p + k) - p) == y;
      r.member_log_loss[i] -= std::log(p[y]);
    }
    for (auto& v : avg) v /= static_cast<double>(m);
    ens_correct += static_cast<std::size_t>(std::max_element(avg.begin(), avg.end()) - avg.begin()) == y;
    r.ensemble_log_loss -= std::log(avg[y]);
  }
  for (std::size_t i = 0; i < m; ++i) {
    r.member_accuracy[i] *= 100.0 / static_cast<double>(n);
    r.member_log_loss[i] /= static_cast<double>(n);
    r.mean_member_log_loss += r.member_log_loss[i];
  }
  r.mean_member_log_loss /= static_cast<double>(m);
  r.ensemble_log_loss /= static_cast<double>(n);
  r.ensemble_accuracy = 100.0 * static_cast<double>(ens_correct) / static_cast<double>(n);
  return r;
}

struct DiversityReport {
  double predictive_variance = 0.0;
  double jsd = 0.0;
  std::vector<double> member_accuracy;
  std::string eval_split;
  std::string jsd_variant = kJsdVariant;
};

inline DiversityReport diversity_report(std::span<const ParamVector> members, const Dataset& eval_set, std::size_t jobs = 1) {
  const auto probs = member_probabilities(members, eval_set, jobs);
  DiversityReport r;
  r.predictive_variance = predictive_variance(probs, eval_set.labels);
  r.jsd = one_vs_all_jsd(probs);
  r.member_accuracy = ensemble_metrics(probs, eval_set.labels).member_accuracy;
  r.eval_split = eval_set.split;
  return r;
}

inline DiversityReport diversity_report(const EnsembleBundle& bundle, const Dataset& eval_set, std::size_t jobs = 1) {
  const auto params = bundle.member_params();
  return diversity_report(std::span<const ParamVector>(params), eval_set, jobs);
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const PairCurve& c) {
  return {{"member_i", c.member_i}, {"member_j", c.member_j}, {"lambda", c.lambdas}, {"accuracy", c.accuracy}, {"q_pair", c.q_pair}};
}

inline nlohmann::json to_json(const JointConnectivityReport& r) {
  return {{"samples", r.samples}, {"seed", r.seed},       {"eval_split", r.eval_split}, {"weights", r.weights},
          {"q_joint", r.q_joint}, {"member_accuracy", r.member_accuracy}, {"mean", r.mean}, {"std", r.stddev}};
}

inline nlohmann::json to_json(const DiversityReport& r) {
  return {{"predictive_variance", r.predictive_variance},
          {"jsd", r.jsd},
          {"member_accuracy", r.member_accuracy},
          {"eval_split", r.eval_split},
          {"jsd_variant", r.jsd_variant}};
}

inline nlohmann::json to_json(const EnsembleMetrics& m) {
  return {{"member_accuracy", m.member_accuracy},
          {"member_log_loss", m.member_log_loss},
          {"ensemble_accuracy", m.ensemble_accuracy},
          {"ensemble_log_loss", m.ensemble_log_loss},
          {"mean_member_log_loss", m.mean_member_log_loss},
          {"jensen_gap", m.jensen_gap()}};
}

inline nlohmann::json to_json(const PlaneGrid& g) {
  nlohmann::json anchors = nlohmann::json::array();
  for (int a = 0; a < 3; ++a)
    anchors.push_back({{"alpha", g.anchor_alpha[a]}, {"beta", g.anchor_beta[a]}, {"loss", g.anchor_loss[a]}, {"acc", g.anchor_accuracy[a]}});
  return {{"resolution", g.resolution}, {"margin", g.margin}, {"alpha", g.alphas}, {"beta", g.betas},
          {"loss", g.loss},             {"acc", g.accuracy},  {"anchors", anchors}};
}

}  // namespace basinlab
