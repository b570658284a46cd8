#pragma once

// Weight-matching alignment. PCD permutes one member toward a reference by
// coordinate descent over permutation groups; Multi-PCD matches each member
// against the sum of all other (already permuted) members.
//
// For a target vector A (reference, or sum of others) and member B the
// matching objective is <A, pi(B)>. Fixing every group but g, it is linear
// in the assignment of g, so each group update is one LAP solve. Biases and
// norm parameters enter through the same row-group terms.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "basinlab/data.hpp"
#include "basinlab/ensembles.hpp"
#include "basinlab/lap.hpp"
#include "basinlab/models.hpp"
#include "basinlab/parallel.hpp"

namespace basinlab {

inline constexpr std::size_t kDefaultMaxSweeps = 100;
inline constexpr std::size_t kDefaultMaxOuterIters = 10;

struct AlignmentResult {
  std::string method;
  // One entry per member; the reference (member 0) keeps the identity.
  std::vector<PermutationSet> perms;
  std::vector<double> objective_trace;
  bool converged = false;
  std::size_t sweeps = 0;
  std::size_t max_iterations = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<double> to_double(const ParamVector& p) { return {p.values.begin(), p.values.end()}; }

inline double dot(std::span<const double> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * static_cast<double>(b[i]);
  return s;
}

// C[i][j]: objective contribution of placing member unit j at position i of
// group g, with every other group held at `perm`.
inline CostMatrix group_cost(const ParamLayout& layout, std::span<const double> target, const ParamVector& member,
                             const PermutationSet& perm, std::size_t g) {
  const std::size_t n = layout.group_widths[g];
  CostMatrix c(n);
  const int gi = static_cast<int>(g);
  for (const auto& e : layout.entries) {
    if (e.row_group != gi && e.col_group != gi) continue;
    if (e.row_group == gi && e.col_group == gi) throw SpecError("a tensor is permuted by the same group on both axes");
    const std::size_t r = e.rows(), cols = e.cols();
    const double* a = target.data() + e.offset;
    const float* b = member.values.data() + e.offset;
    if (e.row_group == gi) {
      const auto* cp = e.col_group >= 0 ? &perm.perms[static_cast<std::size_t>(e.col_group)] : nullptr;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t k = 0; k < cols; ++k) s += a[i * cols + k] * static_cast<double>(b[j * cols + (cp ? (*cp)[k] : k)]);
          c(i, j) += s;
        }
    } else {
      const auto* rp = e.row_group >= 0 ? &perm.perms[static_cast<std::size_t>(e.row_group)] : nullptr;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t m = 0; m < r; ++m) s += a[m * cols + i] * static_cast<double>(b[(rp ? (*rp)[m] : m) * cols + j]);
          c(i, j) += s;
        }
    }
  }
  return c;
}

struct MatchOutcome {
  double gain = 0.0;
  bool changed = false;
  bool converged = false;
  std::size_t sweeps = 0;
  std::vector<double> gains;  // one per accepted group update
};

// Coordinate descent on <target, perm(member)> starting at `perm`. Groups
// are visited in a fresh random order each sweep; an update is accepted
// only on strict improvement, which guarantees termination.
inline MatchOutcome weight_matching(const ParamLayout& layout, std::span<const double> target, const ParamVector& member,
                                    PermutationSet& perm, std::size_t max_sweeps, std::mt19937_64& rng) {
  MatchOutcome out;
  std::vector<std::size_t> order(layout.group_widths.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  while (out.sweeps < max_sweeps) {
    std::shuffle(order.begin(), order.end(), rng);
    ++out.sweeps;
    bool any = false;
    for (std::size_t g : order) {
      const CostMatrix c = group_cost(layout, target, member, perm, g);
      const double current = assignment_score(c, perm.perms[g]);
      const Assignment best = solve_lap(c);
      if (best.score > current + 1e-12 * std::max(1.0, std::abs(current))) {
        perm.perms[g] = best.col_of_row;
        out.gain += best.score - current;
        out.gains.push_back(best.score - current);
        any = true;
      }
    }
    if (!any) {
      out.converged = true;
      break;
    }
    out.changed = true;
  }
  return out;
}

inline void require_same_spec(const ParamVector& a, const ParamVector& b) {
  if (!(a.spec == b.spec) || a.size() != b.size()) throw UsageError("alignment requires members with the same model spec");
}

}  // namespace detail

// Matching objective <reference, perm(member)>.
inline double matching_objective(const ParamVector& reference, const ParamVector& member, const PermutationSet& perm) {
  detail::require_same_spec(reference, member);
  const ParamVector pm = apply_permutation(member, perm);
  return detail::dot(detail::to_double(reference), pm.values);
}

// Aligns `member` to `reference`. perms = {identity, pi}; the trace holds
// the objective before the first update and after every accepted update.
inline AlignmentResult pcd_align(const ParamVector& reference, const ParamVector& member,
                                 std::size_t max_sweeps = kDefaultMaxSweeps, std::uint64_t seed = 0) {
  detail::require_same_spec(reference, member);
  const ParamLayout layout = make_layout(reference.spec);
  const std::vector<double> target = detail::to_double(reference);
  PermutationSet perm = identity_permutation(reference.spec);
  std::mt19937_64 rng(seed);
  AlignmentResult r;
  r.method = "pcd";
  r.seed = seed;
  r.max_iterations = max_sweeps;
  double obj = detail::dot(target, member.values);
  r.objective_trace.push_back(obj);
  const auto m = detail::weight_matching(layout, target, member, perm, max_sweeps, rng);
  for (double g : m.gains) r.objective_trace.push_back(obj += g);
  r.converged = m.converged;
  r.sweeps = m.sweeps;
  r.perms = {identity_permutation(reference.spec), perm};
  return r;
}

// Sum over pairs i < j of <pi_i(theta_i), pi_j(theta_j)>.
inline double joint_objective(std::span<const ParamVector> members, std::span<const PermutationSet> perms) {
  if (members.size() != perms.size()) throw UsageError("joint_objective: one permutation set per member");
  std::vector<std::vector<double>> permuted;
  for (std::size_t i = 0; i < members.size(); ++i) permuted.push_back(detail::to_double(apply_permutation(members[i], perms[i])));
  double s = 0.0;
  for (std::size_t i = 0; i < members.size(); ++i)
    for (std::size_t j = i + 1; j < members.size(); ++j)
      s += std::inner_product(permuted[i].begin(), permuted[i].end(), permuted[j].begin(), 0.0);
  return s;
}

// Aligns every member to member 0 independently. The trace records the
// joint objective before and after alignment.
inline AlignmentResult pcd_align_all(std::span<const ParamVector> members, std::size_t max_sweeps = kDefaultMaxSweeps,
                                     std::uint64_t seed = 0, std::size_t jobs = 1) {
  if (members.size() < 2) throw UsageError("pcd alignment needs at least two members");
  for (const auto& m : members) detail::require_same_spec(members[0], m);
  std::vector<AlignmentResult> pairs(members.size());
  parallel_for(members.size() - 1, jobs, [&](std::size_t k) {
    pairs[k + 1] = pcd_align(members[0], members[k + 1], max_sweeps, mix_seed(seed, k + 1));
  });
  AlignmentResult r;
  r.method = "pcd";
  r.seed = seed;
  r.max_iterations = max_sweeps;
  r.converged = true;
  r.perms.push_back(identity_permutation(members[0].spec));
  for (std::size_t k = 1; k < members.size(); ++k) {
    r.perms.push_back(pairs[k].perms[1]);
    r.converged = r.converged && pairs[k].converged;
    r.sweeps = std::max(r.sweeps, pairs[k].sweeps);
  }
  std::vector<PermutationSet> ids(members.size(), identity_permutation(members[0].spec));
  r.objective_trace = {joint_objective(members, ids), joint_objective(members, r.perms)};
  return r;
}

// Joint alignment. Starts from `init` (typically the PCD solution); member 0
// stays fixed. Each outer iteration re-matches members 1..M-1 in turn against
// the sum of all other permuted members. The trace records the joint
// objective after every member update.
inline AlignmentResult multi_pcd_align(std::span<const ParamVector> members, std::size_t max_outer_iters,
                                       const std::vector<PermutationSet>& init, std::uint64_t seed = 0,
                                       std::size_t max_sweeps = kDefaultMaxSweeps) {
  if (members.size() < 3) throw UsageError("multi_pcd_align needs at least three members");
  if (max_outer_iters == 0) throw UsageError("multi_pcd_align: max_outer_iters must be >= 1");
  for (const auto& m : members) detail::require_same_spec(members[0], m);
  const ParamLayout layout = make_layout(members[0].spec);
  const std::size_t M = members.size();
  std::vector<PermutationSet> perms = init.empty() ? std::vector<PermutationSet>(M, identity_permutation(members[0].spec)) : init;
  if (perms.size() != M) throw UsageError("multi_pcd_align: one initial permutation set per member");
  for (const auto& p : perms) validate_permutations(layout, p);

  std::vector<std::vector<double>> permuted(M);
  std::vector<double> total(members[0].size(), 0.0);
  for (std::size_t i = 0; i < M; ++i) {
    permuted[i] = detail::to_double(apply_permutation(members[i], perms[i]));
    for (std::size_t k = 0; k < total.size(); ++k) total[k] += permuted[i][k];
  }

  AlignmentResult r;
  r.method = "multi_pcd";
  r.seed = seed;
  r.max_iterations = max_outer_iters;
  double obj = joint_objective(members, perms);
  r.objective_trace.push_back(obj);
  std::mt19937_64 rng(seed);
  std::vector<double> target(total.size());
  while (r.sweeps < max_outer_iters) {
    ++r.sweeps;
    bool changed = false;
    for (std::size_t i = 1; i < M; ++i) {
      for (std::size_t k = 0; k < total.size(); ++k) target[k] = total[k] - permuted[i][k];
      const auto m = detail::weight_matching(layout, target, members[i], perms[i], max_sweeps, rng);
      if (m.changed) {
        changed = true;
        const std::vector<double> updated = detail::to_double(apply_permutation(members[i], perms[i]));
        for (std::size_t k = 0; k < total.size(); ++k) total[k] += updated[k] - permuted[i][k];
        permuted[i] = updated;
      }
      obj += m.gain;
      r.objective_trace.push_back(obj);
    }
    if (!changed) {
      r.converged = true;
      break;
    }
  }
  r.perms = std::move(perms);
  return r;
}

inline AlignmentResult multi_pcd_align(std::span<const ParamVector> members, std::size_t max_outer_iters = kDefaultMaxOuterIters,
                                       std::uint64_t seed = 0) {
  return multi_pcd_align(members, max_outer_iters, pcd_align_all(members, kDefaultMaxSweeps, seed).perms, seed);
}

// Applies an alignment to a bundle, producing the permuted family.
inline EnsembleBundle permute_bundle(const EnsembleBundle& bundle, const AlignmentResult& alignment) {
  bundle.validate();
  if (alignment.perms.size() != bundle.size()) throw UsageError("alignment does not match the bundle size");
  EnsembleBundle out = bundle;
  out.family = Family::permuted;
  for (std::size_t i = 0; i < out.members.size(); ++i) {
    out.members[i].params = apply_permutation(bundle.members[i].params, alignment.perms[i]);
    out.members[i].velocity.clear();
  }
  out.epochs_consumed = 0;
  out.metadata["source_family"] = to_string(bundle.family);
  out.metadata["alignment"] = {{"method", alignment.method},
                               {"sweeps", alignment.sweeps},
                               {"converged", alignment.converged},
                               {"seed", alignment.seed},
                               {"max_iterations", alignment.max_iterations},
                               {"norm_params_in_score", true}};
  return out;
}

// Max |logit difference| between `original` and its permuted copy over
// `num_probes` inputs drawn uniformly from [-3, 3]^d. The permutation is
// validated before anything is evaluated.
inline double verify_function_preservation(const ParamVector& original, const PermutationSet& perm, std::size_t num_probes,
                                           std::uint64_t seed = 0) {
  validate_permutations(make_layout(original.spec), perm);
  const ParamVector permuted = apply_permutation(original, perm);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-3.0f, 3.0f);
  Tensor<float> probes(Shape{num_probes, original.spec.input_dim});
  for (auto& v : probes.storage()) v = u(rng);
  const Tensor<float> a = forward(original, probes);
  const Tensor<float> b = forward(permuted, probes);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, static_cast<double>(std::abs(a[i] - b[i])));
  return worst;
}

inline nlohmann::json to_json(const AlignmentResult& r) {
  nlohmann::json perms = nlohmann::json::array();
  for (const auto& p : r.perms) perms.push_back(p.perms);
  return {{"method", r.method},         {"perms", perms},   {"objective_trace", r.objective_trace},
          {"converged", r.converged},   {"sweeps", r.sweeps}, {"max_iterations", r.max_iterations},
          {"seed", r.seed}};
}

}  // namespace basinlab
