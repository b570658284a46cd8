#pragma once

// MLP and residual-MLP classifiers over a flat parameter vector.
//
// Canonical parameter order (a pure function of the ModelSpec):
//
//   plain_mlp: for each hidden layer l
//                hidden<l>.weight [h_l x h_{l-1}], hidden<l>.bias,
//                hidden<l>.norm_gain, hidden<l>.norm_bias   (if normed)
//              then output.weight [K x h_L], output.bias
//   res_mlp:   embed.weight [w x d], embed.bias
//              for each block b
//                block<b>.fc1.weight [h_b x w], block<b>.fc1.bias,
//                block<b>.fc2.weight [w x h_b], block<b>.fc2.bias,
//                block<b>.norm_gain, block<b>.norm_bias     (if normed)
//              then output.weight [K x w], output.bias
//
// Each parameter tensor records which permutation group indexes its rows
// and columns. plain_mlp has one group per hidden layer; res_mlp has group 0
// for the residual stream (shared by every block) and group 1+b for the
// internal units of block b.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "basinlab/autograd.hpp"

namespace basinlab {

enum class ArchKind { plain_mlp, res_mlp };

inline const char* to_string(ArchKind k) { return k == ArchKind::plain_mlp ? "plain_mlp" : "res_mlp"; }

inline ArchKind arch_from_string(const std::string& s) {
  if (s == "plain_mlp") return ArchKind::plain_mlp;
  if (s == "res_mlp") return ArchKind::res_mlp;
  throw SpecError("unknown architecture kind '" + s + "'");
}

struct ModelSpec {
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
  ArchKind kind = ArchKind::plain_mlp;
  std::vector<std::size_t> hidden;  // layer widths (plain) or block internal widths (res)
  std::size_t stream_width = 0;     // res_mlp only
  std::vector<bool> layer_norm;     // one flag per hidden layer / block

  static ModelSpec mlp(std::size_t d, std::vector<std::size_t> widths, std::size_t k, bool norm = true) {
    ModelSpec s;
    s.input_dim = d;
    s.num_classes = k;
    s.kind = ArchKind::plain_mlp;
    s.layer_norm.assign(widths.size(), norm);
    s.hidden = std::move(widths);
    return s;
  }

  static ModelSpec res_mlp(std::size_t d, std::size_t stream, std::vector<std::size_t> block_widths, std::size_t k,
                           bool norm = true) {
    ModelSpec s;
    s.input_dim = d;
    s.num_classes = k;
    s.kind = ArchKind::res_mlp;
    s.stream_width = stream;
    s.layer_norm.assign(block_widths.size(), norm);
    s.hidden = std::move(block_widths);
    return s;
  }

  void validate() const {
    if (input_dim == 0 || num_classes == 0) throw SpecError("input_dim and num_classes must be >= 1");
    if (hidden.empty()) throw SpecError("at least one hidden layer is required");
    for (auto w : hidden)
      if (w == 0) throw SpecError("hidden widths must be >= 1");
    if (layer_norm.size() != hidden.size()) throw SpecError("one layer_norm flag per hidden layer is required");
    if (kind == ArchKind::res_mlp && stream_width == 0) throw SpecError("res_mlp needs stream_width >= 1");
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct ParamEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  int row_group = -1;  // permutation group indexing dim 0, -1 if fixed
  int col_group = -1;  // permutation group indexing dim 1 (matrices only)

  std::size_t size() const { return shape_numel(shape); }
  std::size_t rows() const { return shape[0]; }
  std::size_t cols() const { return shape.size() == 2 ? shape[1] : 1; }
};

struct ParamLayout {
  std::vector<ParamEntry> entries;
  std::vector<std::size_t> group_widths;
  std::size_t total = 0;

  const ParamEntry& find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return e;
    throw SpecError("no parameter named " + name);
  }
};

inline ParamLayout make_layout(const ModelSpec& spec) {
  spec.validate();
  ParamLayout out;
  auto push = [&](std::string name, Shape shape, int row, int col) {
    ParamEntry e{std::move(name), std::move(shape), out.total, row, col};
    out.total += e.size();
    out.entries.push_back(std::move(e));
  };
  const std::size_t k = spec.num_classes;
  if (spec.kind == ArchKind::plain_mlp) {
    std::size_t prev = spec.input_dim;
    for (std::size_t l = 0; l < spec.hidden.size(); ++l) {
      const std::size_t h = spec.hidden[l];
      const std::string p = "hidden" + std::to_string(l);
      const int g = static_cast<int>(l);
      push(p + ".weight", {h, prev}, g, l == 0 ? -1 : g - 1);
      push(p + ".bias", {h}, g, -1);
      if (spec.layer_norm[l]) {
        push(p + ".norm_gain", {h}, g, -1);
        push(p + ".norm_bias", {h}, g, -1);
      }
      out.group_widths.push_back(h);
      prev = h;
    }
    push("output.weight", {k, prev}, -1, static_cast<int>(spec.hidden.size()) - 1);
    push("output.bias", {k}, -1, -1);
  } else {
    const std::size_t w = spec.stream_width;
    out.group_widths.push_back(w);
    push("embed.weight", {w, spec.input_dim}, 0, -1);
    push("embed.bias", {w}, 0, -1);
    for (std::size_t b = 0; b < spec.hidden.size(); ++b) {
      const std::size_t h = spec.hidden[b];
      const std::string p = "block" + std::to_string(b);
      const int g = static_cast<int>(b) + 1;
      push(p + ".fc1.weight", {h, w}, g, 0);
      push(p + ".fc1.bias", {h}, g, -1);
      push(p + ".fc2.weight", {w, h}, 0, g);
      push(p + ".fc2.bias", {w}, 0, -1);
      if (spec.layer_norm[b]) {
        push(p + ".norm_gain", {w}, 0, -1);
        push(p + ".norm_bias", {w}, 0, -1);
      }
      out.group_widths.push_back(h);
    }
    push("output.weight", {k, w}, -1, 0);
    push("output.bias", {k}, -1, -1);
  }
  return out;
}

// Flat parameters in canonical order, tied to the spec they were built for.
struct ParamVector {
  ModelSpec spec;
  std::vector<float> values;

  ParamVector() = default;
  ParamVector(ModelSpec s, std::vector<float> v) : spec(std::move(s)), values(std::move(v)) {
    if (values.size() != make_layout(spec).total)
      throw SpecError("parameter vector length " + std::to_string(values.size()) + " does not match spec (" +
                      std::to_string(make_layout(spec).total) + ")");
  }

  std::size_t size() const { return values.size(); }
  std::span<const float> view(const ParamEntry& e) const { return {values.data() + e.offset, e.size()}; }
  std::span<float> view(const ParamEntry& e) { return {values.data() + e.offset, e.size()}; }

  friend bool operator==(const ParamVector&, const ParamVector&) = default;
};

inline ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  const ParamLayout layout = make_layout(spec);
  std::vector<float> v(layout.total, 0.0f);
  std::mt19937_64 rng(seed);
  for (const auto& e : layout.entries) {
    float* dst = v.data() + e.offset;
    if (e.shape.size() == 2) {
      const double bound = std::sqrt(6.0 / static_cast<double>(e.shape[0] + e.shape[1]));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (std::size_t i = 0; i < e.size(); ++i) dst[i] = static_cast<float>(dist(rng));
    } else if (e.name.ends_with(".norm_gain")) {
      std::fill(dst, dst + e.size(), 1.0f);
    }
  }
  return ParamVector(spec, std::move(v));
}

inline ParamVector zero_params(const ModelSpec& spec) {
  return ParamVector(spec, std::vector<float>(make_layout(spec).total, 0.0f));
}

// Converts the flat vector into one graph leaf per parameter tensor.
template <typename T>
std::vector<Var<T>> param_vars(const ParamVector& params, const ParamLayout& layout, bool requires_grad) {
  std::vector<Var<T>> out;
  out.reserve(layout.entries.size());
  for (const auto& e : layout.entries) {
    auto src = params.view(e);
    out.push_back(Var<T>::leaf(Tensor<T>(e.shape, std::vector<T>(src.begin(), src.end())), requires_grad));
  }
  return out;
}

// Builds the logits graph. `params` holds one Var per layout entry, in order.
template <typename T>
Var<T> forward_graph(const ModelSpec& spec, const ParamLayout& layout, const std::vector<Var<T>>& params,
                     const Var<T>& batch) {
  if (params.size() != layout.entries.size()) throw SpecError("parameter count does not match the spec");
  const auto& bv = batch.value();
  if (bv.rank() != 2 || bv.dim(1) != spec.input_dim)
    throw SpecError("batch " + shape_str(bv.shape()) + " does not match input_dim " + std::to_string(spec.input_dim));
  std::size_t i = 0;
  Var<T> h = batch;
  if (spec.kind == ArchKind::plain_mlp) {
    for (std::size_t l = 0; l < spec.hidden.size(); ++l) {
      h = linear(h, params[i], params[i + 1]);
      i += 2;
      if (spec.layer_norm[l]) {
        h = layer_norm(h, params[i], params[i + 1]);
        i += 2;
      }
      h = relu(h);
    }
  } else {
    h = linear(h, params[i], params[i + 1]);
    i += 2;
    for (std::size_t b = 0; b < spec.hidden.size(); ++b) {
      const auto& fc1_w = params[i];
      const auto& fc1_b = params[i + 1];
      const auto& fc2_w = params[i + 2];
      const auto& fc2_b = params[i + 3];
      i += 4;
      Var<T> z = h;
      if (spec.layer_norm[b]) {
        z = layer_norm(h, params[i], params[i + 1]);
        i += 2;
      }
      h = add(h, linear(relu(linear(z, fc1_w, fc1_b)), fc2_w, fc2_b));
    }
  }
  return linear(h, params[i], params[i + 1]);
}

// Logits for a batch [n x d]. Read-only; safe to call concurrently.
inline Tensor<float> forward(const ParamVector& params, const Tensor<float>& batch) {
  const ParamLayout layout = make_layout(params.spec);
  if (params.size() != layout.total) throw SpecError("parameter length does not match the spec");
  auto vars = param_vars<float>(params, layout, false);
  return forward_graph(params.spec, layout, vars, Var<float>::constant(batch)).value();
}

// One permutation per permutation group. perms[g][i] is the original unit
// that lands at position i.
struct PermutationSet {
  std::vector<std::vector<std::size_t>> perms;

  friend bool operator==(const PermutationSet&, const PermutationSet&) = default;
};

inline bool is_bijection(std::span<const std::size_t> p) {
  std::vector<char> seen(p.size(), 0);
  for (auto v : p) {
    if (v >= p.size() || seen[v]) return false;
    seen[v] = 1;
  }
  return true;
}

inline void validate_permutations(const ParamLayout& layout, const PermutationSet& perm) {
  if (perm.perms.size() != layout.group_widths.size())
    throw SpecError("permutation set has " + std::to_string(perm.perms.size()) + " groups, spec has " +
                    std::to_string(layout.group_widths.size()));
  for (std::size_t g = 0; g < perm.perms.size(); ++g) {
    if (perm.perms[g].size() != layout.group_widths[g])
      throw SpecError("permutation group " + std::to_string(g) + " width mismatch");
    if (!is_bijection(perm.perms[g])) throw SpecError("permutation group " + std::to_string(g) + " is not a bijection");
  }
}

inline PermutationSet identity_permutation(const ModelSpec& spec) {
  PermutationSet out;
  for (auto w : make_layout(spec).group_widths) {
    std::vector<std::size_t> p(w);
    std::iota(p.begin(), p.end(), std::size_t{0});
    out.perms.push_back(std::move(p));
  }
  return out;
}

inline PermutationSet random_permutation(const ModelSpec& spec, std::mt19937_64& rng) {
  PermutationSet out = identity_permutation(spec);
  for (auto& p : out.perms) std::shuffle(p.begin(), p.end(), rng);
  return out;
}

inline PermutationSet inverse(const PermutationSet& perm) {
  PermutationSet out = perm;
  for (std::size_t g = 0; g < perm.perms.size(); ++g)
    for (std::size_t i = 0; i < perm.perms[g].size(); ++i) out.perms[g][perm.perms[g][i]] = i;
  return out;
}

// Permutation equivalent to applying `first` and then `second`.
inline PermutationSet compose(const PermutationSet& first, const PermutationSet& second) {
  PermutationSet out = second;
  for (std::size_t g = 0; g < second.perms.size(); ++g)
    for (std::size_t i = 0; i < second.perms[g].size(); ++i) out.perms[g][i] = first.perms[g][second.perms[g][i]];
  return out;
}

// Relabels hidden units: new[i, k] = old[perm_row[i], perm_col[k]]. The
// network function is unchanged.
inline ParamVector apply_permutation(const ParamVector& params, const PermutationSet& perm) {
  const ParamLayout layout = make_layout(params.spec);
  validate_permutations(layout, perm);
  ParamVector out = params;
  for (const auto& e : layout.entries) {
    if (e.row_group < 0 && e.col_group < 0) continue;
    auto src = params.view(e);
    auto dst = out.view(e);
    const std::size_t r = e.rows(), c = e.cols();
    const auto* rp = e.row_group >= 0 ? &perm.perms[static_cast<std::size_t>(e.row_group)] : nullptr;
    const auto* cp = e.col_group >= 0 ? &perm.perms[static_cast<std::size_t>(e.col_group)] : nullptr;
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t si = rp ? (*rp)[i] : i;
      for (std::size_t k = 0; k < c; ++k) dst[i * c + k] = src[si * c + (cp ? (*cp)[k] : k)];
    }
  }
  return out;
}

// Elementwise convex combination sum_i weights[i] * params[i].
inline ParamVector interpolate(std::span<const ParamVector> params, std::span<const double> weights) {
  if (params.empty()) throw UsageError("interpolate: no parameter vectors");
  if (params.size() != weights.size()) throw UsageError("interpolate: one weight per parameter vector is required");
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (std::abs(wsum - 1.0) > 1e-9) throw UsageError("interpolate: weights must sum to 1");
  for (const auto& p : params)
    if (!(p.spec == params[0].spec) || p.size() != params[0].size())
      throw SpecError("interpolate: parameter vectors belong to different specs");
  std::vector<double> acc(params[0].size(), 0.0);
  for (std::size_t m = 0; m < params.size(); ++m) {
    const double w = weights[m];
    const float* src = params[m].values.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * static_cast<double>(src[i]);
  }
  return ParamVector(params[0].spec, std::vector<float>(acc.begin(), acc.end()));
}

inline double l2_distance(const ParamVector& a, const ParamVector& b) {
  if (a.size() != b.size()) throw SpecError("l2_distance: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.values[i]) - b.values[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace basinlab
