#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// A Var is a handle to a graph node. Operations on Vars build the graph
// eagerly (values are computed immediately); backward() walks the graph in
// reverse topological order and accumulates gradients into every node that
// requires them. Nodes whose inputs need no gradient do not record parents
// or a backward closure, so inference through the same ops builds no graph.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "basinlab/tensor.hpp"

namespace basinlab {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until the first accumulation
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";
  bool requires_grad = false;

  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var leaf(Tensor<T> value, bool requires_grad = true) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }
  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  const Tensor<T>& value() const { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }
  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Var<T> make_result(Tensor<T> value, const char* op, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
  if (n->requires_grad) {
    for (auto& in : inputs) n->parents.push_back(in.ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(n));
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

template <typename T>
void require_last_axis(const Tensor<T>& t, const char* op) {
  if (t.rank() == 0 || t.cols() == 0) throw DimensionError(std::string(op) + ": empty last axis");
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// out[m x n] += a[m x k] * b[k x n]
template <typename T>
void gemm_nn_acc(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[k x n] += a[m x k]^T * b[m x n]
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      T* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

template <typename T>
void softmax_rows(const Tensor<T>& x, Tensor<T>& out) {
  const std::size_t r = x.rows(), c = x.cols();
  for (std::size_t i = 0; i < r; ++i) {
    const T* xr = x.data() + i * c;
    T* orow = out.data() + i * c;
    const T mx = *std::max_element(xr, xr + c);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      orow[j] = static_cast<T>(std::exp(static_cast<double>(xr[j] - mx)));
      sum += orow[j];
    }
    const T inv = static_cast<T>(1.0 / sum);
    for (std::size_t j = 0; j < c; ++j) orow[j] *= inv;
  }
}

template <typename T>
void log_softmax_rows(const Tensor<T>& x, Tensor<T>& out) {
  const std::size_t r = x.rows(), c = x.cols();
  for (std::size_t i = 0; i < r; ++i) {
    const T* xr = x.data() + i * c;
    T* orow = out.data() + i * c;
    const T mx = *std::max_element(xr, xr + c);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(xr[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(sum);
    for (std::size_t j = 0; j < c; ++j) orow[j] = static_cast<T>(static_cast<double>(xr[j]) - lse);
  }
}

}  // namespace detail

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  Tensor<T> out(Shape{m, n});
  detail::gemm_nn_acc(av.data(), bv.data(), out.data(), m, k, n);
  return detail::make_result<T>(std::move(out), "matmul", {a, b}, [m, k, n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    if (pa.requires_grad) {
      // dA = G B^T
      const Tensor<T> bt = transpose(pb.value);
      detail::gemm_nn_acc(g.data(), bt.data(), pa.grad_buffer().data(), m, n, k);
    }
    if (pb.requires_grad) {
      // dB = A^T G
      detail::gemm_tn_acc(pa.value.data(), g.data(), pb.grad_buffer().data(), m, k, n);
    }
  });
}

// Affine layer: x[n x in] * W^T + b, with W stored as [out x in].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const auto& bv = bias.value();
  detail::require_matrix(xv, "linear");
  detail::require_matrix(wv, "linear");
  const std::size_t n = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
  if (wv.dim(1) != in)
    throw DimensionError("linear: input width " + std::to_string(in) + " vs weight " + shape_str(wv.shape()));
  if (bv.size() != out_dim) throw DimensionError("linear: bias length mismatch");
  Tensor<T> out(Shape{n, out_dim});
  for (std::size_t i = 0; i < n; ++i) std::copy(bv.data(), bv.data() + out_dim, out.data() + i * out_dim);
  const Tensor<T> wt = transpose(wv);
  detail::gemm_nn_acc(xv.data(), wt.data(), out.data(), n, in, out_dim);
  return detail::make_result<T>(std::move(out), "linear", {x, weight, bias}, [n, in, out_dim](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    const auto& g = self.grad;
    if (px.requires_grad) detail::gemm_nn_acc(g.data(), pw.value.data(), px.grad_buffer().data(), n, out_dim, in);
    if (pw.requires_grad) detail::gemm_tn_acc(g.data(), px.value.data(), pw.grad_buffer().data(), n, out_dim, in);
    if (pb.requires_grad) {
      T* gb = pb.grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[i * out_dim + j];
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_result<T>(std::move(out), "add", {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_result<T>(std::move(out), "mul", {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= s;
  return detail::make_result<T>(std::move(out), "scale", {a}, [s](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = v > T(0) ? v : T(0);
  return detail::make_result<T>(std::move(out), "relu", {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p.value[i] > T(0)) g[i] += self.grad[i];
  });
}

inline constexpr double kLayerNormEpsilon = 1e-5;

// Normalizes each row to zero mean and unit variance, then applies the
// learnable per-feature gain and bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps = kLayerNormEpsilon) {
  const auto& xv = x.value();
  detail::require_last_axis(xv, "layer_norm");
  const std::size_t r = xv.rows(), c = xv.cols();
  if (gain.value().size() != c || bias.value().size() != c)
    throw DimensionError("layer_norm: gain/bias length must equal " + std::to_string(c));
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(r);
  Tensor<T> out(xv.shape());
  const T* g = gain.value().data();
  const T* b = bias.value().data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = static_cast<T>(is);
    for (std::size_t j = 0; j < c; ++j) {
      const T h = static_cast<T>((row[j] - mean) * is);
      xhat[i * c + j] = h;
      out[i * c + j] = g[j] * h + b[j];
    }
  }
  return detail::make_result<T>(
      std::move(out), "layer_norm", {x, gain, bias},
      [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& dy = self.grad;
        if (pg.requires_grad) {
          T* gg = pg.grad_buffer().data();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gg[j] += dy[i * c + j] * xhat[i * c + j];
        }
        if (pb.requires_grad) {
          T* gb = pb.grad_buffer().data();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[j] += dy[i * c + j];
        }
        if (px.requires_grad) {
          T* gx = px.grad_buffer().data();
          const T* g = pg.value.data();
          std::vector<T> dxhat(c);
          for (std::size_t i = 0; i < r; ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              dxhat[j] = dy[i * c + j] * g[j];
              m1 += dxhat[j];
              m2 += static_cast<double>(dxhat[j]) * xhat[i * c + j];
            }
            m1 /= static_cast<double>(c);
            m2 /= static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j)
              gx[i * c + j] += static_cast<T>(inv_std[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2));
          }
        }
      });
}

template <typename T>
Var<T> softmax(const Var<T>& x) {
  detail::require_last_axis(x.value(), "softmax");
  Tensor<T> out(x.value().shape());
  detail::softmax_rows(x.value(), out);
  const std::size_t r = out.rows(), c = out.cols();
  return detail::make_result<T>(std::move(out), "softmax", {x}, [r, c](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const auto& s = self.value;
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += static_cast<double>(self.grad[i * c + j]) * s[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += static_cast<T>(s[i * c + j] * (self.grad[i * c + j] - dot));
    }
  });
}

template <typename T>
Var<T> log_softmax(const Var<T>& x) {
  detail::require_last_axis(x.value(), "log_softmax");
  Tensor<T> out(x.value().shape());
  detail::log_softmax_rows(x.value(), out);
  const std::size_t r = out.rows(), c = out.cols();
  return detail::make_result<T>(std::move(out), "log_softmax", {x}, [r, c](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < c; ++j) gsum += self.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += static_cast<T>(self.grad[i * c + j] - std::exp(static_cast<double>(self.value[i * c + j])) * gsum);
    }
  });
}

// Mean over rows of -log softmax(logits)[label].
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  const auto& lv = logits.value();
  detail::require_matrix(lv, "cross_entropy");
  const std::size_t n = lv.dim(0), k = lv.dim(1);
  if (k == 0) throw DimensionError("cross_entropy: empty last axis");
  if (labels.size() != n)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw DomainError("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
  Tensor<T> logp(lv.shape());
  detail::log_softmax_rows(lv, logp);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) loss -= logp[i * k + static_cast<std::size_t>(labels[i])];
  loss /= static_cast<double>(n);
  std::vector<int> y(labels.begin(), labels.end());
  return detail::make_result<T>(
      Tensor<T>::scalar(static_cast<T>(loss)), "cross_entropy", {logits},
      [n, k, y = std::move(y), logp = std::move(logp)](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        const double s = static_cast<double>(self.grad[0]) / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const double onehot = static_cast<std::size_t>(y[i]) == j ? 1.0 : 0.0;
            g[i * k + j] += static_cast<T>(s * (std::exp(static_cast<double>(logp[i * k + j])) - onehot));
          }
      });
}

// Mean over rows of sum_k p_k (log p_k - log_q_k), with 0 log 0 = 0. Takes
// log q directly so that callers holding log-probabilities avoid the
// exp/log round trip.
template <typename T>
Var<T> kl_divergence_log(const Var<T>& p, const Var<T>& log_q) {
  const auto& pv = p.value();
  const auto& lq = log_q.value();
  detail::require_matrix(pv, "kl_divergence");
  detail::require_same_shape(pv, lq, "kl_divergence");
  const std::size_t n = pv.dim(0), k = pv.dim(1);
  if (k == 0) throw DimensionError("kl_divergence: empty last axis");
  double total = 0.0;
  for (std::size_t i = 0; i < n * k; ++i) {
    if (pv[i] <= T(0)) continue;
    if (!std::isfinite(static_cast<double>(lq[i])))
      throw DomainError("kl_divergence: q is zero where p is positive");
    // log p is rounded to T so that p == q bitwise gives exactly zero
    const double lp = static_cast<T>(std::log(static_cast<double>(pv[i])));
    total += static_cast<double>(pv[i]) * (lp - static_cast<double>(lq[i]));
  }
  total /= static_cast<double>(n);
  return detail::make_result<T>(Tensor<T>::scalar(static_cast<T>(total)), "kl_divergence", {p, log_q},
                                [n, k](Node<T>& self) {
                                  auto& pp = *self.parents[0];
                                  auto& pq = *self.parents[1];
                                  const double s = static_cast<double>(self.grad[0]) / static_cast<double>(n);
                                  if (pq.requires_grad) {
                                    auto& g = pq.grad_buffer();
                                    for (std::size_t i = 0; i < n * k; ++i) g[i] -= static_cast<T>(s * pp.value[i]);
                                  }
                                  if (pp.requires_grad) {
                                    auto& g = pp.grad_buffer();
                                    for (std::size_t i = 0; i < n * k; ++i) {
                                      if (pp.value[i] <= T(0)) continue;
                                      const double lp = std::log(static_cast<double>(pp.value[i]));
                                      g[i] += static_cast<T>(s * (lp - pq.value[i] + 1.0));
                                    }
                                  }
                                });
}

template <typename T>
void validate_distributions(const Tensor<T>& p, const char* what) {
  const std::size_t r = p.rows(), c = p.cols();
  for (std::size_t i = 0; i < r; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double v = p[i * c + j];
      if (v < 0.0 || !std::isfinite(v)) throw DomainError(std::string(what) + ": entries must be finite and nonnegative");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw DomainError(std::string(what) + ": rows must sum to 1");
  }
}

// KL(p || q) for probability rows, averaged over rows.
template <typename T>
Var<T> kl_divergence(const Var<T>& p, const Var<T>& q) {
  detail::require_matrix(p.value(), "kl_divergence");
  detail::require_same_shape(p.value(), q.value(), "kl_divergence");
  validate_distributions(p.value(), "kl_divergence p");
  validate_distributions(q.value(), "kl_divergence q");
  const auto& qv = q.value();
  Tensor<T> logq(qv.shape());
  for (std::size_t i = 0; i < qv.size(); ++i) {
    if (qv[i] <= T(0) && p.value()[i] > T(0)) throw DomainError("kl_divergence: q is zero where p is positive");
    logq[i] = qv[i] > T(0) ? static_cast<T>(std::log(static_cast<double>(qv[i]))) : -std::numeric_limits<T>::infinity();
  }
  auto logq_var = detail::make_result<T>(std::move(logq), "log", {q}, [](Node<T>& self) {
    auto& pq = *self.parents[0];
    auto& g = pq.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (pq.value[i] > T(0)) g[i] += self.grad[i] / pq.value[i];
  });
  return kl_divergence_log(p, logq_var);
}

// Accumulates d(root)/d(node) into every node of the graph that requires a
// gradient. The root must be a scalar.
template <typename T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) throw UsageError("backward: root must be a scalar, got " + shape_str(root.value().shape()));
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{&root.node(), 0}};
  visited.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node().grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
  }
}

}  // namespace basinlab
