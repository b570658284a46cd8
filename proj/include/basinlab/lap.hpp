#pragma once

// Linear assignment: maximize sum_i C[i, a(i)] over bijections a.
// Shortest augmenting path with potentials, O(n^3).

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "basinlab/errors.hpp"

namespace basinlab {

class CostMatrix {
 public:
  CostMatrix() = default;
  explicit CostMatrix(std::size_t n) : n_(n), data_(n * n, 0.0) {}
  CostMatrix(std::size_t n, std::vector<double> values) : n_(n), data_(std::move(values)) {
    if (data_.size() != n * n) throw UsageError("cost matrix must be square");
  }

  std::size_t size() const { return n_; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * n_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * n_ + j]; }
  const std::vector<double>& values() const { return data_; }

 private:
  std::size_t n_ = 0;
  std::vector<double> data_;
};

struct Assignment {
  std::vector<std::size_t> col_of_row;
  double score = 0.0;
};

inline double assignment_score(const CostMatrix& c, const std::vector<std::size_t>& col_of_row) {
  double s = 0.0;
  for (std::size_t i = 0; i < col_of_row.size(); ++i) s += c(i, col_of_row[i]);
  return s;
}

// Ties resolve toward the smallest column index found while scanning, so
// results are deterministic for a given matrix.
inline Assignment solve_lap(const CostMatrix& c) {
  const std::size_t n = c.size();
  for (double v : c.values())
    if (!std::isfinite(v)) throw DomainError("solve_lap: non-finite cost");
  Assignment out;
  if (n == 0) return out;
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; index 0 is the virtual source. Minimizes -C.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = -c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  out.col_of_row.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) out.col_of_row[p[j] - 1] = j - 1;
  out.score = assignment_score(c, out.col_of_row);
  return out;
}

}  // namespace basinlab
