#pragma once

#include <cmath>

#include "basinlab/data.hpp"
#include "basinlab/models.hpp"

namespace basinlab {

struct EvalResult {
  double accuracy = 0.0;  // in [0, 1]
  double loss = 0.0;      // mean cross-entropy
};

inline constexpr std::size_t kEvalChunk = 2048;

// Softmax probabilities in double, row per input.
inline Tensor<double> predict_proba(const ParamVector& params, const Tensor<float>& inputs) {
  const std::size_t n = inputs.rows();
  const std::size_t k = params.spec.num_classes;
  Tensor<double> out(Shape{n, k});
  for (std::size_t begin = 0; begin < n; begin += kEvalChunk) {
    const std::size_t end = std::min(n, begin + kEvalChunk);
    const Tensor<float> logits = forward(params, slice_rows(inputs, begin, end));
    for (std::size_t i = 0; i < end - begin; ++i) {
      const float* row = logits.data() + i * k;
      const double mx = *std::max_element(row, row + k);
      double sum = 0.0;
      double* o = out.data() + (begin + i) * k;
      for (std::size_t j = 0; j < k; ++j) sum += (o[j] = std::exp(static_cast<double>(row[j]) - mx));
      for (std::size_t j = 0; j < k; ++j) o[j] /= sum;
    }
  }
  return out;
}

inline EvalResult evaluate(const ParamVector& params, const Dataset& data) {
  const std::size_t n = data.size();
  const std::size_t k = params.spec.num_classes;
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t begin = 0; begin < n; begin += kEvalChunk) {
    const std::size_t end = std::min(n, begin + kEvalChunk);
    const Tensor<float> logits = forward(params, slice_rows(data.inputs, begin, end));
    for (std::size_t i = 0; i < end - begin; ++i) {
      const float* row = logits.data() + i * k;
      const std::size_t y = static_cast<std::size_t>(data.labels[begin + i]);
      const std::size_t arg = static_cast<std::size_t>(std::max_element(row, row + k) - row);
      correct += arg == y;
      const double mx = row[arg];
      double sum = 0.0;
      for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
      loss += mx + std::log(sum) - static_cast<double>(row[y]);
    }
  }
  return {static_cast<double>(correct) / static_cast<double>(n), loss / static_cast<double>(n)};
}

}  // namespace basinlab
