#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "genreplay/tensor.hpp"

namespace genreplay {

// Probabilities are floored at 1e-12 inside logarithms so one-hot limits stay
// finite.
constexpr double kProbFloor = 1e-12;

inline double clamped_log(double p) { return std::log(std::max(p, kProbFloor)); }

inline Tensor row_softmax(const Tensor& logits, double temperature = 1.0) {
  Tensor out(logits.shape());
  int n = logits.dim(0), k = logits.dim(1);
  for (int i = 0; i < n; ++i) {
    double mx = -1e300;
    for (int j = 0; j < k; ++j) mx = std::max(mx, logits.at(i, j) / temperature);
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      double e = std::exp(logits.at(i, j) / temperature - mx);
      out.at(i, j) = e;
      sum += e;
    }
    for (int j = 0; j < k; ++j) out.at(i, j) /= sum;
  }
  return out;
}

inline std::vector<int> row_argmax(const Tensor& m) {
  int n = m.dim(0), k = m.dim(1);
  std::vector<int> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (m.at(i, j) > m.at(i, best)) best = j;
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

/// Accumulates d(loss)/d(logits) for one row given p = softmax(logits) and
/// dp = d(loss)/d(p): dlogit_j += p_j * (dp_j - sum_k dp_k p_k).
inline void softmax_backward_row(const double* p, const double* dp, double* dlogit, int k) {
  double dot = 0.0;
  for (int j = 0; j < k; ++j) dot += dp[j] * p[j];
  for (int j = 0; j < k; ++j) dlogit[j] += p[j] * (dp[j] - dot);
}

}  // namespace genreplay
