// Copyright 2026 The cilslu Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense row-major kernels shared by the taped ops and the cached decoder.
// Every output row is produced independently with a fixed summation order, so
// a single-row call reproduces the corresponding row of a batched call bitwise.

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace cilslu::kernels {

/// c[m×n] += a[m×k] · b[k×n]. Rows are processed four at a time to reuse each
/// row of b; the per-element accumulation order is the same for any m.
inline void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    const double* a0 = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double x0 = a0[p], x1 = a0[k + p], x2 = a0[2 * k + p], x3 = a0[3 * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bj = bp[j];
        c0[j] += x0 * bj;
        c1[j] += x1 * bj;
        c2[j] += x2 * bj;
        c3[j] += x3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

/// c[m×n] += a[m×k] · bᵀ, with b stored as [n×k]. b is transposed once so the
/// inner loop runs over contiguous columns of c.
inline void gemm_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm(a, bt.data(), c, m, k, n);
}

/// c[m×n] += aᵀ · b, with a stored as [k×m] and b as [k×n]
inline void gemm_at(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

/// y = x·W + b for a block of rows.
inline void linear(const double* x, const double* w, const double* bias, double* y, std::size_t rows,
                   std::size_t in, std::size_t out) {
  for (std::size_t i = 0; i < rows * out; ++i) y[i] = 0.0;
  gemm(x, w, y, rows, in, out);
  if (bias != nullptr) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < out; ++j) y[i * out + j] += bias[j];
  }
}

/// Normalizes one row; writes the mean and reciprocal standard deviation when asked.
inline void layer_norm_row(const double* x, const double* gain, const double* bias, double* y,
                           std::size_t n, double eps, double* mean_out = nullptr,
                           double* rstd_out = nullptr) {
  double mean = 0.0;
  for (std::size_t j = 0; j < n; ++j) mean += x[j];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
  var /= static_cast<double>(n);
  const double rstd = 1.0 / std::sqrt(var + eps);
  for (std::size_t j = 0; j < n; ++j) y[j] = (x[j] - mean) * rstd * gain[j] + bias[j];
  if (mean_out != nullptr) *mean_out = mean;
  if (rstd_out != nullptr) *rstd_out = rstd;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

/// In-place max-subtracted softmax over n entries.
inline void softmax_row(double* x, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    x[j] = std::exp(x[j] - mx);
    sum += x[j];
  }
  for (std::size_t j = 0; j < n; ++j) x[j] /= sum;
}

/// log-sum-exp of one row.
inline double log_sum_exp(const double* x, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
  return mx + std::log(sum);
}

/// Multi-head scaled dot-product attention for a single query row against the
/// first `keys` rows of k and v (both [·×width]). Per-head probabilities are
/// written to probs + head * prob_stride.
inline void attend_row(const double* q, const double* k, const double* v, std::size_t keys,
                       std::size_t width, std::size_t heads, double* out, double* probs,
                       std::size_t prob_stride) {
  const std::size_t dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const std::size_t off = hd * dh;
    double* p = probs + hd * prob_stride;
    for (std::size_t t = 0; t < keys; ++t) {
      const double* kt = k + t * width + off;
      double acc = 0.0;
      for (std::size_t d = 0; d < dh; ++d) acc += q[off + d] * kt[d];
      p[t] = acc * scale;
    }
    softmax_row(p, keys);
    for (std::size_t d = 0; d < dh; ++d) out[off + d] = 0.0;
    for (std::size_t t = 0; t < keys; ++t) {
      const double pt = p[t];
      const double* vt = v + t * width + off;
      for (std::size_t d = 0; d < dh; ++d) out[off + d] += pt * vt[d];
    }
  }
}

}  // namespace cilslu::kernels
