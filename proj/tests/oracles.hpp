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

// Slow reference implementations. None of them call the code they check.

#pragma once

#include <cilslu/model.hpp>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace cilslu::testing {

/// Exhaustive recursion without memoization: the distance is the cheapest way
/// to consume both sequences from the front.
inline std::size_t brute_edit(const std::vector<std::string>& a, std::size_t i, const std::vector<std::string>& b,
                              std::size_t j) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  return std::min({brute_edit(a, i + 1, b, j) + 1, brute_edit(a, i, b, j + 1) + 1,
                   brute_edit(a, i + 1, b, j + 1) + (a[i] == b[j] ? 0 : 1)});
}

/// Scores every admissible sequence with the taped teacher-forced path and
/// returns the best (ties: lexicographically smaller).
inline Hypothesis exhaustive_best(const Seq2SeqModel& m, const Tensor& f, std::size_t max_len) {
  const int vocab = static_cast<int>(m.config().vocab_size);
  Hypothesis best;
  bool have = false;
  std::function<void(std::vector<int>&)> rec = [&](std::vector<int>& seq) {
    const std::size_t len = seq.size() - 1;
    if (len > 0 && (seq.back() == token::eos || len == max_len)) {
      const Tensor logits = forward_teacher_forced(m, f, std::span<const int>(seq.data(), seq.size() - 1));
      double score = 0.0;
      for (std::size_t j = 0; j + 1 < seq.size(); ++j)
        score += logits(j, seq[j + 1]) - kernels::log_sum_exp(logits.data.data() + j * vocab, vocab);
      if (!have || score > best.log_prob || (score == best.log_prob && seq < best.tokens)) {
        best.tokens = seq;
        best.log_prob = score;
        best.finished = true;
        have = true;
      }
      return;
    }
    for (int v = 0; v < vocab; ++v) {
      if (v == token::pad || v == token::bos) continue;
      seq.push_back(v);
      rec(seq);
      seq.pop_back();
    }
  };
  std::vector<int> seq{token::bos};
  rec(seq);
  return best;
}

/// Greedy herding spelled out step by step: at every step, try each unused
/// candidate, recompute the exemplar mean from scratch, and keep the one whose
/// mean lands closest to the class mean (smallest id on ties).
inline std::vector<std::uint32_t> greedy_herding(const std::vector<std::uint32_t>& ids,
                                                 const std::vector<std::vector<double>>& points, std::size_t m) {
  const std::size_t n = ids.size(), dim = points.empty() ? 0 : points[0].size();
  std::vector<double> mu(dim, 0.0);
  for (const auto& p : points)
    for (std::size_t d = 0; d < dim; ++d) mu[d] += p[d];
  for (double& x : mu) x /= static_cast<double>(n);
  std::vector<std::size_t> chosen;
  std::vector<bool> used(n, false);
  for (std::size_t step = 0; step < m; ++step) {
    std::size_t best = n;
    double best_d = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (used[c]) continue;
      double d2 = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        double s = 0.0;
        for (std::size_t k : chosen) s += points[k][d];
        s += points[c][d];
        const double diff = mu[d] - s / static_cast<double>(chosen.size() + 1);
        d2 += diff * diff;
      }
      if (best == n || d2 < best_d || (d2 == best_d && ids[c] < ids[best])) {
        best = c;
        best_d = d2;
      }
    }
    used[best] = true;
    chosen.push_back(best);
  }
  std::vector<std::uint32_t> out;
  for (std::size_t k : chosen) out.push_back(ids[k]);
  return out;
}

}  // namespace cilslu::testing
