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

#pragma once

#include <cilslu/error.hpp>
#include <cilslu/grad.hpp>

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace cilslu {

struct AdamWConfig {
  double learning_rate = 5e-5;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment buffers for one parameter list, in list order.
struct OptimizerState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

inline OptimizerState make_optimizer_state(std::span<Tensor* const> params, const AdamWConfig& config) {
  OptimizerState st;
  st.config = config;
  for (const Tensor* p : params) {
    st.first_moment.emplace_back(p->size(), 0.0);
    st.second_moment.emplace_back(p->size(), 0.0);
  }
  return st;
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
/// A parameter without an accumulated gradient is treated as having zero gradient.
inline void adamw_step(std::span<Tensor* const> params, OptimizerState& st) {
  require(params.size() == st.first_moment.size(), ErrorKind::dimension,
          "adamw_step: parameter list does not match optimizer state");
  const AdamWConfig& c = st.config;
  ++st.step;
  const double t = static_cast<double>(st.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    auto& m = st.first_moment[k];
    auto& v = st.second_moment[k];
    require(m.size() == p.size(), ErrorKind::dimension, "adamw_step: moment shape mismatch");
    require(p.grad.empty() || p.grad.size() == p.size(), ErrorKind::dimension,
            "adamw_step: gradient shape mismatch");
    const bool has_grad = !p.grad.empty();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = has_grad ? p.grad[i] : 0.0;
      p.data[i] *= 1.0 - c.learning_rate * c.weight_decay;
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.data[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
}

/// Scales all gradients so their global L2 norm is at most max_norm. Returns
/// the norm before clipping. max_norm <= 0 disables clipping.
inline double clip_grad_norm(std::span<Tensor* const> params, double max_norm) {
  double sq = 0.0;
  for (const Tensor* p : params)
    for (double g : p->grad) sq += g * g;
  const double norm = std::sqrt(sq);
  require(std::isfinite(norm), ErrorKind::numeric, "non-finite gradient norm");
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor* p : params)
      for (double& g : p->grad) g *= s;
  }
  return norm;
}

inline void zero_grads(std::span<Tensor* const> params) {
  for (Tensor* p : params) p->grad.clear();
}

}  // namespace cilslu
