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

#include <cilslu/model.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

namespace cilslu::testing {

inline ModelConfig tiny_config(std::size_t vocab = 4, std::size_t max_target = 3) {
  ModelConfig c;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.hidden = 8;
  c.heads = 2;
  c.ffn = 16;
  c.vocab_size = vocab;
  c.max_source_frames = 8;
  c.max_target_tokens = max_target;
  c.feature_dim = 4;
  c.dropout = 0.0;
  return c;
}

inline Tensor random_features(std::size_t frames, std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor f = Tensor::matrix(frames, dim);
  for (double& x : f.data) x = n(rng);
  return f;
}

/// Sharpens the output layer so decoded distributions are far from uniform.
inline void sharpen_output(Seq2SeqModel& m, double factor) {
  for (double& w : m.params().output_w.data) w *= factor;
}

/// Norm-wise relative error between taped parameter gradients and central
/// differences of `loss`, over all model parameters.
inline double model_gradient_error(Seq2SeqModel& m, const std::function<Var(BoundModel&)>& loss, double h = 1e-5) {
  m.zero_grad();
  {
    Tape tape;
    BoundModel b(tape, m);
    tape.backward(loss(b));
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (Tensor* p : m.parameters()) {
    std::vector<double> analytic = p->grad.empty() ? std::vector<double>(p->size(), 0.0) : p->grad;
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double saved = p->data[i];
      auto eval = [&] {
        Tape t(false);
        BoundModel b(t, static_cast<const Seq2SeqModel&>(m));
        return loss(b).item();
      };
      p->data[i] = saved + h;
      const double up = eval();
      p->data[i] = saved - h;
      const double down = eval();
      p->data[i] = saved;
      const double numeric = (up - down) / (2 * h);
      diff += (numeric - analytic[i]) * (numeric - analytic[i]);
      na += analytic[i] * analytic[i];
      nn += numeric * numeric;
    }
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
}

}  // namespace cilslu::testing
