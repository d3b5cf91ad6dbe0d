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

// Small encoder-decoder transformer: a frame encoder standing in for the
// speech encoder, an autoregressive token decoder, teacher-forced logits,
// pooled encoder embeddings, and cached beam-search decoding.

#pragma once

#include <cilslu/error.hpp>
#include <cilslu/grad.hpp>
#include <cilslu/kernels.hpp>
#include <cilslu/tokens.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace cilslu {

struct ModelConfig {
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn = 128;
  std::size_t vocab_size = 120;
  std::size_t max_source_frames = 48;
  std::size_t max_target_tokens = 32;
  std::size_t feature_dim = 16;
  double dropout = 0.1;
  double norm_epsilon = 1e-5;

  /// Desk-scale defaults.
  static ModelConfig desk(std::size_t vocab) {
    ModelConfig c;
    c.vocab_size = vocab;
    return c;
  }

  /// The 12-block encoder / 6-block decoder configuration at hidden size 768.
  static ModelConfig paper_scale(std::size_t vocab) {
    ModelConfig c;
    c.encoder_layers = 12;
    c.decoder_layers = 6;
    c.hidden = 768;
    c.heads = 8;
    c.ffn = 2048;
    c.vocab_size = vocab;
    return c;
  }

  void validate() const {
    require(hidden >= 2 && heads >= 1 && hidden % heads == 0, ErrorKind::config,
            "hidden size must be divisible by the head count");
    require(vocab_size > static_cast<std::size_t>(token::eos), ErrorKind::config,
            "vocabulary must contain PAD, BOS and EOS");
    require(max_source_frames >= 1 && max_target_tokens >= 1, ErrorKind::config,
            "maximum lengths must be positive");
    require(feature_dim >= 2 && ffn >= 1, ErrorKind::config, "feature and FFN sizes must be positive");
    require(dropout >= 0.0 && dropout < 1.0, ErrorKind::config, "dropout must lie in [0, 1)");
    require(norm_epsilon > 0.0, ErrorKind::config, "normalization epsilon must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Parameter containers are templated on the leaf type: Tensor for storage,
// Var for a view bound to a Tape. visit() walks leaves in a fixed order.

template <class T>
struct NormParams {
  T gain, bias;
  template <class F> void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gain", gain);
    f(prefix + ".bias", bias);
  }
};

template <class T>
struct AttentionParams {
  T wq, bq, wk, bk, wv, bv, wo, bo;
  template <class F> void visit(const std::string& prefix, F&& f) {
    f(prefix + ".wq", wq); f(prefix + ".bq", bq);
    f(prefix + ".wk", wk); f(prefix + ".bk", bk);
    f(prefix + ".wv", wv); f(prefix + ".bv", bv);
    f(prefix + ".wo", wo); f(prefix + ".bo", bo);
  }
};

template <class T>
struct FeedForwardParams {
  T w1, b1, w2, b2;
  template <class F> void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w1", w1); f(prefix + ".b1", b1);
    f(prefix + ".w2", w2); f(prefix + ".b2", b2);
  }
};

template <class T>
struct EncoderLayerParams {
  NormParams<T> norm1;
  AttentionParams<T> self_attention;
  NormParams<T> norm2;
  FeedForwardParams<T> ffn;
  template <class F> void visit(const std::string& prefix, F&& f) {
    norm1.visit(prefix + ".norm1", f);
    self_attention.visit(prefix + ".self_attention", f);
    norm2.visit(prefix + ".norm2", f);
    ffn.visit(prefix + ".ffn", f);
  }
};

template <class T>
struct DecoderLayerParams {
  NormParams<T> norm1;
  AttentionParams<T> self_attention;
  NormParams<T> norm2;
  AttentionParams<T> cross_attention;
  NormParams<T> norm3;
  FeedForwardParams<T> ffn;
  template <class F> void visit(const std::string& prefix, F&& f) {
    norm1.visit(prefix + ".norm1", f);
    self_attention.visit(prefix + ".self_attention", f);
    norm2.visit(prefix + ".norm2", f);
    cross_attention.visit(prefix + ".cross_attention", f);
    norm3.visit(prefix + ".norm3", f);
    ffn.visit(prefix + ".ffn", f);
  }
};

template <class T>
struct ModelParams {
  NormParams<T> input_norm;
  T input_w, input_b;
  std::vector<EncoderLayerParams<T>> encoder;
  NormParams<T> encoder_norm;
  T token_embedding;
  std::vector<DecoderLayerParams<T>> decoder;
  NormParams<T> decoder_norm;
  T output_w, output_b;

  template <class F> void visit(F&& f) {
    input_norm.visit("input_norm", f);
    f(std::string("input.w"), input_w);
    f(std::string("input.b"), input_b);
    for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].visit("encoder." + std::to_string(i), f);
    encoder_norm.visit("encoder_norm", f);
    f(std::string("token_embedding"), token_embedding);
    for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].visit("decoder." + std::to_string(i), f);
    decoder_norm.visit("decoder_norm", f);
    f(std::string("output.w"), output_w);
    f(std::string("output.b"), output_b);
  }
};

/// Sinusoidal position table, [positions × width].
inline Tensor sinusoidal_positions(std::size_t positions, std::size_t width) {
  Tensor pe = Tensor::matrix(positions, width);
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t i = 0; i < width; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(width));
      pe(p, i) = std::sin(static_cast<double>(p) * freq);
      if (i + 1 < width) pe(p, i + 1) = std::cos(static_cast<double>(p) * freq);
    }
  }
  return pe;
}

class Seq2SeqModel {
 public:
  Seq2SeqModel() = default;

  Seq2SeqModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    const std::size_t h = config_.hidden, f = config_.ffn, d = config_.feature_dim;
    std::mt19937_64 rng(seed);
    auto glorot = [&rng](std::size_t in, std::size_t out) {
      Tensor w = Tensor::matrix(in, out);
      const double a = std::sqrt(6.0 / static_cast<double>(in + out));
      std::uniform_real_distribution<double> u(-a, a);
      for (double& x : w.data) x = u(rng);
      return w;
    };
    auto ones = [](std::size_t n) { return Tensor(Shape{n}, 1.0); };
    auto zeros = [](std::size_t n) { return Tensor(Shape{n}, 0.0); };
    auto norm = [&](std::size_t n) { return NormParams<Tensor>{ones(n), zeros(n)}; };
    auto attn = [&] {
      return AttentionParams<Tensor>{glorot(h, h), zeros(h), glorot(h, h), zeros(h),
                                     glorot(h, h), zeros(h), glorot(h, h), zeros(h)};
    };
    auto ffn = [&] { return FeedForwardParams<Tensor>{glorot(h, f), zeros(f), glorot(f, h), zeros(h)}; };

    params_.input_norm = norm(d);
    params_.input_w = glorot(d, h);
    params_.input_b = zeros(h);
    for (std::size_t i = 0; i < config_.encoder_layers; ++i)
      params_.encoder.push_back({norm(h), attn(), norm(h), ffn()});
    params_.encoder_norm = norm(h);
    params_.token_embedding = Tensor::matrix(config_.vocab_size, h);
    std::normal_distribution<double> emb(0.0, 1.0);
    for (double& x : params_.token_embedding.data) x = emb(rng);
    for (std::size_t i = 0; i < config_.decoder_layers; ++i)
      params_.decoder.push_back({norm(h), attn(), norm(h), attn(), norm(h), ffn()});
    params_.decoder_norm = norm(h);
    params_.output_w = Tensor::matrix(h, config_.vocab_size);
    std::normal_distribution<double> small(0.0, 0.02);
    for (double& x : params_.output_w.data) x = small(rng);
    params_.output_b = zeros(config_.vocab_size);
    params_.visit([](const std::string&, Tensor& t) { t.requires_grad = true; });
  }

  const ModelConfig& config() const { return config_; }
  ModelParams<Tensor>& params() { return params_; }
  const ModelParams<Tensor>& params() const { return params_; }

  /// Parameter pointers in visit order.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    params_.visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
  }

  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    const_cast<ModelParams<Tensor>&>(params_).visit(
        [&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t->size();
    return n;
  }

  void zero_grad() {
    for (Tensor* t : parameters()) t->grad.clear();
  }

  /// Bitwise parameter equality.
  bool same_parameters(const Seq2SeqModel& other) const {
    const auto a = named_parameters();
    const auto b = other.named_parameters();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].second->shape != b[i].second->shape || a[i].second->data != b[i].second->data) return false;
    return true;
  }

  /// Copy of the model with gradient buffers dropped and no trainable leaves.
  Seq2SeqModel frozen_copy() const {
    Seq2SeqModel copy = *this;
    copy.params_.visit([](const std::string&, Tensor& t) {
      t.grad.clear();
      t.requires_grad = false;
    });
    return copy;
  }

  void check_features(const Tensor& features) const {
    require(features.rank() == 2 && features.cols() == config_.feature_dim, ErrorKind::input,
            "features must be [frames x " + std::to_string(config_.feature_dim) + "], got " +
                shape_string(features.shape));
    const std::size_t frames = features.rows();
    require(frames >= 1 && frames <= config_.max_source_frames, ErrorKind::input,
            "frame count " + std::to_string(frames) + " outside [1, " +
                std::to_string(config_.max_source_frames) + "]");
  }

  void check_target(std::span<const int> tokens) const {
    require(!tokens.empty() && tokens[0] == token::bos, ErrorKind::input, "target must begin with BOS");
    require(tokens.size() <= config_.max_target_tokens, ErrorKind::input,
            "target length " + std::to_string(tokens.size()) + " exceeds " +
                std::to_string(config_.max_target_tokens));
    for (int t : tokens)
      require(t >= 0 && static_cast<std::size_t>(t) < config_.vocab_size, ErrorKind::input,
              "target token outside vocabulary");
  }

 private:
  ModelConfig config_;
  ModelParams<Tensor> params_;
};

/// A model's parameters bound to a tape. Binding a mutable model makes the
/// parameters trainable leaves; binding a const model enters them as constants.
class BoundModel {
 public:
  BoundModel(Tape& tape, Seq2SeqModel& model) : tape_(tape), model_(model) { bind(model.params()); }

  BoundModel(Tape& tape, const Seq2SeqModel& model) : tape_(tape), model_(model) {
    bind(model.params());
  }

  Tape& tape() const { return tape_; }
  const ModelConfig& config() const { return model_.config(); }

  /// Contextual frame embeddings, [frames × hidden].
  Var encode(const Tensor& features, std::mt19937_64* rng = nullptr) const {
    model_.check_features(features);
    const ModelConfig& c = config();
    Var x = layer_norm(tape_.constant(features), p_.input_norm.gain, p_.input_norm.bias, c.norm_epsilon);
    x = linear(x, p_.input_w, p_.input_b);
    x = add_constant(x, sinusoidal_positions(features.rows(), c.hidden));
    x = dropout(x, c.dropout, rng);
    for (const auto& layer : p_.encoder) {
      Var a = layer_norm(x, layer.norm1.gain, layer.norm1.bias, c.norm_epsilon);
      x = add(x, dropout(self_attention(layer.self_attention, a, false), c.dropout, rng));
      Var b = layer_norm(x, layer.norm2.gain, layer.norm2.bias, c.norm_epsilon);
      x = add(x, dropout(feed_forward(layer.ffn, b), c.dropout, rng));
    }
    return layer_norm(x, p_.encoder_norm.gain, p_.encoder_norm.bias, c.norm_epsilon);
  }

  /// Temporal mean of encode(), [1 × hidden].
  Var encode_pooled(const Tensor& features, std::mt19937_64* rng = nullptr) const {
    return mean(encode(features, rng), 0);
  }

  /// Next-token logits [J × vocab] for decoder inputs `tokens` (BOS first);
  /// row j conditions on the source and tokens[0..j].
  Var decode(Var memory, std::span<const int> tokens, std::mt19937_64* rng = nullptr) const {
    model_.check_target(tokens);
    const ModelConfig& c = config();
    Var y = embedding(p_.token_embedding, tokens);
    y = add_constant(y, sinusoidal_positions(tokens.size(), c.hidden));
    y = dropout(y, c.dropout, rng);
    for (const auto& layer : p_.decoder) {
      Var a = layer_norm(y, layer.norm1.gain, layer.norm1.bias, c.norm_epsilon);
      y = add(y, dropout(self_attention(layer.self_attention, a, true), c.dropout, rng));
      Var b = layer_norm(y, layer.norm2.gain, layer.norm2.bias, c.norm_epsilon);
      y = add(y, dropout(cross_attention(layer.cross_attention, b, memory), c.dropout, rng));
      Var d = layer_norm(y, layer.norm3.gain, layer.norm3.bias, c.norm_epsilon);
      y = add(y, dropout(feed_forward(layer.ffn, d), c.dropout, rng));
    }
    y = layer_norm(y, p_.decoder_norm.gain, p_.decoder_norm.bias, c.norm_epsilon);
    return linear(y, p_.output_w, p_.output_b);
  }

  Var forward_teacher_forced(const Tensor& features, std::span<const int> tokens,
                             std::mt19937_64* rng = nullptr) const {
    return decode(encode(features, rng), tokens, rng);
  }

 private:
  template <class M>
  void bind(M& params) {
    std::vector<Var> leaves;
    auto& mut = const_cast<ModelParams<Tensor>&>(params);
    mut.visit([&](const std::string&, Tensor& t) {
      if constexpr (std::is_const_v<M>) {
        leaves.push_back(tape_.param(static_cast<const Tensor&>(t)));
      } else {
        leaves.push_back(tape_.param(t));
      }
    });
    // Mirror the structure, then fill leaves in the same visit order.
    p_.encoder.resize(params.encoder.size());
    p_.decoder.resize(params.decoder.size());
    std::size_t k = 0;
    p_.visit([&](const std::string&, Var& v) { v = leaves[k++]; });
  }

  Var self_attention(const AttentionParams<Var>& a, Var x, bool causal) const {
    Var q = linear(x, a.wq, a.bq);
    Var k = linear(x, a.wk, a.bk);
    Var v = linear(x, a.wv, a.bv);
    return linear(attention(q, k, v, config().heads, causal), a.wo, a.bo);
  }

  Var cross_attention(const AttentionParams<Var>& a, Var x, Var memory) const {
    Var q = linear(x, a.wq, a.bq);
    Var k = linear(memory, a.wk, a.bk);
    Var v = linear(memory, a.wv, a.bv);
    return linear(attention(q, k, v, config().heads, false), a.wo, a.bo);
  }

  Var feed_forward(const FeedForwardParams<Var>& f, Var x) const {
    return linear(gelu(linear(x, f.w1, f.b1)), f.w2, f.b2);
  }

  Tape& tape_;
  const Seq2SeqModel& model_;
  ModelParams<Var> p_;
};

// ---------------------------------------------------------------------------
// Untaped evaluation helpers

inline Tensor encode(const Seq2SeqModel& model, const Tensor& features) {
  Tape tape(false);
  BoundModel bound(tape, model);
  return bound.encode(features).value();
}

inline Tensor encode_pooled(const Seq2SeqModel& model, const Tensor& features) {
  Tape tape(false);
  BoundModel bound(tape, model);
  return bound.encode_pooled(features).value();
}

inline Tensor forward_teacher_forced(const Seq2SeqModel& model, const Tensor& features,
                                     std::span<const int> tokens) {
  Tape tape(false);
  BoundModel bound(tape, model);
  return bound.forward_teacher_forced(features, tokens).value();
}

// ---------------------------------------------------------------------------
// Incremental decoding

/// Per-hypothesis self-attention key/value cache.
struct DecoderCache {
  std::vector<std::vector<double>> keys;
  std::vector<std::vector<double>> values;
  std::size_t length = 0;
};

/// Encoder memory projected into each decoder layer's cross-attention keys/values.
class IncrementalDecoder {
 public:
  IncrementalDecoder(const Seq2SeqModel& model, const Tensor& features) : model_(model) {
    const ModelConfig& c = model.config();
    const Tensor memory = encode(model, features);
    frames_ = memory.rows();
    const std::size_t h = c.hidden;
    for (const auto& layer : model.params().decoder) {
      std::vector<double> k(frames_ * h), v(frames_ * h);
      kernels::linear(memory.data.data(), layer.cross_attention.wk.data.data(),
                      layer.cross_attention.bk.data.data(), k.data(), frames_, h, h);
      kernels::linear(memory.data.data(), layer.cross_attention.wv.data.data(),
                      layer.cross_attention.bv.data.data(), v.data(), frames_, h, h);
      memory_keys_.push_back(std::move(k));
      memory_values_.push_back(std::move(v));
    }
  }

  DecoderCache start() const {
    DecoderCache cache;
    cache.keys.resize(model_.config().decoder_layers);
    cache.values.resize(model_.config().decoder_layers);
    return cache;
  }

  /// Feeds `token` at position cache.length and returns next-token log-probabilities.
  std::vector<double> step(DecoderCache& cache, int token) const {
    const ModelConfig& c = model_.config();
    const auto& p = model_.params();
    const std::size_t h = c.hidden, pos = cache.length;
    require(token >= 0 && static_cast<std::size_t>(token) < c.vocab_size, ErrorKind::input,
            "decoder token outside vocabulary");
    std::vector<double> x(h), a(h), q(h), kv(h), vv(h), o(h), proj(h), hid(c.ffn);
    const Tensor pe = sinusoidal_positions(pos + 1, h);
    for (std::size_t j = 0; j < h; ++j)
      x[j] = p.token_embedding.data[static_cast<std::size_t>(token) * h + j] + pe.data[pos * h + j];
    std::vector<double> probs(c.heads * std::max(pos + 1, frames_));
    const std::size_t stride = std::max(pos + 1, frames_);
    for (std::size_t l = 0; l < p.decoder.size(); ++l) {
      const auto& layer = p.decoder[l];
      const auto& sa = layer.self_attention;
      kernels::layer_norm_row(x.data(), layer.norm1.gain.data.data(), layer.norm1.bias.data.data(),
                              a.data(), h, c.norm_epsilon);
      kernels::linear(a.data(), sa.wq.data.data(), sa.bq.data.data(), q.data(), 1, h, h);
      kernels::linear(a.data(), sa.wk.data.data(), sa.bk.data.data(), kv.data(), 1, h, h);
      kernels::linear(a.data(), sa.wv.data.data(), sa.bv.data.data(), vv.data(), 1, h, h);
      cache.keys[l].insert(cache.keys[l].end(), kv.begin(), kv.end());
      cache.values[l].insert(cache.values[l].end(), vv.begin(), vv.end());
      kernels::attend_row(q.data(), cache.keys[l].data(), cache.values[l].data(), pos + 1, h, c.heads,
                          o.data(), probs.data(), stride);
      kernels::linear(o.data(), sa.wo.data.data(), sa.bo.data.data(), proj.data(), 1, h, h);
      for (std::size_t j = 0; j < h; ++j) x[j] += proj[j];

      const auto& ca = layer.cross_attention;
      kernels::layer_norm_row(x.data(), layer.norm2.gain.data.data(), layer.norm2.bias.data.data(),
                              a.data(), h, c.norm_epsilon);
      kernels::linear(a.data(), ca.wq.data.data(), ca.bq.data.data(), q.data(), 1, h, h);
      kernels::attend_row(q.data(), memory_keys_[l].data(), memory_values_[l].data(), frames_, h,
                          c.heads, o.data(), probs.data(), stride);
      kernels::linear(o.data(), ca.wo.data.data(), ca.bo.data.data(), proj.data(), 1, h, h);
      for (std::size_t j = 0; j < h; ++j) x[j] += proj[j];

      const auto& f = layer.ffn;
      kernels::layer_norm_row(x.data(), layer.norm3.gain.data.data(), layer.norm3.bias.data.data(),
                              a.data(), h, c.norm_epsilon);
      kernels::linear(a.data(), f.w1.data.data(), f.b1.data.data(), hid.data(), 1, h, c.ffn);
      for (double& v : hid) v = kernels::gelu(v);
      kernels::linear(hid.data(), f.w2.data.data(), f.b2.data.data(), proj.data(), 1, c.ffn, h);
      for (std::size_t j = 0; j < h; ++j) x[j] += proj[j];
    }
    kernels::layer_norm_row(x.data(), p.decoder_norm.gain.data.data(), p.decoder_norm.bias.data.data(),
                            a.data(), h, c.norm_epsilon);
    std::vector<double> logits(c.vocab_size);
    kernels::linear(a.data(), p.output_w.data.data(), p.output_b.data.data(), logits.data(), 1, h,
                    c.vocab_size);
    ++cache.length;
    const double lse = kernels::log_sum_exp(logits.data(), logits.size());
    for (double& v : logits) v -= lse;
    return logits;
  }

 private:
  const Seq2SeqModel& model_;
  std::size_t frames_ = 0;
  std::vector<std::vector<double>> memory_keys_;
  std::vector<std::vector<double>> memory_values_;
};

// ---------------------------------------------------------------------------
// Decoding

struct Hypothesis {
  std::vector<int> tokens{token::bos};  // BOS-initiated
  double log_prob = 0.0;
  bool finished = false;

  /// Generated tokens, BOS excluded.
  std::size_t length() const { return tokens.size() - 1; }
};

struct BeamOptions {
  std::size_t width = 20;
  std::size_t max_length = 0;  // generated-token cap; 0 = model max_target_tokens
  bool length_normalize = false;
};

namespace detail {

inline bool generable(int t) { return t != token::pad && t != token::bos; }

inline double beam_score(const Hypothesis& h, bool normalize) {
  return normalize ? h.log_prob / static_cast<double>(std::max<std::size_t>(h.length(), 1)) : h.log_prob;
}

/// Higher score first; equal scores broken by the lexicographically smaller sequence.
inline bool better(double sa, const std::vector<int>& a, double sb, const std::vector<int>& b) {
  if (sa != sb) return sa > sb;
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace detail

/// Argmax decoding; ties go to the smaller token id.
inline Hypothesis greedy_decode(const Seq2SeqModel& model, const Tensor& features, std::size_t max_length = 0) {
  if (max_length == 0) max_length = model.config().max_target_tokens;
  IncrementalDecoder dec(model, features);
  DecoderCache cache = dec.start();
  Hypothesis h;
  while (!h.finished) {
    const auto lp = dec.step(cache, h.tokens.back());
    int best = -1;
    for (int v = 0; v < static_cast<int>(lp.size()); ++v)
      if (detail::generable(v) && (best < 0 || lp[v] > lp[best])) best = v;
    h.tokens.push_back(best);
    h.log_prob += lp[best];
    h.finished = best == token::eos || h.length() >= max_length;
  }
  return h;
}

/// Beam search returning the best finished hypothesis among those explored.
/// Every kept candidate occupies a beam slot; finished ones leave the beam.
inline Hypothesis beam_search(const Seq2SeqModel& model, const Tensor& features, const BeamOptions& opts) {
  require(opts.width >= 1, ErrorKind::config, "beam width must be >= 1");
  const std::size_t max_length = opts.max_length == 0 ? model.config().max_target_tokens : opts.max_length;
  IncrementalDecoder dec(model, features);

  struct Live {
    Hypothesis hyp;
    DecoderCache cache;
  };
  struct Candidate {
    std::size_t parent;
    int token;
    double log_prob;
    double score;
  };

  std::vector<Live> alive{Live{Hypothesis{}, dec.start()}};
  std::vector<Hypothesis> finished;
  const Hypothesis* best_finished = nullptr;
  double best_finished_score = 0.0;

  while (!alive.empty()) {
    std::vector<Candidate> cands;
    for (std::size_t a = 0; a < alive.size(); ++a) {
      const auto lp = dec.step(alive[a].cache, alive[a].hyp.tokens.back());
      for (int v = 0; v < static_cast<int>(lp.size()); ++v) {
        if (!detail::generable(v)) continue;
        const double total = alive[a].hyp.log_prob + lp[v];
        const std::size_t len = alive[a].hyp.length() + 1;
        const double score = opts.length_normalize ? total / static_cast<double>(len) : total;
        cands.push_back({a, v, total, score});
      }
    }
    auto seq_less = [&](const Candidate& x, const Candidate& y) {
      const auto& tx = alive[x.parent].hyp.tokens;
      const auto& ty = alive[y.parent].hyp.tokens;
      const std::size_t n = std::min(tx.size(), ty.size());
      for (std::size_t i = 0; i < n; ++i)
        if (tx[i] != ty[i]) return tx[i] < ty[i];
      if (tx.size() != ty.size()) return tx.size() < ty.size();
      return x.token < y.token;
    };
    const std::size_t keep = std::min(opts.width, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [&](const Candidate& x, const Candidate& y) {
                        if (x.score != y.score) return x.score > y.score;
                        return seq_less(x, y);
                      });
    std::vector<Live> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const Candidate& cd = cands[i];
      Hypothesis h = alive[cd.parent].hyp;
      h.tokens.push_back(cd.token);
      h.log_prob = cd.log_prob;
      h.finished = cd.token == token::eos || h.length() >= max_length;
      if (h.finished) {
        finished.push_back(std::move(h));
      } else {
        next.push_back(Live{std::move(h), alive[cd.parent].cache});
      }
    }
    best_finished = nullptr;
    for (const Hypothesis& h : finished) {
      const double s = detail::beam_score(h, opts.length_normalize);
      if (best_finished == nullptr || detail::better(s, h.tokens, best_finished_score, best_finished->tokens)) {
        best_finished = &h;
        best_finished_score = s;
      }
    }
    // Without length normalization scores only decrease, so live hypotheses
    // scoring strictly below the best finished one can never overtake it.
    if (best_finished != nullptr && !opts.length_normalize) {
      std::erase_if(next, [&](const Live& l) { return l.hyp.log_prob < best_finished_score; });
    }
    alive = std::move(next);
  }
  require(best_finished != nullptr, ErrorKind::numeric, "beam search produced no hypothesis");
  return *best_finished;
}

}  // namespace cilslu
