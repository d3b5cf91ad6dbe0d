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

// Training losses: cross-entropy, audio/token/sequence knowledge distillation,
// the rehearsal-fraction weight and their combination. Also the teacher's
// soft transcriptions used by sequence-level KD.

#pragma once

#include <cilslu/data.hpp>
#include <cilslu/error.hpp>
#include <cilslu/grad.hpp>
#include <cilslu/model.hpp>

#include "json.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace cilslu {

enum class Reduction { mean, sum };

struct KdConfig {
  bool audio = false;
  bool token = false;
  bool seq = false;
  std::size_t beam_width = 20;  // soft transcripts
  double audio_weight = 1.0;
  double token_weight = 1.0;
  double seq_weight = 1.0;

  bool any() const { return audio || token || seq; }

  std::string label() const {
    std::string s;
    auto add = [&](bool on, const char* name) {
      if (!on) return;
      if (!s.empty()) s += "+";
      s += name;
    };
    add(audio, "audio");
    add(token, "token");
    add(seq, "seq");
    return s.empty() ? "none" : s;
  }
};

/// Frozen copy of the model from the end of the previous task.
struct TeacherSnapshot {
  Seq2SeqModel model;
  int task = -1;
};

struct BatchComposition {
  std::size_t all = 1;
  std::size_t rehe = 0;
};

/// √(b_rehe / b_all)
inline double lambda_kd(const BatchComposition& c) {
  require(c.all >= 1 && c.rehe <= c.all, ErrorKind::usage, "batch composition needs 0 <= b_rehe <= b_all, b_all >= 1");
  return std::sqrt(static_cast<double>(c.rehe) / static_cast<double>(c.all));
}

struct KdValues {
  std::optional<double> audio, token, seq;
};

/// (1 − λ)·ce + λ·Σ_k w_k·L_k
inline double total_loss(double ce, const KdValues& kd, double lambda, const KdConfig& weights = {}) {
  double sum = 0.0;
  if (kd.audio) sum += weights.audio_weight * *kd.audio;
  if (kd.token) sum += weights.token_weight * *kd.token;
  if (kd.seq) sum += weights.seq_weight * *kd.seq;
  return (1.0 - lambda) * ce + lambda * sum;
}

// ---------------------------------------------------------------------------
// Soft transcriptions

struct SoftTranscript {
  std::vector<int> tokens;  // BOS … EOS
  bool truncated = false;
};

struct SoftTranscriptStore {
  std::map<std::uint32_t, SoftTranscript> entries;
  int teacher_task = -1;
  std::size_t beam_width = 0;

  const SoftTranscript& at(std::uint32_t id) const {
    const auto it = entries.find(id);
    require(it != entries.end(), ErrorKind::integrity,
            "no soft transcript for rehearsal exemplar " + std::to_string(id));
    return it->second;
  }
  std::size_t truncated_count() const {
    std::size_t n = 0;
    for (const auto& [id, e] : entries) n += e.truncated ? 1 : 0;
    return n;
  }
};

/// Teacher beam-search output for a hypothesis; runs that hit the length cap
/// without EOS get their last token replaced by EOS and are flagged.
inline SoftTranscript soft_transcript(const Hypothesis& h) {
  SoftTranscript s{h.tokens, false};
  if (s.tokens.back() != token::eos) {
    s.tokens.back() = token::eos;
    s.truncated = true;
  }
  return s;
}

inline SoftTranscriptStore generate_soft_transcripts(const TeacherSnapshot& teacher, const Corpus& corpus,
                                                     std::span<const std::uint32_t> ids, std::size_t beam_width) {
  SoftTranscriptStore store;
  store.teacher_task = teacher.task;
  store.beam_width = beam_width;
  BeamOptions opts;
  opts.width = beam_width;
  for (auto id : ids)
    store.entries[id] = soft_transcript(beam_search(teacher.model, corpus.at(id).features, opts));
  return store;
}

inline void save_soft_transcripts(const SoftTranscriptStore& store, const std::filesystem::path& path) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorKind::io, "cannot write " + path.string());
  for (const auto& [id, e] : store.entries) {
    nlohmann::json j{{"id", id},
                     {"tokens", e.tokens},
                     {"truncated", e.truncated},
                     {"teacher_task", store.teacher_task},
                     {"beam_width", store.beam_width}};
    os << j.dump() << "\n";
  }
}

inline SoftTranscriptStore load_soft_transcripts(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorKind::io, "cannot read " + path.string());
  SoftTranscriptStore store;
  std::string line;
  try {
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      store.teacher_task = j.at("teacher_task").get<int>();
      store.beam_width = j.at("beam_width").get<std::size_t>();
      store.entries[j.at("id").get<std::uint32_t>()] =
          SoftTranscript{j.at("tokens").get<std::vector<int>>(), j.at("truncated").get<bool>()};
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::integrity, path.string() + ": " + e.what());
  }
  return store;
}

// ---------------------------------------------------------------------------
// Losses

struct TrainSample {
  std::uint32_t id = 0;
  const Tensor* features = nullptr;
  std::vector<int> target;  // BOS … EOS
  bool rehearsal = false;
};

namespace detail {

inline std::span<const int> decoder_input(const std::vector<int>& target) {
  require(target.size() >= 2, ErrorKind::input, "target needs at least BOS and one token");
  return std::span<const int>(target).first(target.size() - 1);
}

inline std::span<const int> decoder_output(const std::vector<int>& target) {
  return std::span<const int>(target).subspan(1);
}

inline std::size_t counted_tokens(std::span<const int> out) {
  std::size_t n = 0;
  for (int t : out) n += t != token::pad ? 1 : 0;
  return n;
}

inline void accumulate(std::optional<Var>& acc, Var term) { acc = acc ? add(*acc, term) : term; }

inline Var reduce(Tape& tape, const std::optional<Var>& acc, std::size_t count, Reduction r) {
  if (!acc) return tape.constant(Tensor::scalar(0.0));
  if (r == Reduction::sum || count == 0) return *acc;
  return scale(*acc, 1.0 / static_cast<double>(count));
}

/// Teacher next-token distributions on the ground-truth prefix, [J × V].
inline Tensor teacher_probs(const Seq2SeqModel& teacher, const TrainSample& s) {
  Tensor logits = forward_teacher_forced(teacher, *s.features, decoder_input(s.target));
  const std::size_t c = logits.cols();
  for (std::size_t r = 0; r < logits.rows(); ++r) kernels::softmax_row(logits.data.data() + r * c, c);
  return logits;
}

inline std::vector<unsigned char> pad_mask(std::span<const int> out) {
  std::vector<unsigned char> m;
  for (int t : out) m.push_back(t != token::pad ? 1 : 0);
  return m;
}

}  // namespace detail

/// Token-level CE over every sample; PAD targets are skipped.
inline Var ce_loss(const BoundModel& student, std::span<const TrainSample> batch, Reduction r = Reduction::mean,
                   std::mt19937_64* rng = nullptr) {
  std::optional<Var> acc;
  std::size_t tokens = 0;
  for (const auto& s : batch) {
    const Var logits = student.forward_teacher_forced(*s.features, detail::decoder_input(s.target), rng);
    detail::accumulate(acc, nll_rows(logits, detail::decoder_output(s.target), token::pad));
    tokens += detail::counted_tokens(detail::decoder_output(s.target));
  }
  return detail::reduce(student.tape(), acc, tokens, r);
}

/// Σ over rehearsal samples of ‖pooled_teacher − pooled_student‖².
inline Var audio_kd_loss(const BoundModel& student, const TeacherSnapshot* teacher, std::span<const TrainSample> batch,
                         Reduction r = Reduction::mean, std::mt19937_64* rng = nullptr) {
  require(teacher != nullptr, ErrorKind::usage, "audio KD needs a teacher");
  std::optional<Var> acc;
  std::size_t n = 0;
  for (const auto& s : batch) {
    if (!s.rehearsal) continue;
    const Tensor target = encode_pooled(teacher->model, *s.features);
    detail::accumulate(acc, squared_distance(student.encode_pooled(*s.features, rng), target));
    ++n;
  }
  return detail::reduce(student.tape(), acc, n, r);
}

/// Cross-entropy of the student against the teacher's token distributions,
/// both conditioned on the ground-truth prefix; rehearsal samples only.
inline Var token_kd_loss(const BoundModel& student, const TeacherSnapshot* teacher, std::span<const TrainSample> batch,
                         Reduction r = Reduction::mean, std::mt19937_64* rng = nullptr) {
  require(teacher != nullptr, ErrorKind::usage, "token KD needs a teacher");
  std::optional<Var> acc;
  std::size_t tokens = 0;
  for (const auto& s : batch) {
    if (!s.rehearsal) continue;
    const Var logits = student.forward_teacher_forced(*s.features, detail::decoder_input(s.target), rng);
    const auto out = detail::decoder_output(s.target);
    detail::accumulate(acc,
                       soft_cross_entropy_rows(logits, detail::teacher_probs(teacher->model, s), detail::pad_mask(out)));
    tokens += detail::counted_tokens(out);
  }
  return detail::reduce(student.tape(), acc, tokens, r);
}

/// CE of the student against the teacher's soft transcriptions; rehearsal samples only.
inline Var seq_kd_loss(const BoundModel& student, const SoftTranscriptStore& store, std::span<const TrainSample> batch,
                       Reduction r = Reduction::mean, std::mt19937_64* rng = nullptr) {
  std::optional<Var> acc;
  std::size_t tokens = 0;
  for (const auto& s : batch) {
    if (!s.rehearsal) continue;
    const auto& soft = store.at(s.id).tokens;
    const Var logits = student.forward_teacher_forced(*s.features, detail::decoder_input(soft), rng);
    detail::accumulate(acc, nll_rows(logits, detail::decoder_output(soft), token::pad));
    tokens += detail::counted_tokens(detail::decoder_output(soft));
  }
  return detail::reduce(student.tape(), acc, tokens, r);
}

struct LossTerms {
  Var total;
  Var ce;
  std::optional<Var> audio, token, seq;
  double lambda = 0.0;
  std::size_t rehearsal = 0;
  std::size_t kd_evaluations = 0;  // KD terms actually built
};

/// One training objective for a mini-batch. The student encoder runs once per
/// sample and its ground-truth decode is shared by CE and token KD. Batches
/// without rehearsal samples (or without KD) reduce to CE exactly.
inline LossTerms batch_losses(const BoundModel& student, const TeacherSnapshot* teacher,
                              const SoftTranscriptStore* store, std::span<const TrainSample> batch,
                              const KdConfig& kd, Reduction r = Reduction::mean, std::mt19937_64* rng = nullptr) {
  LossTerms out;
  for (const auto& s : batch) out.rehearsal += s.rehearsal ? 1 : 0;
  const bool use_kd = kd.any() && out.rehearsal > 0;
  if (use_kd) {
    require(teacher != nullptr, ErrorKind::usage, "knowledge distillation enabled without a teacher");
    require(!kd.seq || store != nullptr, ErrorKind::usage, "sequence KD enabled without soft transcripts");
  }
  Tape& tape = student.tape();
  std::optional<Var> ce, audio, tok, seq;
  std::size_t ce_tokens = 0, tok_tokens = 0, seq_tokens = 0;
  for (const auto& s : batch) {
    const Var memory = student.encode(*s.features, rng);
    const auto out_tokens = detail::decoder_output(s.target);
    const Var logits = student.decode(memory, detail::decoder_input(s.target), rng);
    detail::accumulate(ce, nll_rows(logits, out_tokens, token::pad));
    ce_tokens += detail::counted_tokens(out_tokens);
    if (!use_kd || !s.rehearsal) continue;
    if (kd.audio) {
      detail::accumulate(audio, squared_distance(mean(memory, 0), encode_pooled(teacher->model, *s.features)));
    }
    if (kd.token) {
      detail::accumulate(tok,
                         soft_cross_entropy_rows(logits, detail::teacher_probs(teacher->model, s),
                                                 detail::pad_mask(out_tokens)));
      tok_tokens += detail::counted_tokens(out_tokens);
    }
    if (kd.seq) {
      const auto& soft = store->at(s.id).tokens;
      const Var soft_logits = student.decode(memory, detail::decoder_input(soft), rng);
      detail::accumulate(seq, nll_rows(soft_logits, detail::decoder_output(soft), token::pad));
      seq_tokens += detail::counted_tokens(detail::decoder_output(soft));
    }
  }
  out.ce = detail::reduce(tape, ce, ce_tokens, r);
  if (!use_kd) {
    out.total = out.ce;
    return out;
  }
  out.lambda = lambda_kd({batch.size(), out.rehearsal});
  std::optional<Var> kd_sum;
  if (kd.audio) {
    out.audio = detail::reduce(tape, audio, out.rehearsal, r);
    detail::accumulate(kd_sum, scale(*out.audio, kd.audio_weight));
  }
  if (kd.token) {
    out.token = detail::reduce(tape, tok, tok_tokens, r);
    detail::accumulate(kd_sum, scale(*out.token, kd.token_weight));
  }
  if (kd.seq) {
    out.seq = detail::reduce(tape, seq, seq_tokens, r);
    detail::accumulate(kd_sum, scale(*out.seq, kd.seq_weight));
  }
  out.kd_evaluations = (kd.audio ? 1 : 0) + (kd.token ? 1 : 0) + (kd.seq ? 1 : 0);
  out.total = add(scale(out.ce, 1.0 - out.lambda), scale(*kd_sum, out.lambda));
  const double v = out.total.item();
  require(std::isfinite(v), ErrorKind::numeric, "non-finite training loss");
  return out;
}

}  // namespace cilslu
