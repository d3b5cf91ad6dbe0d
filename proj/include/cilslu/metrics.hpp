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

// Intent accuracy, WER, SLU F1 and their continual-learning aggregates.

#pragma once

#include <cilslu/data.hpp>
#include <cilslu/error.hpp>

#include "json.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace cilslu {

/// Levenshtein distance with unit costs.
template <class Seq>
std::size_t edit_distance(const Seq& a, const Seq& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double wer(std::span<const std::string> hyp, std::span<const std::string> ref) {
  require(!ref.empty(), ErrorKind::undefined, "WER undefined for an empty reference");
  return static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(ref.size());
}

struct EvalRecord {
  std::uint32_t id = 0;
  int task = 0;  // task that introduced the utterance's scenario
  ParsedTranscript predicted;
  std::string gold_intent;
  std::vector<Entity> gold_entities;
  std::size_t edits = 0;
  std::size_t ref_words = 0;

  bool intent_correct() const {
    return predicted.intent == gold_intent && !predicted.intent.empty() && !predicted.multi_token_intent;
  }
  double wer() const { return static_cast<double>(edits) / static_cast<double>(ref_words); }
};

/// Record for one decoded utterance. WER uses the transcript portion unless
/// `full_sequence_wer`, which compares whole augmented sequences.
inline EvalRecord make_record(const Utterance& gold, std::span<const std::string> predicted_tokens, int task = 0,
                              bool full_sequence_wer = false) {
  EvalRecord r;
  r.id = gold.id;
  r.task = task;
  r.predicted = decode_augmented(predicted_tokens);
  r.gold_intent = gold.intent();
  r.gold_entities = gold.entities;
  if (full_sequence_wer) {
    const Words ref = encode_augmented(gold);
    r.edits = edit_distance(predicted_tokens, std::span<const std::string>(ref));
    r.ref_words = ref.size();
  } else {
    r.edits = edit_distance(r.predicted.transcript, gold.transcript);
    r.ref_words = gold.transcript.size();
  }
  require(r.ref_words > 0, ErrorKind::undefined, "WER undefined for an empty reference");
  return r;
}

inline double intent_accuracy(std::span<const EvalRecord> records) {
  require(!records.empty(), ErrorKind::undefined, "intent accuracy of an empty record set");
  std::size_t ok = 0;
  for (const auto& r : records) ok += r.intent_correct() ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(records.size());
}

/// Corpus-level WER: total edits over total reference words.
inline double corpus_wer(std::span<const EvalRecord> records) {
  require(!records.empty(), ErrorKind::undefined, "WER of an empty record set");
  std::size_t edits = 0, words = 0;
  for (const auto& r : records) {
    edits += r.edits;
    words += r.ref_words;
  }
  return static_cast<double>(edits) / static_cast<double>(words);
}

struct F1Counts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

inline F1Counts entity_counts(const std::vector<Entity>& predicted, const std::vector<Entity>& gold) {
  std::map<Entity, std::size_t> unmatched;
  for (const auto& g : gold) ++unmatched[g];
  F1Counts c;
  for (const auto& p : predicted) {
    auto it = unmatched.find(p);
    if (it != unmatched.end() && it->second > 0) {
      --it->second;
      ++c.tp;
    } else {
      ++c.fp;
    }
  }
  c.fn = gold.size() - c.tp;
  return c;
}

inline double f1_from_counts(const F1Counts& c) {
  if (c.tp + c.fp + c.fn == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
}

/// Micro F1 over exact (type, value) pairs with multiset matching per utterance.
inline double slu_f1(std::span<const EvalRecord> records) {
  require(!records.empty(), ErrorKind::undefined, "SLU F1 of an empty record set");
  F1Counts total;
  for (const auto& r : records) {
    const auto c = entity_counts(r.predicted.entities, r.gold_entities);
    total.tp += c.tp;
    total.fp += c.fp;
    total.fn += c.fn;
  }
  return f1_from_counts(total);
}

// ---------------------------------------------------------------------------
// Task matrices

/// M[t][s]: value on the cumulative test set of tasks 0..s after training task t.
class TaskMatrix {
 public:
  TaskMatrix() = default;
  explicit TaskMatrix(std::size_t tasks) : cells_(tasks, std::vector<std::optional<double>>(tasks)) {}

  std::size_t tasks() const { return cells_.size(); }

  void set(std::size_t t, std::size_t s, double v) {
    require(t < tasks() && s <= t, ErrorKind::usage, "task matrix entry outside the lower triangle");
    cells_[t][s] = v;
  }
  std::optional<double> get(std::size_t t, std::size_t s) const {
    require(t < tasks() && s < tasks(), ErrorKind::usage, "task matrix index out of range");
    return cells_[t][s];
  }
  bool row_complete(std::size_t t) const {
    for (std::size_t s = 0; s <= t; ++s)
      if (!cells_[t][s]) return false;
    return true;
  }
  std::size_t completed_rows() const {
    std::size_t n = 0;
    while (n < tasks() && row_complete(n)) ++n;
    return n;
  }

  /// v_t = M[t][t]
  std::vector<double> diagonal() const {
    std::vector<double> out;
    for (std::size_t t = 0; t < tasks(); ++t) {
      require(cells_[t][t].has_value(), ErrorKind::usage, "task matrix incomplete at task " + std::to_string(t));
      out.push_back(*cells_[t][t]);
    }
    return out;
  }

  std::string to_csv(int precision = 6) const {
    std::ostringstream os;
    os << "trained_task";
    for (std::size_t s = 0; s < tasks(); ++s) os << ",eval_upto_" << s;
    os << "\n" << std::setprecision(precision) << std::fixed;
    for (std::size_t t = 0; t < tasks(); ++t) {
      os << t;
      for (std::size_t s = 0; s < tasks(); ++s) {
        os << ",";
        if (cells_[t][s]) os << *cells_[t][s];
      }
      os << "\n";
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& row : cells_) {
      nlohmann::json r = nlohmann::json::array();
      for (const auto& c : row) r.push_back(c ? nlohmann::json(*c) : nlohmann::json(nullptr));
      j.push_back(r);
    }
    return j;
  }

  static TaskMatrix from_json(const nlohmann::json& j) {
    TaskMatrix m(j.size());
    for (std::size_t t = 0; t < j.size(); ++t)
      for (std::size_t s = 0; s < j[t].size() && s < m.tasks(); ++s)
        if (!j[t][s].is_null()) m.cells_[t][s] = j[t][s].get<double>();
    return m;
  }

 private:
  std::vector<std::vector<std::optional<double>>> cells_;
};

struct MetricMatrices {
  TaskMatrix accuracy, wer, slu_f1;

  explicit MetricMatrices(std::size_t tasks = 0) : accuracy(tasks), wer(tasks), slu_f1(tasks) {}

  /// Fill row t from the records of every test utterance seen so far.
  void fill_row(std::size_t t, std::span<const EvalRecord> records) {
    for (std::size_t s = 0; s <= t; ++s) {
      std::vector<EvalRecord> upto;
      for (const auto& r : records)
        if (r.task >= 0 && static_cast<std::size_t>(r.task) <= s) upto.push_back(r);
      accuracy.set(t, s, intent_accuracy(upto));
      wer.set(t, s, corpus_wer(upto));
      slu_f1.set(t, s, cilslu::slu_f1(upto));
    }
  }
};

struct Summary {
  double avg_acc = 0, last_acc = 0, avg_wer = 0, final_wer = 0, avg_slu_f1 = 0, final_slu_f1 = 0;
};

inline double average(const std::vector<double>& v) {
  require(!v.empty(), ErrorKind::undefined, "average of nothing");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline Summary aggregate(const MetricMatrices& m) {
  const auto acc = m.accuracy.diagonal();
  const auto w = m.wer.diagonal();
  const auto f = m.slu_f1.diagonal();
  require(!acc.empty(), ErrorKind::usage, "no tasks to aggregate");
  return Summary{average(acc), acc.back(), average(w), w.back(), average(f), f.back()};
}

inline nlohmann::json to_json(const Summary& s) {
  return {{"avg_acc", s.avg_acc},       {"last_acc", s.last_acc},       {"avg_wer", s.avg_wer},
          {"final_wer", s.final_wer},   {"avg_slu_f1", s.avg_slu_f1},   {"final_slu_f1", s.final_slu_f1}};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorKind::io, "cannot write " + path.string());
  os << text;
  require(static_cast<bool>(os), ErrorKind::io, "write failed: " + path.string());
}

inline void write_matrices(const MetricMatrices& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "accuracy.csv", m.accuracy.to_csv());
  write_text(dir / "wer.csv", m.wer.to_csv());
  write_text(dir / "slu_f1.csv", m.slu_f1.to_csv());
}

}  // namespace cilslu
