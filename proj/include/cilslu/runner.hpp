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

// Experiment orchestration: configuration, the continual training loop,
// resumable run state, sweeps and reports.

#pragma once

#include <cilslu/checkpoint.hpp>
#include <cilslu/cil.hpp>
#include <cilslu/data.hpp>
#include <cilslu/distill.hpp>
#include <cilslu/error.hpp>
#include <cilslu/hash.hpp>
#include <cilslu/metrics.hpp>
#include <cilslu/model.hpp>
#include <cilslu/optim.hpp>

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace cilslu {

namespace fs = std::filesystem;

enum class Method { offline, fine_tuning, rehearsal, rehearsal_kd };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::offline: return "offline";
    case Method::fine_tuning: return "fine_tuning";
    case Method::rehearsal: return "rehearsal";
    case Method::rehearsal_kd: return "rehearsal_kd";
  }
  return "offline";
}

inline Method parse_method(std::string_view s) {
  if (s == "offline") return Method::offline;
  if (s == "fine_tuning" || s == "fine-tuning" || s == "finetuning") return Method::fine_tuning;
  if (s == "rehearsal") return Method::rehearsal;
  if (s == "rehearsal_kd" || s == "rehearsal+kd") return Method::rehearsal_kd;
  fail(ErrorKind::config, "unknown method '" + std::string(s) + "'");
}

inline bool uses_rehearsal(Method m) { return m == Method::rehearsal || m == Method::rehearsal_kd; }

struct ExperimentConfig {
  std::string name = "run";
  CorpusSpec corpus = default_corpus_spec();
  std::string corpus_dir;  // pre-generated corpus, relative to the output root; overrides `corpus`
  std::size_t tasks = 3;
  Method method = Method::fine_tuning;
  Strategy strategy = Strategy::random;
  double budget = 0.01;
  KdConfig kd{false, false, false, 4};
  ModelConfig model = ModelConfig::desk(0);  // vocab_size comes from the corpus
  std::vector<std::size_t> epochs;           // empty → defaults for the task count
  std::size_t batch_size = 16;
  std::size_t rehearsal_per_batch = 0;  // 0 → rehearsal mixed uniformly into the pool
  AdamWConfig optimizer{2e-3, 0.01, 0.9, 0.999, 1e-8};
  double clip_norm = 1.0;
  std::size_t beam_width = 4;
  Reduction reduction = Reduction::mean;
  bool full_sequence_wer = false;
  bool select_best = true;  // continue from (and distill from) the best validation epoch
  std::uint64_t seed = 1;
  std::string output;  // run directory relative to the output root

  std::size_t task_count() const { return method == Method::offline ? 1 : tasks; }

  std::vector<std::size_t> epoch_schedule() const {
    if (!epochs.empty()) return epochs;
    if (method == Method::offline) return {10};
    std::vector<std::size_t> e;
    for (std::size_t t = 0; t < tasks; ++t) e.push_back(t == 0 ? 8 : t == 1 ? 5 : 3);
    return e;
  }

  std::string run_dir() const {
    return output.empty() ? "runs/" + name + "-s" + std::to_string(seed) : output;
  }

  void validate() const {
    require(!name.empty(), ErrorKind::config, "config needs a name");
    require(tasks >= 1, ErrorKind::config, "task count must be >= 1");
    require(epoch_schedule().size() == task_count(), ErrorKind::config,
            "epoch list has " + std::to_string(epoch_schedule().size()) + " entries for " +
                std::to_string(task_count()) + " tasks");
    for (auto e : epoch_schedule()) require(e >= 1, ErrorKind::config, "every task needs at least one epoch");
    require(batch_size >= 1, ErrorKind::config, "batch size must be >= 1");
    require(rehearsal_per_batch < batch_size, ErrorKind::config, "rehearsal_per_batch must be below the batch size");
    require(!kd.any() || method == Method::rehearsal_kd, ErrorKind::config,
            "knowledge distillation requires the rehearsal_kd method");
    require(method != Method::rehearsal_kd || kd.any(), ErrorKind::config, "rehearsal_kd needs at least one KD loss");
    if (uses_rehearsal(method)) buffer_capacity(budget, 1);
    require(beam_width >= 1 && (!kd.seq || kd.beam_width >= 1), ErrorKind::config, "beam width must be >= 1");
    require(optimizer.learning_rate > 0.0, ErrorKind::config, "learning rate must be positive");
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["name"] = c.name;
  if (c.corpus_dir.empty()) j["corpus"] = to_json(c.corpus);
  else j["corpus_dir"] = c.corpus_dir;
  j["tasks"] = c.tasks;
  j["method"] = to_string(c.method);
  j["strategy"] = to_string(c.strategy);
  j["budget"] = c.budget;
  nlohmann::json kd = nlohmann::json::array();
  if (c.kd.audio) kd.push_back("audio");
  if (c.kd.token) kd.push_back("token");
  if (c.kd.seq) kd.push_back("seq");
  j["kd"] = kd;
  j["kd_weights"] = {{"audio", c.kd.audio_weight}, {"token", c.kd.token_weight}, {"seq", c.kd.seq_weight}};
  j["soft_beam_width"] = c.kd.beam_width;
  auto model = to_json(c.model);
  model.erase("vocab_size");
  j["model"] = model;
  j["epochs"] = c.epoch_schedule();
  j["batch_size"] = c.batch_size;
  j["rehearsal_per_batch"] = c.rehearsal_per_batch;
  j["learning_rate"] = c.optimizer.learning_rate;
  j["weight_decay"] = c.optimizer.weight_decay;
  j["beta1"] = c.optimizer.beta1;
  j["beta2"] = c.optimizer.beta2;
  j["adam_epsilon"] = c.optimizer.epsilon;
  j["clip_norm"] = c.clip_norm;
  j["beam_width"] = c.beam_width;
  j["reduction"] = c.reduction == Reduction::mean ? "mean" : "sum";
  j["full_sequence_wer"] = c.full_sequence_wer;
  j["select_best"] = c.select_best;
  j["seed"] = c.seed;
  j["output"] = c.run_dir();
  return j;
}

/// Builds a config from JSON. A "preset" of "desk" (default) or "paper" sets
/// the baseline that the remaining keys override.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  try {
    ExperimentConfig c;
    const std::string preset = j.value("preset", "desk");
    c.tasks = j.value("tasks", c.tasks);
    if (preset == "paper") {
      c.model = ModelConfig::paper_scale(0);
      c.optimizer.learning_rate = 5e-5;
      c.optimizer.weight_decay = 0.1;
      c.batch_size = 32;
      c.beam_width = 20;
      c.kd.beam_width = 20;
      c.epochs = {40, 25};
      c.epochs.resize(std::max<std::size_t>(c.tasks, 2), 15);
      c.epochs.resize(c.tasks);
    } else {
      require(preset == "desk", ErrorKind::config, "unknown preset '" + preset + "'");
    }
    c.name = j.value("name", c.name);
    if (j.contains("corpus")) c.corpus = corpus_spec_from_json(j.at("corpus"));
    c.corpus_dir = j.value("corpus_dir", c.corpus_dir);
    c.method = parse_method(j.value("method", std::string(to_string(c.method))));
    if (c.method == Method::offline && preset == "paper" && !j.contains("epochs")) c.epochs = {40};
    c.strategy = parse_strategy(j.value("strategy", std::string(to_string(c.strategy))));
    c.budget = j.value("budget", c.budget);
    if (j.contains("kd")) {
      for (const auto& k : j.at("kd")) {
        const auto s = k.get<std::string>();
        if (s == "audio") c.kd.audio = true;
        else if (s == "token" || s == "tok") c.kd.token = true;
        else if (s == "seq") c.kd.seq = true;
        else fail(ErrorKind::config, "unknown KD kind '" + s + "'");
      }
    }
    if (j.contains("kd_weights")) {
      const auto& w = j.at("kd_weights");
      c.kd.audio_weight = w.value("audio", c.kd.audio_weight);
      c.kd.token_weight = w.value("token", c.kd.token_weight);
      c.kd.seq_weight = w.value("seq", c.kd.seq_weight);
    }
    c.kd.beam_width = j.value("soft_beam_width", c.kd.beam_width);
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"), c.model);
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<std::vector<std::size_t>>();
    c.batch_size = j.value("batch_size", c.batch_size);
    c.rehearsal_per_batch = j.value("rehearsal_per_batch", c.rehearsal_per_batch);
    c.optimizer.learning_rate = j.value("learning_rate", c.optimizer.learning_rate);
    c.optimizer.weight_decay = j.value("weight_decay", c.optimizer.weight_decay);
    c.optimizer.beta1 = j.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = j.value("beta2", c.optimizer.beta2);
    c.optimizer.epsilon = j.value("adam_epsilon", c.optimizer.epsilon);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.beam_width = j.value("beam_width", c.beam_width);
    const std::string red = j.value("reduction", "mean");
    require(red == "mean" || red == "sum", ErrorKind::config, "reduction must be mean or sum");
    c.reduction = red == "mean" ? Reduction::mean : Reduction::sum;
    c.full_sequence_wer = j.value("full_sequence_wer", c.full_sequence_wer);
    c.select_best = j.value("select_best", c.select_best);
    c.seed = j.value("seed", c.seed);
    c.output = j.value("output", c.output);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("experiment config: ") + e.what());
  }
}

inline nlohmann::json read_json_file(const fs::path& path, ErrorKind kind = ErrorKind::config) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorKind::io, "cannot read " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    fail(kind, path.string() + ": " + e.what());
  }
}

inline ExperimentConfig load_config(const fs::path& path) { return config_from_json(read_json_file(path)); }

/// Hash of everything that determines the run's results (the output path excluded).
inline std::string config_hash(const ExperimentConfig& c) {
  auto j = to_json(c);
  j.erase("output");
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(j.dump());
  return os.str();
}

/// CILSLU_OUTPUT_ROOT, or the working directory.
inline fs::path output_root() {
  const char* env = std::getenv("CILSLU_OUTPUT_ROOT");
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::current_path();
}

inline fs::path resolve(const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : output_root() / path;
}

// ---------------------------------------------------------------------------
// Run state

struct RunState {
  std::size_t next_task = 0;
  std::string config_hash;
  Seq2SeqModel model;
  std::optional<TeacherSnapshot> teacher;
  RehearsalBuffer buffer;
  SoftTranscriptStore soft;
  std::mt19937_64 rng;
  MetricMatrices matrices;
  nlohmann::json task_reports = nlohmann::json::array();
};

inline std::uint64_t parameter_hash(const Seq2SeqModel& m) {
  std::uint64_t h = fnv1a("params");
  for (const auto& [name, t] : m.named_parameters())
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(t->data.data()), t->size() * sizeof(double)), h);
  return h;
}

/// `source` (corpus origin, beam width) is stored in the model checkpoint so
/// that it can be evaluated on its own.
inline void save_state(const fs::path& dir, const RunState& s, std::uint64_t vocab_hash,
                       nlohmann::json source = nlohmann::json::object()) {
  fs::create_directories(dir);
  source["next_task"] = s.next_task;
  source["config_hash"] = s.config_hash;
  save_model(dir / "model.ckpt", s.model, vocab_hash, source);
  if (s.teacher) save_model(dir / "teacher.ckpt", s.teacher->model, vocab_hash, {{"task", s.teacher->task}});
  save_soft_transcripts(s.soft, dir / "soft_transcripts.jsonl");
  std::ostringstream rng;
  rng << s.rng;
  nlohmann::json j{{"next_task", s.next_task},
                   {"config_hash", s.config_hash},
                   {"has_teacher", s.teacher.has_value()},
                   {"teacher_task", s.teacher ? s.teacher->task : -1},
                   {"soft_teacher_task", s.soft.teacher_task},
                   {"soft_beam_width", s.soft.beam_width},
                   {"buffer", to_json(s.buffer)},
                   {"rng", rng.str()},
                   {"accuracy", s.matrices.accuracy.to_json()},
                   {"wer", s.matrices.wer.to_json()},
                   {"slu_f1", s.matrices.slu_f1.to_json()},
                   {"task_reports", s.task_reports}};
  write_text(dir / "state.json.tmp", j.dump(1) + "\n");
  fs::rename(dir / "state.json.tmp", dir / "state.json");
}

inline RunState load_state(const fs::path& dir, std::uint64_t vocab_hash) {
  const auto j = read_json_file(dir / "state.json", ErrorKind::integrity);
  try {
    RunState s;
    s.next_task = j.at("next_task").get<std::size_t>();
    s.config_hash = j.at("config_hash").get<std::string>();
    s.model = load_model(dir / "model.ckpt", vocab_hash).model;
    if (j.at("has_teacher").get<bool>())
      s.teacher = TeacherSnapshot{load_model(dir / "teacher.ckpt", vocab_hash).model.frozen_copy(),
                                  j.at("teacher_task").get<int>()};
    s.soft = load_soft_transcripts(dir / "soft_transcripts.jsonl");
    s.soft.teacher_task = j.at("soft_teacher_task").get<int>();
    s.soft.beam_width = j.at("soft_beam_width").get<std::size_t>();
    s.buffer = buffer_from_json(j.at("buffer"));
    std::istringstream rng(j.at("rng").get<std::string>());
    rng >> s.rng;
    require(!rng.fail(), ErrorKind::integrity, "corrupt RNG state");
    s.matrices.accuracy = TaskMatrix::from_json(j.at("accuracy"));
    s.matrices.wer = TaskMatrix::from_json(j.at("wer"));
    s.matrices.slu_f1 = TaskMatrix::from_json(j.at("slu_f1"));
    s.task_reports = j.at("task_reports");
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::integrity, std::string("run state: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct BatchEvent {
  std::size_t task = 0, epoch = 0, step = 0;
  std::size_t b_all = 0, b_rehe = 0;
  double lambda = 0.0;
  double total = 0.0, ce = 0.0;
  std::optional<double> audio, token, seq;
  bool total_is_ce = false;  // total loss node is the CE node itself
};

struct TaskEvent {
  std::size_t task = 0;
  const Seq2SeqModel* model = nullptr;
  const TeacherSnapshot* teacher = nullptr;  // teacher used while training this task
};

struct RunOptions {
  bool resume = false;
  std::optional<std::size_t> stop_after_task;  // leave the run incomplete after this task
  std::function<void(const BatchEvent&)> on_batch;
  std::function<void(const TaskEvent&)> on_task_start, on_task_end;
  std::ostream* log = nullptr;
};

struct RunResult {
  fs::path dir;
  bool completed = false;
  bool already_complete = false;
  Summary summary;
  MetricMatrices matrices;
  nlohmann::json task_reports;
  std::string summary_line;
};

struct ExperimentData {
  Corpus corpus;
  Vocabulary vocab;
  TaskSchedule schedule;
  std::vector<std::vector<int>> targets;  // by utterance id
  ModelConfig model;
};

inline ExperimentData prepare_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  d.corpus = cfg.corpus_dir.empty() ? generate_corpus(cfg.corpus) : load_corpus(resolve(cfg.corpus_dir));
  d.vocab = Vocabulary::build(d.corpus);
  d.schedule = build_schedule(d.corpus, cfg.task_count());
  for (const auto& u : d.corpus.utterances) d.targets.push_back(d.vocab.encode_target(u));
  d.model = cfg.model;
  d.model.vocab_size = d.vocab.size();
  d.model.feature_dim = d.corpus.spec.feature_dim;
  d.model.validate();
  require(d.model.max_source_frames >= d.corpus.spec.max_frames, ErrorKind::config,
          "model max_source_frames below the corpus frame cap");
  for (const auto& t : d.targets)
    require(t.size() - 1 <= d.model.max_target_tokens, ErrorKind::config,
            "augmented transcript longer than max_target_tokens");
  return d;
}

struct Validation {
  double accuracy = 0.0;
  double loss = 0.0;
};

/// Intent accuracy of the first decoded token (argmax over generable tokens)
/// and mean token CE, both teacher-forced on the references.
inline Validation validate_model(const Seq2SeqModel& model, const ExperimentData& d,
                                 const std::vector<std::uint32_t>& ids) {
  Validation v;
  if (ids.empty()) return v;
  std::size_t ok = 0, tokens = 0;
  double loss = 0.0;
  for (auto id : ids) {
    const auto& tgt = d.targets[id];
    const std::vector<int> in(tgt.begin(), tgt.end() - 1);
    const Tensor logits = forward_teacher_forced(model, d.corpus.at(id).features, in);
    const std::size_t c = logits.cols();
    int best = -1;
    for (int k = 0; k < static_cast<int>(c); ++k)
      if (detail::generable(k) && (best < 0 || logits(0, static_cast<std::size_t>(k)) > logits(0, static_cast<std::size_t>(best))))
        best = k;
    ok += best == tgt[1] ? 1 : 0;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      loss += kernels::log_sum_exp(logits.data.data() + r * c, c) - logits(r, static_cast<std::size_t>(tgt[r + 1]));
      ++tokens;
    }
  }
  v.accuracy = static_cast<double>(ok) / static_cast<double>(ids.size());
  v.loss = loss / static_cast<double>(tokens);
  return v;
}

inline std::vector<EvalRecord> evaluate_ids(const Seq2SeqModel& model, const ExperimentData& d,
                                            const std::vector<std::uint32_t>& ids, std::size_t beam_width,
                                            bool full_sequence_wer) {
  BeamOptions opts;
  opts.width = beam_width;
  std::vector<EvalRecord> out;
  out.reserve(ids.size());
  for (auto id : ids) {
    const Utterance& u = d.corpus.at(id);
    const Hypothesis h = beam_search(model, u.features, opts);
    const Words words = d.vocab.words(h.tokens);
    out.push_back(make_record(u, words, d.schedule.task_of(u.scenario), full_sequence_wer));
  }
  return out;
}

inline std::vector<std::uint32_t> cumulative_ids(const TaskSchedule& s, std::size_t t, Split split) {
  std::vector<std::uint32_t> out;
  for (std::size_t k = 0; k <= t; ++k) out.insert(out.end(), s[k].ids(split).begin(), s[k].ids(split).end());
  std::sort(out.begin(), out.end());
  return out;
}

inline double parameter_delta(const Seq2SeqModel& a, const Seq2SeqModel& b) {
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  require(pa.size() == pb.size(), ErrorKind::dimension, "models differ in structure");
  double delta = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t k = 0; k < pa[i].second->size(); ++k)
      delta += std::abs(pa[i].second->data[k] - pb[i].second->data[k]);
  return delta;
}

/// Batches of one epoch: lists of (id, is_rehearsal).
inline std::vector<std::vector<std::pair<std::uint32_t, bool>>> make_batches(const ExperimentConfig& cfg,
                                                                             const std::vector<std::uint32_t>& fresh,
                                                                             const std::vector<std::uint32_t>& rehearsal,
                                                                             std::mt19937_64& rng) {
  std::vector<std::vector<std::pair<std::uint32_t, bool>>> batches;
  if (cfg.rehearsal_per_batch == 0 || rehearsal.empty()) {
    std::vector<std::pair<std::uint32_t, bool>> pool;
    for (auto id : fresh) pool.emplace_back(id, false);
    for (auto id : rehearsal) pool.emplace_back(id, true);
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t i = 0; i < pool.size(); i += cfg.batch_size)
      batches.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(i),
                           pool.begin() + static_cast<std::ptrdiff_t>(std::min(pool.size(), i + cfg.batch_size)));
    return batches;
  }
  std::vector<std::uint32_t> f = fresh, r = rehearsal;
  std::shuffle(f.begin(), f.end(), rng);
  std::shuffle(r.begin(), r.end(), rng);
  const std::size_t per_new = cfg.batch_size - cfg.rehearsal_per_batch;
  std::size_t ri = 0;
  for (std::size_t i = 0; i < f.size(); i += per_new) {
    std::vector<std::pair<std::uint32_t, bool>> b;
    for (std::size_t k = i; k < std::min(f.size(), i + per_new); ++k) b.emplace_back(f[k], false);
    for (std::size_t k = 0; k < cfg.rehearsal_per_batch; ++k, ++ri) b.emplace_back(r[ri % r.size()], true);
    batches.push_back(std::move(b));
  }
  return batches;
}

inline std::string summary_line(const ExperimentConfig& cfg, const Summary& s) {
  nlohmann::json j = to_json(s);
  j["name"] = cfg.name;
  j["method"] = to_string(cfg.method);
  j["seed"] = cfg.seed;
  j["config_hash"] = config_hash(cfg);
  j["tasks"] = cfg.task_count();
  return j.dump();
}

inline void emit_artifacts(const fs::path& dir, const ExperimentConfig& cfg, const RunState& st, RunResult& res) {
  write_matrices(st.matrices, dir);
  std::string reports;
  for (const auto& r : st.task_reports) reports += r.dump() + "\n";
  write_text(dir / "tasks.jsonl", reports);
  res.matrices = st.matrices;
  res.task_reports = st.task_reports;
  if (st.next_task == cfg.task_count()) {
    res.summary = aggregate(st.matrices);
    res.summary_line = summary_line(cfg, res.summary);
    write_text(dir / "summary.json", res.summary_line + "\n");
    res.completed = true;
  }
}

inline nlohmann::json checkpoint_source(const ExperimentConfig& cfg) {
  nlohmann::json j{{"beam_width", cfg.beam_width},
                   {"full_sequence_wer", cfg.full_sequence_wer},
                   {"tasks", cfg.task_count()}};
  if (cfg.corpus_dir.empty()) j["corpus"] = to_json(cfg.corpus);
  else j["corpus_dir"] = cfg.corpus_dir;
  return j;
}

inline RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  auto log = [&](const std::string& msg) {
    if (opt.log == nullptr) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    *opt.log << "[" << cfg.name << " s" << cfg.seed << " " << std::fixed << std::setprecision(1) << secs << "s] "
             << msg << std::endl;
  };
  const ExperimentData d = prepare_data(cfg);
  const std::size_t T = cfg.task_count();
  const auto epochs = cfg.epoch_schedule();
  const std::string hash = config_hash(cfg);
  const std::uint64_t vhash = d.vocab.hash();

  RunResult res;
  res.dir = resolve(cfg.run_dir());
  const fs::path state_dir = res.dir / "state";
  fs::create_directories(res.dir);

  RunState st;
  if (opt.resume && fs::exists(state_dir / "state.json")) {
    st = load_state(state_dir, vhash);
    require(st.config_hash == hash, ErrorKind::config,
            "refusing to resume: configuration changed since the run started (hash " + st.config_hash + " vs " + hash +
                ")");
    if (st.next_task >= T) {
      log("run already complete; nothing to do");
      emit_artifacts(res.dir, cfg, st, res);
      res.already_complete = true;
      return res;
    }
    log("resuming at task " + std::to_string(st.next_task));
  } else {
    st.config_hash = hash;
    st.model = Seq2SeqModel(d.model, mix_seed(cfg.seed, 1));
    st.rng.seed(mix_seed(cfg.seed, 2));
    st.buffer.budget = cfg.budget;
    st.buffer.strategy = cfg.strategy;
    st.buffer.total_train = d.corpus.train.size();
    st.matrices = MetricMatrices(T);
    if (fs::exists(state_dir)) fs::remove_all(state_dir);
    fs::remove(res.dir / "summary.json");
  }
  write_text(res.dir / "config.json", to_json(cfg).dump(2) + "\n");

  const bool rehearse = uses_rehearsal(cfg.method);
  const KdConfig kd = cfg.method == Method::rehearsal_kd ? cfg.kd : KdConfig{};

  for (std::size_t t = st.next_task; t < T; ++t) {
    const Task& task = d.schedule[t];
    const std::vector<std::uint32_t> rehearsal = rehearse ? st.buffer.ids() : std::vector<std::uint32_t>{};
    const TeacherSnapshot* teacher = kd.any() && st.teacher ? &*st.teacher : nullptr;
    const std::optional<Seq2SeqModel> teacher_before =
        teacher ? std::optional<Seq2SeqModel>(teacher->model) : std::nullopt;
    if (kd.seq && teacher && !rehearsal.empty())
      for (auto id : rehearsal) st.soft.at(id);  // every exemplar has a soft transcript
    if (opt.on_task_start) opt.on_task_start(TaskEvent{t, &st.model, teacher});

    const auto valid_ids = cumulative_ids(d.schedule, t, Split::valid);
    auto params = st.model.parameters();
    OptimizerState optim = make_optimizer_state(params, cfg.optimizer);
    std::optional<Seq2SeqModel> best;
    Validation best_val{-1.0, 0.0};
    std::size_t best_epoch = 0, steps = 0, pure_batches = 0, pure_exact = 0, kd_batches = 0;
    for (std::size_t e = 0; e < epochs[t]; ++e) {
      const auto batches = make_batches(cfg, task.train, rehearsal, st.rng);
      double loss_sum = 0.0;
      for (const auto& b : batches) {
        std::vector<TrainSample> samples;
        samples.reserve(b.size());
        for (const auto& [id, is_rehe] : b)
          samples.push_back(TrainSample{id, &d.corpus.at(id).features, d.targets[id], is_rehe});
        st.model.zero_grad();
        Tape tape;
        BoundModel bound(tape, st.model);
        const LossTerms terms = batch_losses(bound, teacher, kd.seq ? &st.soft : nullptr, samples, kd,
                                             cfg.reduction, &st.rng);
        tape.backward(terms.total);
        clip_grad_norm(params, cfg.clip_norm);
        adamw_step(params, optim);
        ++steps;
        loss_sum += terms.total.item();
        BatchEvent ev;
        ev.task = t;
        ev.epoch = e;
        ev.step = steps;
        ev.b_all = samples.size();
        ev.b_rehe = terms.rehearsal;
        ev.lambda = terms.lambda;
        ev.total = terms.total.item();
        ev.ce = terms.ce.item();
        if (terms.audio) ev.audio = terms.audio->item();
        if (terms.token) ev.token = terms.token->item();
        if (terms.seq) ev.seq = terms.seq->item();
        ev.total_is_ce = terms.total.id() == terms.ce.id();
        if (terms.rehearsal == 0) {
          ++pure_batches;
          pure_exact += ev.total_is_ce ? 1 : 0;
        }
        kd_batches += terms.kd_evaluations > 0 ? 1 : 0;
        if (opt.on_batch) opt.on_batch(ev);
      }
      st.model.zero_grad();
      const Validation v = validate_model(st.model, d, valid_ids);
      const bool improved = v.accuracy > best_val.accuracy || (v.accuracy == best_val.accuracy && v.loss < best_val.loss);
      if (improved) {
        best_val = v;
        best_epoch = e;
        if (cfg.select_best) best = st.model;
      }
      std::ostringstream msg;
      msg << "task " << t << " epoch " << e << " loss " << std::setprecision(4)
          << loss_sum / static_cast<double>(std::max<std::size_t>(batches.size(), 1)) << " val_acc " << v.accuracy
          << " val_ce " << v.loss;
      log(msg.str());
    }
    if (cfg.select_best && best) st.model = std::move(*best);
    const double teacher_delta = teacher ? parameter_delta(teacher->model, *teacher_before) : 0.0;
    if (opt.on_task_end) opt.on_task_end(TaskEvent{t, &st.model, teacher});

    nlohmann::json report{{"task", t},
                          {"scenarios", task.scenarios},
                          {"train_new", task.train.size()},
                          {"train_rehearsal", rehearsal.size()},
                          {"epochs", epochs[t]},
                          {"steps", steps},
                          {"best_epoch", best_epoch},
                          {"best_val_acc", best_val.accuracy},
                          {"pure_batches", pure_batches},
                          {"pure_batches_exact_ce", pure_exact},
                          {"kd_batches", kd_batches},
                          {"teacher_task", teacher ? teacher->task : -1},
                          {"teacher_hash", teacher ? parameter_hash(teacher->model) : 0},
                          {"teacher_delta", teacher_delta}};

    st.teacher = TeacherSnapshot{st.model.frozen_copy(), static_cast<int>(t)};
    report["model_hash"] = parameter_hash(st.model);
    if (rehearse) {
      auto embed = [&](std::uint32_t id) { return encode_pooled(st.model, d.corpus.at(id).features); };
      update_buffer(st.buffer, d.corpus, task, embed, st.rng);
      report["buffer_size"] = st.buffer.size();
      if (kd.seq && t + 1 < T) {
        const auto ids = st.buffer.ids();
        st.soft = generate_soft_transcripts(*st.teacher, d.corpus, ids, kd.beam_width);
        report["soft_transcripts"] = st.soft.entries.size();
        report["soft_truncated"] = st.soft.truncated_count();
      }
    }

    const auto test_ids = cumulative_ids(d.schedule, t, Split::test);
    const auto records = evaluate_ids(st.model, d, test_ids, cfg.beam_width, cfg.full_sequence_wer);
    st.matrices.fill_row(t, records);
    report["eval_size"] = records.size();
    report["accuracy"] = *st.matrices.accuracy.get(t, t);
    report["wer"] = *st.matrices.wer.get(t, t);
    report["slu_f1"] = *st.matrices.slu_f1.get(t, t);
    st.task_reports.push_back(report);
    st.next_task = t + 1;
    save_state(state_dir, st, vhash, checkpoint_source(cfg));
    emit_artifacts(res.dir, cfg, st, res);
    {
      std::ostringstream msg;
      msg << "task " << t << " done: acc " << std::setprecision(4) << *st.matrices.accuracy.get(t, t) << " wer "
          << *st.matrices.wer.get(t, t) << " f1 " << *st.matrices.slu_f1.get(t, t);
      log(msg.str());
    }
    if (opt.stop_after_task && *opt.stop_after_task == t && t + 1 < T) return res;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Standalone evaluation

struct EvalOptions {
  std::string corpus_dir;  // overrides the corpus recorded in the checkpoint
  std::size_t beam_width = 0;  // 0 → the width recorded in the checkpoint
};

/// Beam-decodes every utterance of one split with a saved model and scores it.
inline nlohmann::json evaluate_checkpoint(const fs::path& checkpoint, Split split, const EvalOptions& opt = {}) {
  LoadedModel loaded = load_model(checkpoint);
  const auto& meta = loaded.metadata;
  ExperimentData d;
  try {
    if (!opt.corpus_dir.empty()) d.corpus = load_corpus(resolve(opt.corpus_dir));
    else if (meta.contains("corpus_dir")) d.corpus = load_corpus(resolve(meta.at("corpus_dir").get<std::string>()));
    else if (meta.contains("corpus")) d.corpus = generate_corpus(corpus_spec_from_json(meta.at("corpus")));
    else fail(ErrorKind::usage, "checkpoint does not record its corpus; pass one explicitly");
    d.vocab = Vocabulary::build(d.corpus);
    require(d.vocab.hash() == loaded.vocab_hash, ErrorKind::integrity,
            "corpus vocabulary does not match the checkpoint");
    d.schedule = build_schedule(d.corpus, meta.value("tasks", std::size_t{1}));
    const std::size_t beam = opt.beam_width > 0 ? opt.beam_width : meta.value("beam_width", std::size_t{4});
    const auto ids = d.corpus.ids(split);
    const auto records = evaluate_ids(loaded.model, d, ids, beam, meta.value("full_sequence_wer", false));
    return nlohmann::json{{"checkpoint", checkpoint.string()},
                          {"split", to_string(split)},
                          {"utterances", records.size()},
                          {"beam_width", beam},
                          {"accuracy", intent_accuracy(records)},
                          {"wer", corpus_wer(records)},
                          {"slu_f1", slu_f1(records)}};
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::integrity, checkpoint.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Sweeps and reports

struct MethodRow {
  std::string name;
  std::vector<Summary> runs;
};

inline std::pair<double, std::optional<double>> mean_std(const std::vector<double>& v) {
  const double m = average(v);
  if (v.size() < 2) return {m, std::nullopt};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

/// One row per method name: mean and sample standard deviation of each metric.
inline std::string comparison_table(const std::vector<MethodRow>& rows) {
  std::ostringstream os;
  os << "name,runs";
  for (const char* m : {"avg_acc", "last_acc", "avg_wer", "final_wer", "avg_slu_f1"}) os << "," << m << "_mean," << m << "_std";
  os << "\n" << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    os << r.name << "," << r.runs.size();
    const std::vector<double Summary::*> fields{&Summary::avg_acc, &Summary::last_acc, &Summary::avg_wer,
                                                &Summary::final_wer, &Summary::avg_slu_f1};
    for (auto f : fields) {
      std::vector<double> v;
      for (const auto& s : r.runs) v.push_back(s.*f);
      const auto [m, sd] = mean_std(v);
      os << "," << m << ",";
      if (sd) os << *sd;
    }
    os << "\n";
  }
  return os.str();
}

inline Summary summary_from_json(const nlohmann::json& j) {
  return Summary{j.at("avg_acc").get<double>(),   j.at("last_acc").get<double>(),   j.at("avg_wer").get<double>(),
                 j.at("final_wer").get<double>(), j.at("avg_slu_f1").get<double>(), j.at("final_slu_f1").get<double>()};
}

inline void add_to_rows(std::vector<MethodRow>& rows, const std::string& name, const Summary& s) {
  auto it = std::find_if(rows.begin(), rows.end(), [&](const MethodRow& r) { return r.name == name; });
  if (it == rows.end()) rows.push_back(MethodRow{name, {s}});
  else it->runs.push_back(s);
}

/// Comparison table from completed run directories (their summary.json files).
inline std::string report(const std::vector<fs::path>& run_dirs) {
  require(!run_dirs.empty(), ErrorKind::usage, "report needs at least one run directory");
  std::vector<MethodRow> rows;
  for (const auto& dir : run_dirs) {
    const auto j = read_json_file(dir / "summary.json", ErrorKind::integrity);
    try {
      add_to_rows(rows, j.at("name").get<std::string>(), summary_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::integrity, (dir / "summary.json").string() + ": " + e.what());
    }
  }
  return comparison_table(rows);
}

/// Expands a config file into one config per seed ("seeds": [..] or "seed").
inline std::vector<ExperimentConfig> expand_seeds(const nlohmann::json& j) {
  std::vector<ExperimentConfig> out;
  if (j.contains("seeds")) {
    for (const auto& s : j.at("seeds")) {
      nlohmann::json copy = j;
      copy.erase("seeds");
      copy["seed"] = s;
      out.push_back(config_from_json(copy));
    }
  } else {
    out.push_back(config_from_json(j));
  }
  return out;
}

struct SweepResult {
  std::string table;
  std::vector<RunResult> runs;
};

/// Runs every *.json config in `dir` (sorted by file name), each for all of its
/// seeds. Completed runs with an unchanged config are reused.
inline SweepResult sweep(const fs::path& dir, const RunOptions& opt = {}) {
  require(fs::is_directory(dir), ErrorKind::usage, dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  require(!files.empty(), ErrorKind::usage, "no *.json configs in " + dir.string());
  std::vector<ExperimentConfig> configs;
  for (const auto& f : files)
    for (auto& c : expand_seeds(read_json_file(f))) configs.push_back(std::move(c));
  for (const auto& c : configs) {
    require(to_json(c.corpus) == to_json(configs[0].corpus) && c.corpus_dir == configs[0].corpus_dir,
            ErrorKind::usage, "sweep configs must share the corpus (" + c.name + " differs)");
    require(c.method == Method::offline || configs[0].method == Method::offline || c.tasks == configs[0].tasks,
            ErrorKind::usage, "sweep configs must share the task schedule (" + c.name + " differs)");
  }
  SweepResult out;
  std::vector<MethodRow> rows;
  for (const auto& c : configs) {
    RunOptions o = opt;
    o.resume = true;
    out.runs.push_back(run_experiment(c, o));
    add_to_rows(rows, c.name, out.runs.back().summary);
  }
  out.table = comparison_table(rows);
  return out;
}

}  // namespace cilslu
