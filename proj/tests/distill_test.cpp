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

#include <cilslu/distill.hpp>
#include <cilslu/optim.hpp>

#include <gtest/gtest.h>

#include "model_fixtures.hpp"

#include <cmath>
#include <filesystem>
#include <random>

namespace cilslu {
namespace {

using testing::model_gradient_error;
using testing::random_features;
using testing::sharpen_output;
using testing::tiny_config;

constexpr std::size_t kVocab = 7;

struct Fixture {
  Seq2SeqModel student{tiny_config(kVocab, 6), 21};
  TeacherSnapshot teacher{Seq2SeqModel(tiny_config(kVocab, 6), 22), 0};
  std::vector<Tensor> features;
  std::vector<TrainSample> batch;

  Fixture() {
    sharpen_output(student, 10.0);
    sharpen_output(teacher.model, 10.0);
    std::mt19937_64 rng(23);
    for (int i = 0; i < 3; ++i) features.push_back(random_features(3 + static_cast<std::size_t>(i), 4, rng));
    batch = {TrainSample{10, &features[0], {token::bos, 5, 6, 4, token::eos}, false},
             TrainSample{11, &features[1], {token::bos, 6, token::eos}, true},
             TrainSample{12, &features[2], {token::bos, 4, 5, 5, 6, token::eos}, true}};
  }
};

double value(const std::function<Var(const BoundModel&)>& f, const Seq2SeqModel& m) {
  Tape t(false);
  BoundModel b(t, m);
  return f(b).item();
}

/// Σ_rows −log softmax(logits)[target], computed directly from untaped logits.
double direct_nll(const Seq2SeqModel& m, const TrainSample& s, const std::vector<int>& target) {
  const std::vector<int> in(target.begin(), target.end() - 1);
  const Tensor logits = forward_teacher_forced(m, *s.features, in);
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (target[r + 1] == token::pad) continue;
    double z = 0.0;
    for (std::size_t v = 0; v < logits.cols(); ++v) z += std::exp(logits(r, v));
    total -= logits(r, static_cast<std::size_t>(target[r + 1])) - std::log(z);
  }
  return total;
}

std::vector<std::vector<double>> probs(const Seq2SeqModel& m, const TrainSample& s) {
  const std::vector<int> in(s.target.begin(), s.target.end() - 1);
  const Tensor logits = forward_teacher_forced(m, *s.features, in);
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::vector<double> p(logits.cols());
    double z = 0.0;
    for (std::size_t v = 0; v < p.size(); ++v) z += (p[v] = std::exp(logits(r, v)));
    for (double& x : p) x /= z;
    out.push_back(p);
  }
  return out;
}

TEST(Lambda, Examples) {
  EXPECT_EQ(lambda_kd({32, 0}), 0.0);
  EXPECT_EQ(lambda_kd({32, 32}), 1.0);
  EXPECT_DOUBLE_EQ(lambda_kd({32, 8}), 0.5);
  EXPECT_THROW(lambda_kd({4, 5}), Error);
  EXPECT_THROW(lambda_kd({0, 0}), Error);
}

TEST(TotalLoss, Arithmetic) {
  EXPECT_DOUBLE_EQ(total_loss(2.0, KdValues{1.0, std::nullopt, 3.0}, 0.5), 3.0);
  EXPECT_EQ(total_loss(2.5, KdValues{1.0, 4.0, 3.0}, 0.0), 2.5);
  EXPECT_EQ(total_loss(2.5, KdValues{std::nullopt, std::nullopt, 3.0}, 1.0), 3.0);
  KdConfig w;
  w.audio_weight = 2.0;
  EXPECT_DOUBLE_EQ(total_loss(2.0, KdValues{1.0, std::nullopt, 3.0}, 0.5, w), 3.5);
}

TEST(CeLoss, UniformOutputClosedForm) {
  Fixture fx;
  for (double& w : fx.student.params().output_w.data) w = 0.0;
  for (double& b : fx.student.params().output_b.data) b = 0.0;
  const std::span<const TrainSample> one(&fx.batch[0], 1);
  const double sum = value([&](const BoundModel& b) { return ce_loss(b, one, Reduction::sum); }, fx.student);
  EXPECT_NEAR(sum, 4.0 * std::log(7.0), 1e-9);
  const double mean = value([&](const BoundModel& b) { return ce_loss(b, one, Reduction::mean); }, fx.student);
  EXPECT_NEAR(mean, std::log(7.0), 1e-9);
}

TEST(CeLoss, CertainModelGivesZero) {
  Fixture fx;
  for (double& w : fx.student.params().output_w.data) w = 0.0;
  fx.student.params().output_b.data.assign(kVocab, 0.0);
  fx.student.params().output_b.data[token::eos] = 1000.0;
  const std::vector<TrainSample> b{TrainSample{0, &fx.features[0], {token::bos, token::eos}, false}};
  EXPECT_EQ(value([&](const BoundModel& m) { return ce_loss(m, b, Reduction::sum); }, fx.student), 0.0);
}

TEST(CeLoss, EmptyBatchIsZero) {
  Fixture fx;
  EXPECT_EQ(value([&](const BoundModel& m) { return ce_loss(m, {}); }, fx.student), 0.0);
}

TEST(CeLoss, MatchesDirectSummationAndSkipsPad) {
  Fixture fx;
  fx.batch[2].target = {token::bos, 4, token::pad, 5, 6, token::eos};
  double oracle = 0.0;
  std::size_t tokens = 0;
  for (const auto& s : fx.batch) {
    oracle += direct_nll(fx.student, s, s.target);
    for (std::size_t j = 1; j < s.target.size(); ++j) tokens += s.target[j] != token::pad;
  }
  EXPECT_NEAR(value([&](const BoundModel& m) { return ce_loss(m, fx.batch, Reduction::sum); }, fx.student), oracle,
              1e-10);
  EXPECT_NEAR(value([&](const BoundModel& m) { return ce_loss(m, fx.batch, Reduction::mean); }, fx.student),
              oracle / static_cast<double>(tokens), 1e-10);
}

TEST(CeLoss, GradientMatchesFiniteDifferences) {
  Fixture fx;
  const std::span<const TrainSample> two(fx.batch.data(), 2);
  EXPECT_LT(model_gradient_error(fx.student, [&](BoundModel& b) { return ce_loss(b, two, Reduction::sum); }), 1e-4);
}

TEST(AudioKd, IdenticalModelsGiveZero) {
  Fixture fx;
  const TeacherSnapshot same{fx.student.frozen_copy(), 0};
  EXPECT_NEAR(value([&](const BoundModel& b) { return audio_kd_loss(b, &same, fx.batch); }, fx.student), 0.0, 1e-12);
}

TEST(AudioKd, PooledOffsetContributesSquaredNorm) {
  Fixture fx;
  TeacherSnapshot shifted{fx.student.frozen_copy(), 0};
  shifted.model.params().encoder_norm.bias.data[0] += 3.0;
  shifted.model.params().encoder_norm.bias.data[1] += 4.0;
  const std::vector<TrainSample> one{fx.batch[1]};
  EXPECT_NEAR(value([&](const BoundModel& b) { return audio_kd_loss(b, &shifted, one, Reduction::sum); }, fx.student),
              25.0, 1e-9);
  // two rehearsal samples: sum doubles, mean stays
  EXPECT_NEAR(value([&](const BoundModel& b) { return audio_kd_loss(b, &shifted, fx.batch, Reduction::sum); },
                    fx.student),
              50.0, 1e-9);
  EXPECT_NEAR(value([&](const BoundModel& b) { return audio_kd_loss(b, &shifted, fx.batch); }, fx.student), 25.0,
              1e-9);
}

TEST(AudioKd, RequiresTeacherAndIgnoresNewData) {
  Fixture fx;
  EXPECT_THROW(value([&](const BoundModel& b) { return audio_kd_loss(b, nullptr, fx.batch); }, fx.student), Error);
  const std::vector<TrainSample> fresh{fx.batch[0]};
  EXPECT_EQ(value([&](const BoundModel& b) { return audio_kd_loss(b, &fx.teacher, fresh); }, fx.student), 0.0);
}

TEST(AudioKd, GradientMatchesFiniteDifferences) {
  Fixture fx;
  EXPECT_LT(model_gradient_error(fx.student,
                                 [&](BoundModel& b) { return audio_kd_loss(b, &fx.teacher, fx.batch, Reduction::sum); }),
            1e-4);
}

TEST(TokenKd, SelfDistillationEqualsTeacherEntropy) {
  Fixture fx;
  double entropy = 0.0;
  for (const auto& s : fx.batch) {
    if (!s.rehearsal) continue;
    for (const auto& p : probs(fx.teacher.model, s))
      for (double x : p) entropy -= x > 0 ? x * std::log(x) : 0.0;
  }
  const Seq2SeqModel& t = fx.teacher.model;
  EXPECT_NEAR(value([&](const BoundModel& b) { return token_kd_loss(b, &fx.teacher, fx.batch, Reduction::sum); }, t),
              entropy, 1e-10);
  // Gibbs: any other student pays more
  for (std::uint64_t seed = 30; seed < 40; ++seed) {
    Seq2SeqModel other(tiny_config(kVocab, 6), seed);
    sharpen_output(other, 5.0);
    EXPECT_GT(value([&](const BoundModel& b) { return token_kd_loss(b, &fx.teacher, fx.batch, Reduction::sum); },
                    other),
              entropy);
  }
}

TEST(TokenKd, OneHotTeacherReducesToCe) {
  Fixture fx;
  for (double& w : fx.teacher.model.params().output_w.data) w = 0.0;
  fx.teacher.model.params().output_b.data.assign(kVocab, 0.0);
  fx.teacher.model.params().output_b.data[5] = 1000.0;
  const std::vector<TrainSample> b{TrainSample{1, &fx.features[1], {token::bos, 5, 5, 5}, true}};
  const double kd = value([&](const BoundModel& m) { return token_kd_loss(m, &fx.teacher, b); }, fx.student);
  const double ce = value([&](const BoundModel& m) { return ce_loss(m, b); }, fx.student);
  EXPECT_NEAR(kd, ce, 1e-12);
}

TEST(TokenKd, UniformTeacherMatchesDirectSummation) {
  Fixture fx;
  for (double& w : fx.teacher.model.params().output_w.data) w = 0.0;
  for (double& b : fx.teacher.model.params().output_b.data) b = 0.0;
  double oracle = 0.0;
  for (const auto& s : fx.batch) {
    if (!s.rehearsal) continue;
    for (const auto& p : probs(fx.student, s))
      for (double x : p) oracle -= std::log(x) / static_cast<double>(kVocab);
  }
  EXPECT_NEAR(value([&](const BoundModel& b) { return token_kd_loss(b, &fx.teacher, fx.batch, Reduction::sum); },
                    fx.student),
              oracle, 1e-9);
}

TEST(TokenKd, GradientMatchesFiniteDifferences) {
  Fixture fx;
  EXPECT_LT(model_gradient_error(fx.student,
                                 [&](BoundModel& b) { return token_kd_loss(b, &fx.teacher, fx.batch, Reduction::sum); }),
            1e-4);
}

TEST(SeqKd, EqualsCeUnderTargetSubstitution) {
  Fixture fx;
  SoftTranscriptStore store;
  store.entries[11] = {{token::bos, 4, 4, token::eos}, false};
  store.entries[12] = {{token::bos, 6, 5, token::eos}, false};
  std::vector<TrainSample> swapped;
  for (const auto& s : fx.batch)
    if (s.rehearsal) swapped.push_back(TrainSample{s.id, s.features, store.at(s.id).tokens, true});
  for (Reduction r : {Reduction::sum, Reduction::mean}) {
    const double seq = value([&](const BoundModel& b) { return seq_kd_loss(b, store, fx.batch, r); }, fx.student);
    const double ce = value([&](const BoundModel& b) { return ce_loss(b, swapped, r); }, fx.student);
    EXPECT_NEAR(seq, ce, 1e-12);
  }
  // ground-truth soft transcripts reproduce CE on the rehearsal part
  SoftTranscriptStore gt;
  for (const auto& s : swapped) gt.entries[s.id] = {fx.batch[s.id - 10].target, false};
  std::vector<TrainSample> rehe(fx.batch.begin() + 1, fx.batch.end());
  EXPECT_NEAR(value([&](const BoundModel& b) { return seq_kd_loss(b, gt, fx.batch); }, fx.student),
              value([&](const BoundModel& b) { return ce_loss(b, rehe); }, fx.student), 1e-12);
}

TEST(SeqKd, CertainStudentGivesZeroAndMissingEntryIsIntegrityError) {
  Fixture fx;
  for (double& w : fx.student.params().output_w.data) w = 0.0;
  fx.student.params().output_b.data.assign(kVocab, 0.0);
  fx.student.params().output_b.data[token::eos] = 1000.0;
  SoftTranscriptStore store;
  store.entries[11] = {{token::bos, token::eos}, false};
  store.entries[12] = {{token::bos, token::eos}, false};
  EXPECT_EQ(value([&](const BoundModel& b) { return seq_kd_loss(b, store, fx.batch); }, fx.student), 0.0);
  store.entries.erase(12);
  try {
    value([&](const BoundModel& b) { return seq_kd_loss(b, store, fx.batch); }, fx.student);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::integrity);
  }
}

TEST(SoftTranscripts, TruncationAppendsEos) {
  Hypothesis h;
  h.tokens = {token::bos, 4, 5, 6};
  const auto s = soft_transcript(h);
  EXPECT_EQ(s.tokens, (std::vector<int>{token::bos, 4, 5, token::eos}));
  EXPECT_TRUE(s.truncated);
  h.tokens = {token::bos, 4, token::eos};
  EXPECT_FALSE(soft_transcript(h).truncated);
}

TEST(SoftTranscripts, FittedTeacherReproducesGroundTruth) {
  // fit a tiny model to two utterances, then its beam output is their targets
  Seq2SeqModel m(tiny_config(kVocab, 6), 41);
  std::mt19937_64 rng(42);
  Corpus corpus;
  corpus.utterances.resize(2);
  corpus.utterances[0].features = random_features(4, 4, rng);
  corpus.utterances[1].features = random_features(5, 4, rng);
  const std::vector<TrainSample> data{
      TrainSample{0, &corpus.utterances[0].features, {token::bos, 4, 6, 5, token::eos}, true},
      TrainSample{1, &corpus.utterances[1].features, {token::bos, 6, 6, token::eos}, true}};
  auto params = m.parameters();
  AdamWConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.weight_decay = 0.0;
  OptimizerState opt = make_optimizer_state(params, cfg);
  for (int step = 0; step < 300; ++step) {
    m.zero_grad();
    Tape tape;
    BoundModel b(tape, m);
    tape.backward(ce_loss(b, data));
    adamw_step(params, opt);
  }
  const TeacherSnapshot teacher{m.frozen_copy(), 0};
  const std::vector<std::uint32_t> ids{0, 1};
  const auto store = generate_soft_transcripts(teacher, corpus, ids, 20);
  EXPECT_EQ(store.beam_width, 20u);
  EXPECT_EQ(store.teacher_task, 0);
  ASSERT_EQ(store.entries.size(), 2u);
  EXPECT_EQ(store.at(0).tokens, data[0].target);
  EXPECT_EQ(store.at(1).tokens, data[1].target);
  EXPECT_EQ(store.truncated_count(), 0u);

  const auto path = std::filesystem::temp_directory_path() / "cilslu_soft.jsonl";
  save_soft_transcripts(store, path);
  const auto back = load_soft_transcripts(path);
  EXPECT_EQ(back.beam_width, 20u);
  EXPECT_EQ(back.at(0).tokens, store.at(0).tokens);
  EXPECT_EQ(back.at(1).tokens, store.at(1).tokens);
  std::filesystem::remove(path);
}

TEST(BatchLosses, NoRehearsalIsExactlyCe) {
  Fixture fx;
  KdConfig kd;
  kd.audio = kd.token = kd.seq = true;
  const std::vector<TrainSample> fresh{fx.batch[0]};
  Tape tape(false);
  BoundModel b(tape, static_cast<const Seq2SeqModel&>(fx.student));
  const LossTerms terms = batch_losses(b, &fx.teacher, nullptr, fresh, kd);
  EXPECT_EQ(terms.lambda, 0.0);
  EXPECT_EQ(terms.kd_evaluations, 0u);
  EXPECT_EQ(terms.total.id(), terms.ce.id());
  EXPECT_EQ(terms.total.item(), value([&](const BoundModel& m) { return ce_loss(m, fresh); }, fx.student));
}

TEST(BatchLosses, TermsMatchIndividualLosses) {
  Fixture fx;
  SoftTranscriptStore store;
  store.entries[11] = {{token::bos, 4, 4, token::eos}, false};
  store.entries[12] = {{token::bos, 6, 5, token::eos}, false};
  KdConfig kd;
  kd.audio = kd.token = kd.seq = true;
  kd.token_weight = 0.5;
  for (Reduction r : {Reduction::mean, Reduction::sum}) {
    Tape tape(false);
    BoundModel b(tape, static_cast<const Seq2SeqModel&>(fx.student));
    const LossTerms t = batch_losses(b, &fx.teacher, &store, fx.batch, kd, r);
    const double ce = value([&](const BoundModel& m) { return ce_loss(m, fx.batch, r); }, fx.student);
    const double au = value([&](const BoundModel& m) { return audio_kd_loss(m, &fx.teacher, fx.batch, r); }, fx.student);
    const double tk = value([&](const BoundModel& m) { return token_kd_loss(m, &fx.teacher, fx.batch, r); }, fx.student);
    const double sq = value([&](const BoundModel& m) { return seq_kd_loss(m, store, fx.batch, r); }, fx.student);
    EXPECT_NEAR(t.ce.item(), ce, 1e-12);
    EXPECT_NEAR(t.audio->item(), au, 1e-12);
    EXPECT_NEAR(t.token->item(), tk, 1e-12);
    EXPECT_NEAR(t.seq->item(), sq, 1e-12);
    EXPECT_DOUBLE_EQ(t.lambda, std::sqrt(2.0 / 3.0));
    EXPECT_EQ(t.kd_evaluations, 3u);
    EXPECT_NEAR(t.total.item(), total_loss(ce, KdValues{au, tk, sq}, t.lambda, kd), 1e-12);
  }
}

TEST(BatchLosses, TeacherStaysFrozenAndGradientsAreExact) {
  Fixture fx;
  SoftTranscriptStore store;
  store.entries[11] = {{token::bos, 4, token::eos}, false};
  store.entries[12] = {{token::bos, 5, 6, token::eos}, false};
  KdConfig kd;
  kd.audio = kd.token = kd.seq = true;
  {
    Tape tape;
    BoundModel b(tape, fx.student);
    tape.backward(batch_losses(b, &fx.teacher, &store, fx.batch, kd).total);
  }
  for (const auto& [name, t] : fx.teacher.model.named_parameters())
    for (double g : t->grad) EXPECT_EQ(g, 0.0) << name;
  EXPECT_LT(model_gradient_error(fx.student,
                                 [&](BoundModel& b) { return batch_losses(b, &fx.teacher, &store, fx.batch, kd).total; }),
            1e-4);
}

TEST(BatchLosses, Errors) {
  Fixture fx;
  KdConfig kd;
  kd.token = true;
  Tape tape(false);
  BoundModel b(tape, static_cast<const Seq2SeqModel&>(fx.student));
  try {
    batch_losses(b, nullptr, nullptr, fx.batch, kd);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::usage);
  }
  kd.seq = true;
  EXPECT_THROW(batch_losses(b, &fx.teacher, nullptr, fx.batch, kd), Error);
  fx.student.params().output_b.data[0] = std::nan("");
  Tape tape2(false);
  BoundModel b2(tape2, static_cast<const Seq2SeqModel&>(fx.student));
  try {
    batch_losses(b2, nullptr, nullptr, {&fx.batch[0], 1}, KdConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
  }
}

}  // namespace
}  // namespace cilslu
