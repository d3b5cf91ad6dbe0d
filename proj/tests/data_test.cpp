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

#include <cilslu/data.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

namespace cilslu {
namespace {

Utterance fig1_utterance() {
  Utterance u;
  u.scenario = "music";
  u.action = "likeness";
  u.entities = {Entity{"music_genre", {"jazz"}}};
  u.transcript = {"I", "like", "jazz"};
  return u;
}

CorpusSpec small_spec(std::size_t n, double noise = 0.2) {
  CorpusSpec spec = default_corpus_spec();
  spec.total_samples = n;
  spec.noise = noise;
  spec.seed = 11;
  return spec;
}

const Corpus& shared_corpus() {
  static const Corpus c = generate_corpus(small_spec(2400));
  return c;
}

TEST(Codec, PaperExample) {
  EXPECT_EQ(join_words(encode_augmented(fig1_utterance())),
            "music_likeness _SEP music_genre _FILL jazz _SEP I like jazz");
}

TEST(Codec, NoEntities) {
  Utterance u = fig1_utterance();
  u.entities.clear();
  EXPECT_EQ(join_words(encode_augmented(u)), "music_likeness _SEP _SEP I like jazz");
}

TEST(Codec, AbsentEntityValueIsIntegrityError) {
  Utterance u = fig1_utterance();
  u.entities = {Entity{"music_genre", {"rock"}}};
  try {
    encode_augmented(u);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::integrity);
  }
}

TEST(Codec, DecodePaperString) {
  const auto p = decode_augmented("music_likeness _SEP music_genre _FILL jazz _SEP I like jazz");
  EXPECT_EQ(p.intent, "music_likeness");
  ASSERT_EQ(p.entities.size(), 1u);
  EXPECT_EQ(p.entities[0], (Entity{"music_genre", {"jazz"}}));
  EXPECT_EQ(join_words(p.transcript), "i like jazz");
  EXPECT_TRUE(p.well_formed());
}

TEST(Codec, SingleSeparator) {
  const auto p = decode_augmented("foo _SEP bar");
  EXPECT_EQ(p.intent, "foo");
  EXPECT_TRUE(p.entities.empty());
  EXPECT_EQ(join_words(p.transcript), "bar");
  EXPECT_TRUE(p.missing_separator);
  EXPECT_FALSE(p.well_formed());
}

TEST(Codec, NoSeparator) {
  const auto p = decode_augmented("turn on the lights");
  EXPECT_EQ(p.intent, "");
  EXPECT_EQ(join_words(p.transcript), "turn on the lights");
  EXPECT_TRUE(p.missing_separator);
}

TEST(Codec, MalformedGroupsAreSkipped) {
  auto p = decode_augmented("x_y _SEP _FILL jazz date _FILL monday _SEP a b");
  EXPECT_TRUE(p.malformed_entity);
  ASSERT_EQ(p.entities.size(), 1u);
  EXPECT_EQ(p.entities[0], (Entity{"date", {"monday"}}));
  EXPECT_EQ(join_words(p.transcript), "a b");

  p = decode_augmented("x_y _SEP date _FILL _SEP a");
  EXPECT_TRUE(p.malformed_entity);
  EXPECT_TRUE(p.entities.empty());

  p = decode_augmented("x_y _SEP stray words _SEP a");
  EXPECT_TRUE(p.malformed_entity);
  EXPECT_TRUE(p.entities.empty());

  p = decode_augmented("x_y _SEP _SEP a _SEP b");
  EXPECT_TRUE(p.extra_separator);
  EXPECT_EQ(join_words(p.transcript), "a b");

  p = decode_augmented("");
  EXPECT_TRUE(p.missing_separator);
  EXPECT_TRUE(p.transcript.empty());
}

TEST(Codec, MultiWordValuesAndTwoEntities) {
  Utterance u;
  u.scenario = "iot";
  u.action = "lights_on";
  u.entities = {Entity{"device_type", {"coffee", "machine"}}, Entity{"house_place", {"living", "room"}}};
  u.transcript = split_words("turn on the coffee machine in the living room");
  const Words enc = encode_augmented(u);
  EXPECT_EQ(join_words(enc),
            "iot_lights_on _SEP device_type _FILL coffee machine house_place _FILL living room _SEP "
            "turn on the coffee machine in the living room");
  const auto p = decode_augmented(std::span<const std::string>(enc));
  EXPECT_EQ(p.entities, u.entities);
  EXPECT_EQ(p.transcript, u.transcript);
}

TEST(Codec, RoundtripWholeCorpus) {
  const Corpus& c = shared_corpus();
  for (const auto& u : c.utterances) {
    const Words enc = encode_augmented(u);
    EXPECT_EQ(std::count(enc.begin(), enc.end(), std::string(kSepToken)), 2);
    EXPECT_EQ(static_cast<std::size_t>(std::count(enc.begin(), enc.end(), std::string(kFillToken))),
              u.entities.size());
    const auto p = decode_augmented(std::span<const std::string>(enc));
    ASSERT_TRUE(p.well_formed()) << join_words(enc);
    EXPECT_EQ(p.intent, u.intent());
    EXPECT_EQ(p.entities, u.entities);
    EXPECT_EQ(p.transcript, u.transcript);
  }
}

TEST(Corpus, CountsFollowFrequencies) {
  const Corpus& c = shared_corpus();
  double total_freq = 0.0;
  for (const auto& s : c.spec.scenarios) total_freq += s.frequency;
  std::map<std::string, std::size_t> seen;
  for (const auto& u : c.utterances) ++seen[u.scenario];
  ASSERT_EQ(c.spec.scenarios.size(), 18u);
  EXPECT_EQ(c.utterances.size(), 2400u);
  for (const auto& s : c.spec.scenarios) {
    const double expected = 2400.0 * s.frequency / total_freq;
    EXPECT_LE(std::abs(static_cast<double>(seen[s.name]) - expected), 1.0) << s.name;
  }
}

TEST(Corpus, DeterministicGivenSeed) {
  for (double noise : {0.0, 0.3}) {
    const Corpus a = generate_corpus(small_spec(600, noise));
    const Corpus b = generate_corpus(small_spec(600, noise));
    ASSERT_EQ(a.utterances.size(), b.utterances.size());
    for (std::size_t i = 0; i < a.utterances.size(); ++i) {
      EXPECT_EQ(a.utterances[i].transcript, b.utterances[i].transcript);
      EXPECT_EQ(a.utterances[i].entities, b.utterances[i].entities);
      EXPECT_EQ(a.utterances[i].features.data, b.utterances[i].features.data);
    }
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.test, b.test);
  }
  CorpusSpec other = small_spec(600);
  other.seed = 12;
  EXPECT_NE(generate_corpus(other).utterances[0].features.data,
            generate_corpus(small_spec(600)).utterances[0].features.data);
}

TEST(Corpus, SplitSizes) {
  const Corpus c = generate_corpus(small_spec(1000));
  ASSERT_EQ(c.utterances.size(), 1000u);
  EXPECT_EQ(c.train.size(), 700u);
  EXPECT_EQ(c.valid.size(), 100u);
  EXPECT_EQ(c.test.size(), 200u);
}

TEST(Corpus, SplitIsStratifiedAndDisjoint) {
  const Corpus& c = shared_corpus();
  std::set<std::uint32_t> all;
  std::map<std::string, std::array<std::size_t, 3>> per;
  for (Split s : {Split::train, Split::valid, Split::test})
    for (auto id : c.ids(s)) {
      EXPECT_TRUE(all.insert(id).second);
      ++per[c.at(id).scenario][static_cast<std::size_t>(s)];
    }
  EXPECT_EQ(all.size(), c.utterances.size());
  for (const auto& [name, n] : per) {
    const double total = static_cast<double>(n[0] + n[1] + n[2]);
    EXPECT_GE(n[0], 1u);
    EXPECT_GE(n[1], 1u);
    EXPECT_GE(n[2], 1u);
    EXPECT_LE(std::abs(static_cast<double>(n[1]) - 0.1 * total), 1.0) << name;
    EXPECT_LE(std::abs(static_cast<double>(n[2]) - 0.2 * total), 1.0) << name;
  }
}

TEST(Corpus, UtteranceInvariants) {
  const Corpus& c = shared_corpus();
  for (std::size_t i = 0; i < c.utterances.size(); ++i) {
    const Utterance& u = c.utterances[i];
    EXPECT_EQ(u.id, i);
    EXPECT_GE(u.features.rows(), u.transcript.size());
    EXPECT_LE(u.features.rows(), c.spec.max_frames);
    EXPECT_EQ(u.features.cols(), c.spec.feature_dim);
    for (const auto& e : u.entities) {
      EXPECT_FALSE(e.value.empty());
      EXPECT_NE(std::search(u.transcript.begin(), u.transcript.end(), e.value.begin(), e.value.end()),
                u.transcript.end());
    }
  }
}

TEST(Corpus, ScenarioSpecificity) {
  const CorpusSpec spec = default_corpus_spec();
  std::map<std::string, std::set<std::string>> action_owner, type_owner;
  for (const auto& s : spec.scenarios) {
    EXPECT_GE(s.actions.size(), 2u);
    EXPECT_LE(s.actions.size(), 4u);
    EXPECT_GE(s.entities.size(), 1u);
    EXPECT_LE(s.entities.size(), 3u);
    for (const auto& [a, t] : s.actions) action_owner[a].insert(s.name);
    for (const auto& [e, v] : s.entities) type_owner[e].insert(s.name);
  }
  for (const auto& [a, owners] : action_owner) EXPECT_EQ(owners.size(), 1u) << a;
  for (const auto& [e, owners] : type_owner) EXPECT_EQ(owners.size(), 1u) << e;
}

TEST(Corpus, SpecErrors) {
  auto expect_spec_error = [](const CorpusSpec& s) {
    try {
      generate_corpus(s);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::spec);
    }
  };
  CorpusSpec bad = small_spec(600);
  bad.scenarios[0].actions[0].second[0] = "wake me at {weather_city}";
  expect_spec_error(bad);
  bad = small_spec(600);
  bad.scenarios.resize(1);
  expect_spec_error(bad);
  bad = small_spec(100);
  expect_spec_error(bad);
  bad = small_spec(600);
  bad.scenarios[3].frequency = 0.0;
  expect_spec_error(bad);
}

TEST(Features, PreNoiseFramesDependOnWordsAndSeed) {
  const Words w = split_words("set an alarm for noon");
  const Tensor a = clean_frames(w, 5, 8, 48);
  EXPECT_EQ(a.data, clean_frames(w, 5, 8, 48).data);
  EXPECT_NE(a.data, clean_frames(w, 6, 8, 48).data);
  EXPECT_GE(a.rows(), w.size());
  EXPECT_LE(a.rows(), 3 * w.size());
  // every frame equals the code of some word of the sentence, in order
  std::size_t word = 0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const std::vector<double> row(a.data.begin() + static_cast<std::ptrdiff_t>(r * 8),
                                  a.data.begin() + static_cast<std::ptrdiff_t>(r * 8 + 8));
    while (word < w.size() && row != word_code(w[word], 5, 8)) ++word;
    ASSERT_LT(word, w.size());
  }
  const Tensor capped = clean_frames(w, 5, 8, 5);
  EXPECT_EQ(capped.rows(), 5u);
  EXPECT_THROW(clean_frames(w, 5, 8, 4), Error);
}

TEST(Vocabulary, SpecialIds) {
  const Vocabulary v;
  EXPECT_EQ(v.size(), 6u);
  EXPECT_EQ(v.id("_SEP"), token::sep);
  EXPECT_EQ(v.id("_FILL"), token::fill);
  EXPECT_EQ(v.text(token::pad), "<pad>");
  EXPECT_EQ(v.text(token::bos), "<s>");
  EXPECT_EQ(v.text(token::eos), "</s>");
  EXPECT_EQ(v.text(token::unk), "<unk>");
}

TEST(Vocabulary, SizeMatchesDirectCount) {
  const Corpus& c = shared_corpus();
  const Vocabulary v = Vocabulary::build(c);
  std::set<std::string> symbols;
  for (const auto& u : c.utterances) {
    symbols.insert(u.intent());
    for (const auto& e : u.entities) symbols.insert(e.type);
    symbols.insert(u.transcript.begin(), u.transcript.end());
  }
  EXPECT_EQ(v.size(), symbols.size() + 6);
}

TEST(Vocabulary, TokenizeDetokenize) {
  const Vocabulary v = Vocabulary::build(shared_corpus());
  EXPECT_EQ(v.detokenize(v.tokenize("i like jazz")), "i like jazz");
  std::size_t unknown = 0;
  const auto ids = v.tokenize("i like zyzzyva", &unknown);
  EXPECT_EQ(unknown, 1u);
  EXPECT_EQ(ids[2], token::unk);
  for (const auto& u : shared_corpus().utterances) {
    std::size_t unk = 0;
    const auto t = v.encode_target(u, &unk);
    EXPECT_EQ(unk, 0u);
    EXPECT_EQ(t.front(), token::bos);
    EXPECT_EQ(t.back(), token::eos);
    EXPECT_EQ(v.words(t), encode_augmented(u));
  }
}

TEST(Vocabulary, RebuildFromTokens) {
  const Vocabulary v = Vocabulary::build(shared_corpus());
  const Vocabulary w = Vocabulary::from_tokens(v.tokens());
  EXPECT_EQ(w.hash(), v.hash());
  auto broken = v.tokens();
  std::swap(broken[0], broken[1]);
  EXPECT_THROW(Vocabulary::from_tokens(broken), Error);
}

TEST(Persistence, CorpusRoundtrip) {
  const Corpus c = generate_corpus(small_spec(600));
  const auto dir = std::filesystem::temp_directory_path() / "cilslu_data_test";
  std::filesystem::remove_all(dir);
  save_corpus(c, dir);
  const Corpus d = load_corpus(dir);
  ASSERT_EQ(d.utterances.size(), c.utterances.size());
  EXPECT_EQ(d.train, c.train);
  EXPECT_EQ(d.valid, c.valid);
  EXPECT_EQ(d.test, c.test);
  EXPECT_EQ(to_json(d.spec), to_json(c.spec));
  for (std::size_t i = 0; i < c.utterances.size(); ++i) {
    EXPECT_EQ(d.utterances[i].intent(), c.utterances[i].intent());
    EXPECT_EQ(d.utterances[i].entities, c.utterances[i].entities);
    EXPECT_EQ(d.utterances[i].transcript, c.utterances[i].transcript);
    EXPECT_EQ(d.utterances[i].features.data, c.utterances[i].features.data);
  }
  std::filesystem::remove_all(dir);
}

TEST(Persistence, SpecFromPresetJson) {
  const auto spec = corpus_spec_from_json(nlohmann::json{{"preset", "default"}, {"total_samples", 5000}, {"seed", 3}});
  EXPECT_EQ(spec.scenarios.size(), 18u);
  EXPECT_EQ(spec.total_samples, 5000u);
  EXPECT_EQ(spec.seed, 3u);
  EXPECT_THROW(corpus_spec_from_json(nlohmann::json{{"scenarios", 3}}), Error);
}

}  // namespace
}  // namespace cilslu
