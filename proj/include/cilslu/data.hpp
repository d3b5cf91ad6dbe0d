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

// Synthetic SLURP-like corpus: scenario catalog, utterance generator with
// word-codebook "audio" frames, the augmented-transcription codec, the
// word-level vocabulary, and corpus persistence.

#pragma once

#include <cilslu/error.hpp>
#include <cilslu/grad.hpp>
#include <cilslu/hash.hpp>
#include <cilslu/tokens.hpp>

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cilslu {

using Words = std::vector<std::string>;

inline Words split_words(std::string_view text) {
  Words out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i != 0) out += ' ';
    out += words[i];
  }
  return out;
}

inline constexpr std::string_view kSepToken = "_SEP";
inline constexpr std::string_view kFillToken = "_FILL";

struct Entity {
  std::string type;
  Words value;
  bool operator==(const Entity&) const = default;
  auto operator<=>(const Entity&) const = default;
};

struct Utterance {
  std::uint32_t id = 0;
  std::string scenario;
  std::string action;
  std::vector<Entity> entities;
  Words transcript;
  Tensor features;  // [frames × feature_dim]

  std::string intent() const { return scenario + "_" + action; }
};

// ---------------------------------------------------------------------------
// Corpus specification

struct ScenarioSpec {
  std::string name;
  double frequency = 1.0;
  std::vector<std::pair<std::string, std::vector<std::string>>> actions;   // action → templates
  std::vector<std::pair<std::string, std::vector<std::string>>> entities;  // type → values
};

struct CorpusSpec {
  std::vector<ScenarioSpec> scenarios;
  std::size_t total_samples = 2400;
  double noise = 0.2;
  std::uint64_t seed = 1;
  std::size_t feature_dim = 16;
  std::size_t max_frames = 48;
  std::vector<std::string> prefixes;
  std::vector<std::string> suffixes;

  void validate() const;
};

/// Slot names referenced by a template, in order of appearance.
inline std::vector<std::string> template_slots(std::string_view tmpl) {
  std::vector<std::string> slots;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    if (tmpl[i] != '{') continue;
    const std::size_t close = tmpl.find('}', i);
    require(close != std::string_view::npos, ErrorKind::spec, "unterminated slot in template: " + std::string(tmpl));
    slots.emplace_back(tmpl.substr(i + 1, close - i - 1));
    i = close;
  }
  return slots;
}

/// Samples per scenario: total × frequency / Σ frequency, apportioned by
/// largest remainder so that the counts add up to total_samples.
inline std::vector<std::size_t> scenario_counts(const CorpusSpec& spec) {
  double total_freq = 0.0;
  for (const auto& s : spec.scenarios) total_freq += s.frequency;
  std::vector<std::size_t> counts;
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < spec.scenarios.size(); ++i) {
    const double exact = static_cast<double>(spec.total_samples) * spec.scenarios[i].frequency / total_freq;
    counts.push_back(static_cast<std::size_t>(std::floor(exact)));
    assigned += counts.back();
    remainders.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < spec.total_samples && k < remainders.size(); ++k, ++assigned)
    ++counts[remainders[k].second];
  return counts;
}

inline void CorpusSpec::validate() const {
  require(scenarios.size() >= 2, ErrorKind::spec, "corpus needs at least two scenarios");
  require(feature_dim >= 2, ErrorKind::spec, "feature dimension must be >= 2");
  require(noise >= 0.0, ErrorKind::spec, "noise level must be non-negative");
  std::set<std::string> names, actions, types;
  for (const auto& s : scenarios) {
    require(!s.name.empty() && names.insert(s.name).second, ErrorKind::spec, "duplicate or empty scenario name");
    require(s.frequency > 0.0, ErrorKind::spec, "scenario " + s.name + ": frequency must be positive");
    require(!s.actions.empty(), ErrorKind::spec, "scenario " + s.name + " has no actions");
    std::set<std::string> local_types;
    for (const auto& [type, values] : s.entities) {
      require(!values.empty(), ErrorKind::spec, "entity type " + type + " has no values");
      for (const auto& v : values)
        require(!split_words(v).empty(), ErrorKind::spec, "empty value for entity type " + type);
      local_types.insert(type);
      types.insert(type);
    }
    for (const auto& [action, templates] : s.actions) {
      require(!templates.empty(), ErrorKind::spec, "action " + action + " has no templates");
      actions.insert(action);
      for (const auto& t : templates) {
        std::set<std::string> seen;
        for (const auto& slot : template_slots(t)) {
          require(local_types.count(slot) == 1, ErrorKind::spec,
                  "template \"" + t + "\" references unknown entity type " + slot);
          require(seen.insert(slot).second, ErrorKind::spec, "template \"" + t + "\" repeats slot " + slot);
        }
      }
    }
  }
  const auto counts = scenario_counts(*this);
  for (std::size_t i = 0; i < counts.size(); ++i)
    require(counts[i] >= 10, ErrorKind::spec,
            "scenario " + scenarios[i].name + " gets " + std::to_string(counts[i]) + " samples (< 10)");
}

/// Default 18-scenario catalog with mostly disjoint action and entity inventories
/// and skewed scenario frequencies.
inline CorpusSpec default_corpus_spec() {
  CorpusSpec spec;
  auto add = [&](std::string name, double freq,
                 std::vector<std::pair<std::string, std::vector<std::string>>> actions,
                 std::vector<std::pair<std::string, std::vector<std::string>>> entities) {
    spec.scenarios.push_back(ScenarioSpec{std::move(name), freq, std::move(actions), std::move(entities)});
  };
  add("alarm", 0.28,
      {{"set", {"wake me up at {time}", "set an alarm for {time}"}},
       {"remove", {"cancel my alarm at {time}", "remove the {time} alarm"}},
       {"query", {"what alarms do i have", "show my alarms"}}},
      {{"time", {"six am", "seven thirty", "noon", "nine pm"}}});
  add("audio", 0.20,
      {{"volume_mute", {"mute the speakers", "silence the sound now"}},
       {"volume_up", {"turn the volume up to {volume_level}", "raise the volume to {volume_level}"}}},
      {{"volume_level", {"ten", "fifty", "max"}}});
  add("calendar", 1.00,
      {{"schedule", {"remind me about {event_name} on {date}", "add {event_name} to my calendar for {date}"}},
       {"agenda", {"what is on my calendar {date}", "do i have anything {date}"}},
       {"unschedule", {"delete {event_name} from my calendar", "cancel {event_name} on {date}"}}},
      {{"event_name", {"the meeting", "dentist", "lunch with mom", "team sync"}},
       {"date", {"monday", "tomorrow", "friday", "next week"}}});
  add("cooking", 0.25,
      {{"recipe", {"how do i cook {food_type}", "give me a recipe for {food_type}"}},
       {"measure", {"how many grams in a cup of {food_type}", "how much {food_type} per serving"}}},
      {{"food_type", {"pasta", "rice", "chicken soup", "pancakes"}}});
  add("datetime", 0.30,
      {{"time_query", {"what time is it in {place_name}", "tell me the current time in {place_name}"}},
       {"date_query", {"what day is it today", "which date is it"}}},
      {{"place_name", {"london", "tokyo", "new york", "paris"}}});
  add("email", 0.70,
      {{"sendemail", {"send an email to {person}", "write a mail to {person}"}},
       {"checkinbox", {"check my inbox", "do i have new emails from {person}"}},
       {"addcontact", {"add {person} to my contacts", "save {person} as a new contact"}}},
      {{"person", {"john", "mary", "my boss", "anna"}}});
  add("general", 0.60,
      {{"joke", {"tell me a {joke_type} joke", "say something {joke_type}"}},
       {"greet", {"hello there assistant", "good morning how are you"}},
       {"quirky", {"what is your favourite colour", "are you a robot"}}},
      {{"joke_type", {"funny", "short", "silly"}}});
  add("iot", 0.65,
      {{"lights_on", {"turn on the {device_type} in the {house_place}", "switch the {device_type} on"}},
       {"lights_off", {"turn off the {device_type} in the {house_place}", "switch the {device_type} off"}},
       {"cleaning", {"start the vacuum in the {house_place}", "clean the {house_place}"}}},
      {{"device_type", {"lights", "lamp", "heater", "coffee machine"}},
       {"house_place", {"kitchen", "bedroom", "living room"}}});
  add("lists", 0.45,
      {{"add_item", {"add {list_item} to my {list_name} list", "put {list_item} on the {list_name} list"}},
       {"remove_item", {"remove {list_item} from my {list_name} list", "take {list_item} off the list"}},
       {"read_list", {"read my {list_name} list", "what is on my {list_name} list"}}},
      {{"list_name", {"shopping", "todo", "groceries"}}, {"list_item", {"milk", "eggs", "bread"}}});
  add("music", 0.30,
      {{"likeness", {"i like {music_genre}", "i love {artist_name} songs"}},
       {"settings", {"shuffle my playlist", "repeat this track"}}},
      {{"music_genre", {"jazz", "rock", "classical", "pop"}}, {"artist_name", {"adele", "queen", "mozart"}}});
  add("news", 0.40,
      {{"headlines", {"what are the latest {news_topic} news", "give me the {news_topic} headlines"}},
       {"subscribe", {"subscribe me to {news_topic} updates", "follow {news_topic} stories"}}},
      {{"news_topic", {"sports", "politics", "technology", "business"}}});
  add("play", 0.95,
      {{"radio", {"play the radio station {radio_name}", "tune in to {radio_name}"}},
       {"podcasts", {"play the next episode of {podcast_name}", "resume {podcast_name} podcast"}},
       {"game", {"let us play a game", "start a quiz game"}}},
      {{"radio_name", {"jazz fm", "bbc one", "capital"}},
       {"podcast_name", {"daily talk", "history hour", "tech weekly"}}});
  add("qa", 0.90,
      {{"definition", {"what does {definition_word} mean", "define {definition_word}"}},
       {"currency", {"how many {currency_name} is one pound", "convert ten pounds to {currency_name}"}},
       {"maths", {"what is seven times eight", "calculate twenty plus five"}}},
      {{"definition_word", {"serendipity", "photosynthesis", "gravity"}},
       {"currency_name", {"dollars", "euros", "yen"}}});
  add("recommendation", 0.35,
      {{"movies", {"recommend a good {movie_genre} movie", "suggest a {movie_genre} film for tonight"}},
       {"events", {"any concerts near me this weekend", "what events are happening nearby"}}},
      {{"movie_genre", {"comedy", "horror", "drama"}}});
  add("social", 0.30,
      {{"post", {"post a status on {social_platform}", "share my photo on {social_platform}"}},
       {"social_query", {"any new updates on {social_platform}", "check my {social_platform} notifications"}}},
      {{"social_platform", {"twitter", "facebook", "instagram"}}});
  add("takeaway", 0.20,
      {{"order", {"order food from {restaurant_name}", "get me a delivery from {restaurant_name}"}},
       {"delivery_status", {"where is my food order", "how long until my delivery arrives"}}},
      {{"restaurant_name", {"pizza palace", "golden dragon", "burger hut"}}});
  add("transport", 0.50,
      {{"taxi", {"book a taxi to {destination}", "call me a cab to {destination}"}},
       {"ticket", {"buy a {transport_type} ticket to {destination}", "book a {transport_type} ticket"}},
       {"traffic", {"how is the traffic on the way to {destination}", "is the road to {destination} busy"}}},
      {{"destination", {"the airport", "the station", "downtown"}}, {"transport_type", {"train", "bus", "ferry"}}});
  add("weather", 0.55,
      {{"forecast", {"will it {weather_descriptor} tomorrow", "is it going to be {weather_descriptor} in {weather_city}"}},
       {"temperature", {"what is the temperature in {weather_city}", "how hot is it outside"}}},
      {{"weather_descriptor", {"rain", "snow", "sunny", "windy"}}, {"weather_city", {"rome", "berlin", "madrid"}}});
  spec.prefixes = {"", "", "please", "hey", "can you"};
  spec.suffixes = {"", "", "please", "thanks"};
  return spec;
}

// ---------------------------------------------------------------------------
// JSON form of the spec

inline nlohmann::json to_json(const CorpusSpec& spec) {
  nlohmann::json j;
  j["total_samples"] = spec.total_samples;
  j["noise"] = spec.noise;
  j["seed"] = spec.seed;
  j["feature_dim"] = spec.feature_dim;
  j["max_frames"] = spec.max_frames;
  j["prefixes"] = spec.prefixes;
  j["suffixes"] = spec.suffixes;
  j["scenarios"] = nlohmann::json::array();
  for (const auto& s : spec.scenarios) {
    nlohmann::json js;
    js["name"] = s.name;
    js["frequency"] = s.frequency;
    js["actions"] = nlohmann::json::array();
    for (const auto& [a, t] : s.actions) js["actions"].push_back({{"name", a}, {"templates", t}});
    js["entities"] = nlohmann::json::array();
    for (const auto& [e, v] : s.entities) js["entities"].push_back({{"type", e}, {"values", v}});
    j["scenarios"].push_back(std::move(js));
  }
  return j;
}

inline CorpusSpec corpus_spec_from_json(const nlohmann::json& j) {
  try {
    CorpusSpec spec;
    if (j.contains("preset")) {
      require(j.at("preset") == "default", ErrorKind::config, "unknown corpus preset");
      spec = default_corpus_spec();
    }
    spec.total_samples = j.value("total_samples", spec.total_samples);
    spec.noise = j.value("noise", spec.noise);
    spec.seed = j.value("seed", spec.seed);
    spec.feature_dim = j.value("feature_dim", spec.feature_dim);
    spec.max_frames = j.value("max_frames", spec.max_frames);
    if (j.contains("prefixes")) spec.prefixes = j.at("prefixes").get<std::vector<std::string>>();
    if (j.contains("suffixes")) spec.suffixes = j.at("suffixes").get<std::vector<std::string>>();
    if (j.contains("scenarios")) {
      spec.scenarios.clear();
      for (const auto& js : j.at("scenarios")) {
        ScenarioSpec s;
        s.name = js.at("name").get<std::string>();
        s.frequency = js.value("frequency", 1.0);
        for (const auto& a : js.at("actions"))
          s.actions.emplace_back(a.at("name").get<std::string>(), a.at("templates").get<std::vector<std::string>>());
        if (js.contains("entities"))
          for (const auto& e : js.at("entities"))
            s.entities.emplace_back(e.at("type").get<std::string>(), e.at("values").get<std::vector<std::string>>());
        spec.scenarios.push_back(std::move(s));
      }
    }
    return spec;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("corpus spec: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Features

/// Codebook vector for a word, fixed by (seed, word).
inline std::vector<double> word_code(std::string_view word, std::uint64_t seed, std::size_t dim) {
  std::mt19937_64 rng(mix_seed(seed, fnv1a(word)));
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(dim);
  for (double& x : v) x = n(rng);
  return v;
}

/// Noise-free frames: each word's code repeated 1–3 times. Durations are a
/// function of (seed, word sequence); they shrink from the end when the total
/// would exceed max_frames.
inline Tensor clean_frames(std::span<const std::string> words, std::uint64_t seed, std::size_t dim,
                           std::size_t max_frames) {
  require(!words.empty(), ErrorKind::spec, "cannot synthesize frames for an empty transcript");
  require(words.size() <= max_frames, ErrorKind::spec,
          "transcript of " + std::to_string(words.size()) + " words exceeds max_frames");
  std::uint64_t h = seed;
  for (const auto& w : words) h = mix_seed(h, fnv1a(w));
  std::mt19937_64 rng(h);
  std::uniform_int_distribution<int> dur(1, 3);
  std::vector<std::size_t> durations;
  std::size_t total = 0;
  for (std::size_t i = 0; i < words.size(); ++i) {
    durations.push_back(static_cast<std::size_t>(dur(rng)));
    total += durations.back();
  }
  for (std::size_t i = words.size(); total > max_frames && i-- > 0;) {
    const std::size_t cut = std::min(durations[i] - 1, total - max_frames);
    durations[i] -= cut;
    total -= cut;
  }
  Tensor frames = Tensor::matrix(total, dim);
  std::size_t row = 0;
  for (std::size_t i = 0; i < words.size(); ++i) {
    const auto code = word_code(words[i], seed, dim);
    for (std::size_t r = 0; r < durations[i]; ++r, ++row)
      std::copy(code.begin(), code.end(), frames.data.begin() + static_cast<std::ptrdiff_t>(row * dim));
  }
  return frames;
}

// ---------------------------------------------------------------------------
// Corpus

enum class Split { train, valid, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "valid" || s == "validation") return Split::valid;
  if (s == "test") return Split::test;
  fail(ErrorKind::usage, "unknown split '" + std::string(s) + "'");
}

struct Corpus {
  CorpusSpec spec;
  std::vector<Utterance> utterances;  // utterances[i].id == i
  std::vector<std::uint32_t> train, valid, test;

  const std::vector<std::uint32_t>& ids(Split s) const {
    switch (s) {
      case Split::train: return train;
      case Split::valid: return valid;
      case Split::test: return test;
    }
    return train;
  }

  const Utterance& at(std::uint32_t id) const {
    require(id < utterances.size(), ErrorKind::input, "utterance id out of range");
    return utterances[id];
  }

  std::vector<std::string> scenario_names() const {
    std::vector<std::string> out;
    for (const auto& s : spec.scenarios) out.push_back(s.name);
    return out;
  }
};

namespace detail {

// Largest-remainder apportionment of `target` across scenarios with per-scenario
// quotas n_s · fraction, never dropping below one per scenario.
inline std::vector<std::size_t> apportion(const std::vector<std::size_t>& counts, double fraction,
                                          std::size_t target) {
  std::vector<std::size_t> out(counts.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double exact = static_cast<double>(counts[i]) * fraction;
    out[i] = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(exact)));
    assigned += out[i];
    remainders.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < target && k < remainders.size(); ++k, ++assigned)
    ++out[remainders[k].second];
  return out;
}

}  // namespace detail

/// Deterministic generation and 70:10:20 split stratified by scenario.
inline Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Corpus corpus;
  corpus.spec = spec;
  const auto counts = scenario_counts(spec);
  for (std::size_t s = 0; s < spec.scenarios.size(); ++s) {
    const ScenarioSpec& sc = spec.scenarios[s];
    std::mt19937_64 rng(mix_seed(spec.seed, s));
    for (std::size_t k = 0; k < counts[s]; ++k) {
      Utterance u;
      u.id = static_cast<std::uint32_t>(corpus.utterances.size());
      u.scenario = sc.name;
      std::uniform_int_distribution<std::size_t> pick_action(0, sc.actions.size() - 1);
      const auto& [action, templates] = sc.actions[pick_action(rng)];
      u.action = action;
      std::uniform_int_distribution<std::size_t> pick_tmpl(0, templates.size() - 1);
      const std::string& tmpl = templates[pick_tmpl(rng)];
      if (!spec.prefixes.empty()) {
        std::uniform_int_distribution<std::size_t> p(0, spec.prefixes.size() - 1);
        for (auto& w : split_words(spec.prefixes[p(rng)])) u.transcript.push_back(std::move(w));
      }
      for (const auto& piece : split_words(tmpl)) {
        const auto slots = template_slots(piece);
        if (slots.empty()) {
          u.transcript.push_back(piece);
          continue;
        }
        const auto it = std::find_if(sc.entities.begin(), sc.entities.end(),
                                     [&](const auto& e) { return e.first == slots[0]; });
        std::uniform_int_distribution<std::size_t> pv(0, it->second.size() - 1);
        Entity e{slots[0], split_words(it->second[pv(rng)])};
        u.transcript.insert(u.transcript.end(), e.value.begin(), e.value.end());
        u.entities.push_back(std::move(e));
      }
      if (!spec.suffixes.empty()) {
        std::uniform_int_distribution<std::size_t> p(0, spec.suffixes.size() - 1);
        for (auto& w : split_words(spec.suffixes[p(rng)])) u.transcript.push_back(std::move(w));
      }
      u.features = clean_frames(u.transcript, spec.seed, spec.feature_dim, spec.max_frames);
      if (spec.noise > 0.0) {
        std::mt19937_64 noise_rng(mix_seed(spec.seed ^ 0x5eedull, u.id));
        std::normal_distribution<double> n(0.0, spec.noise);
        for (double& x : u.features.data) x += n(noise_rng);
      }
      corpus.utterances.push_back(std::move(u));
    }
  }

  const std::size_t n = corpus.utterances.size();
  const auto n_valid = detail::apportion(counts, 0.1, static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n))));
  const auto n_test = detail::apportion(counts, 0.2, static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n))));
  std::uint32_t base = 0;
  for (std::size_t s = 0; s < counts.size(); ++s) {
    std::vector<std::uint32_t> idx(counts[s]);
    std::iota(idx.begin(), idx.end(), base);
    std::mt19937_64 rng(mix_seed(spec.seed ^ 0x5917a11ull, s));
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t k = 0;
    for (; k < n_valid[s]; ++k) corpus.valid.push_back(idx[k]);
    for (; k < n_valid[s] + n_test[s]; ++k) corpus.test.push_back(idx[k]);
    for (; k < idx.size(); ++k) corpus.train.push_back(idx[k]);
    base += static_cast<std::uint32_t>(counts[s]);
  }
  for (auto* v : {&corpus.train, &corpus.valid, &corpus.test}) std::sort(v->begin(), v->end());
  return corpus;
}

// ---------------------------------------------------------------------------
// Augmented transcription codec

/// intent _SEP (type _FILL value)* _SEP transcript
inline Words encode_augmented(const Utterance& u) {
  Words out{u.intent(), std::string(kSepToken)};
  for (const Entity& e : u.entities) {
    require(!e.value.empty(), ErrorKind::integrity, "entity " + e.type + " has an empty value");
    const auto found = std::search(u.transcript.begin(), u.transcript.end(), e.value.begin(), e.value.end());
    require(found != u.transcript.end(), ErrorKind::integrity,
            "entity value \"" + join_words(e.value) + "\" absent from transcript");
    out.push_back(e.type);
    out.emplace_back(kFillToken);
    out.insert(out.end(), e.value.begin(), e.value.end());
  }
  out.emplace_back(kSepToken);
  out.insert(out.end(), u.transcript.begin(), u.transcript.end());
  return out;
}

struct ParsedTranscript {
  std::string intent;
  std::vector<Entity> entities;
  Words transcript;
  bool missing_separator = false;
  bool extra_separator = false;
  bool malformed_entity = false;
  bool multi_token_intent = false;

  bool well_formed() const {
    return !missing_separator && !extra_separator && !malformed_entity && !multi_token_intent && !intent.empty();
  }
};

/// Best-effort inverse of encode_augmented; never throws on malformed input.
inline ParsedTranscript decode_augmented(std::span<const std::string> tokens) {
  ParsedTranscript out;
  std::vector<std::size_t> seps;
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] == kSepToken) seps.push_back(i);
  if (seps.empty()) {
    out.missing_separator = true;
    out.transcript.assign(tokens.begin(), tokens.end());
    return out;
  }
  const Words intent_tokens(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(seps[0]));
  out.intent = join_words(intent_tokens);
  out.multi_token_intent = intent_tokens.size() > 1;
  if (seps.size() == 1) {
    out.missing_separator = true;
    out.transcript.assign(tokens.begin() + static_cast<std::ptrdiff_t>(seps[0] + 1), tokens.end());
    return out;
  }
  out.extra_separator = seps.size() > 2;
  const std::span<const std::string> seg = tokens.subspan(seps[0] + 1, seps[1] - seps[0] - 1);
  std::vector<std::size_t> fills;
  for (std::size_t i = 0; i < seg.size(); ++i)
    if (seg[i] == kFillToken) fills.push_back(i);
  if (fills.empty() && !seg.empty()) out.malformed_entity = true;
  std::size_t consumed = 0;
  for (std::size_t k = 0; k < fills.size(); ++k) {
    const std::size_t f = fills[k];
    const std::size_t value_end = k + 1 < fills.size() ? fills[k + 1] - 1 : seg.size();
    if (f == 0 || f - 1 != consumed) out.malformed_entity = true;
    if (f == 0 || f - 1 < consumed) {
      consumed = std::max(consumed, f + 1);
      continue;
    }
    Entity e;
    e.type = seg[f - 1];
    for (std::size_t i = f + 1; i < value_end && i < seg.size(); ++i) e.value.push_back(seg[i]);
    consumed = std::max(value_end, f + 1);
    if (e.value.empty()) {
      out.malformed_entity = true;
      continue;
    }
    out.entities.push_back(std::move(e));
  }
  for (std::size_t i = seps[1] + 1; i < tokens.size(); ++i)
    if (tokens[i] != kSepToken) out.transcript.push_back(tokens[i]);
  return out;
}

inline ParsedTranscript decode_augmented(std::string_view text) {
  const Words words = split_words(text);
  Words tokens;
  for (const auto& w : words) {
    if (w == "_sep") tokens.emplace_back(kSepToken);
    else if (w == "_fill") tokens.emplace_back(kFillToken);
    else tokens.push_back(w);
  }
  return decode_augmented(std::span<const std::string>(tokens));
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Closed word-level vocabulary: reserved tokens at ids 0..5, then intents,
/// entity types and transcript words, each block sorted.
class Vocabulary {
 public:
  Vocabulary() { for (auto t : reserved()) add(std::string(t)); }

  static std::vector<std::string_view> reserved() {
    return {"<pad>", "<s>", "</s>", "<unk>", kSepToken, kFillToken};
  }

  static Vocabulary build(const Corpus& corpus) {
    std::set<std::string> intents, types, words;
    for (const auto& s : corpus.spec.scenarios) {
      for (const auto& [a, t] : s.actions) intents.insert(s.name + "_" + a);
      for (const auto& [e, v] : s.entities) types.insert(e);
    }
    for (const auto& u : corpus.utterances) {
      intents.insert(u.intent());
      for (const auto& e : u.entities) types.insert(e.type);
      for (const auto& w : u.transcript) words.insert(w);
    }
    Vocabulary v;
    for (const auto& block : {intents, types, words})
      for (const auto& t : block)
        if (!v.contains(t)) v.add(t);
    return v;
  }

  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    require(tokens.size() >= static_cast<std::size_t>(token::reserved_count), ErrorKind::integrity,
            "vocabulary misses reserved tokens");
    for (std::size_t i = 0; i < static_cast<std::size_t>(token::reserved_count); ++i)
      require(tokens[i] == v.tokens_[i], ErrorKind::integrity, "reserved token mismatch");
    for (std::size_t i = token::reserved_count; i < tokens.size(); ++i) v.add(tokens[i]);
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& t) const { return index_.count(t) != 0; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int id(const std::string& t) const {
    const auto it = index_.find(t);
    return it == index_.end() ? token::unk : it->second;
  }

  const std::string& text(int id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), ErrorKind::input, "token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  /// Word ids for whitespace-separated text; unknown words map to UNK and are counted.
  std::vector<int> tokenize(std::string_view text, std::size_t* unknown = nullptr) const {
    std::vector<int> out;
    for (const auto& w : split_words(text)) out.push_back(lookup(w, unknown));
    return out;
  }

  std::vector<int> tokenize(std::span<const std::string> words, std::size_t* unknown = nullptr) const {
    std::vector<int> out;
    for (const auto& w : words) out.push_back(lookup(w, unknown));
    return out;
  }

  /// Token strings with PAD/BOS/EOS dropped.
  Words words(std::span<const int> ids) const {
    Words out;
    for (int id : ids)
      if (id != token::pad && id != token::bos && id != token::eos) out.push_back(text(id));
    return out;
  }

  std::string detokenize(std::span<const int> ids) const { return join_words(words(ids)); }

  /// BOS + augmented transcription + EOS.
  std::vector<int> encode_target(const Utterance& u, std::size_t* unknown = nullptr) const {
    std::vector<int> out{token::bos};
    const auto ids = tokenize(encode_augmented(u), unknown);
    out.insert(out.end(), ids.begin(), ids.end());
    out.push_back(token::eos);
    return out;
  }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a("cilslu-vocab");
    for (const auto& t : tokens_) h = fnv1a(t + "\n", h);
    return h;
  }

 private:
  void add(const std::string& t) {
    index_.emplace(t, static_cast<int>(tokens_.size()));
    tokens_.push_back(t);
  }

  int lookup(const std::string& w, std::size_t* unknown) const {
    std::string key = w;
    if (key == "_sep") key = std::string(kSepToken);
    if (key == "_fill") key = std::string(kFillToken);
    const auto it = index_.find(key);
    if (it != index_.end()) return it->second;
    if (unknown != nullptr) ++*unknown;
    return token::unk;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Persistence: utterances.jsonl + features.bin + spec.json

namespace detail {

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(static_cast<bool>(is), ErrorKind::io, "unexpected end of binary file");
  return v;
}

inline constexpr char kFeatureMagic[8] = {'C', 'I', 'L', 'F', 'E', 'A', 'T', '1'};

}  // namespace detail

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "spec.json");
    require(static_cast<bool>(os), ErrorKind::io, "cannot write " + (dir / "spec.json").string());
    os << to_json(corpus.spec).dump(2) << "\n";
  }
  std::vector<Split> split_of(corpus.utterances.size(), Split::train);
  for (auto id : corpus.valid) split_of[id] = Split::valid;
  for (auto id : corpus.test) split_of[id] = Split::test;
  {
    std::ofstream os(dir / "utterances.jsonl");
    require(static_cast<bool>(os), ErrorKind::io, "cannot write utterances.jsonl");
    for (const auto& u : corpus.utterances) {
      nlohmann::json j;
      j["id"] = u.id;
      j["split"] = to_string(split_of[u.id]);
      j["scenario"] = u.scenario;
      j["action"] = u.action;
      j["entities"] = nlohmann::json::array();
      for (const auto& e : u.entities) j["entities"].push_back({{"type", e.type}, {"value", join_words(e.value)}});
      j["transcript"] = join_words(u.transcript);
      os << j.dump() << "\n";
    }
  }
  std::ofstream fs(dir / "features.bin", std::ios::binary);
  require(static_cast<bool>(fs), ErrorKind::io, "cannot write features.bin");
  fs.write(detail::kFeatureMagic, sizeof(detail::kFeatureMagic));
  detail::write_pod<std::uint64_t>(fs, corpus.utterances.size());
  for (const auto& u : corpus.utterances) {
    detail::write_pod<std::uint64_t>(fs, u.id);
    detail::write_pod<std::uint64_t>(fs, u.features.rows());
    detail::write_pod<std::uint64_t>(fs, u.features.cols());
    fs.write(reinterpret_cast<const char*>(u.features.data.data()),
             static_cast<std::streamsize>(u.features.size() * sizeof(double)));
  }
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus corpus;
  {
    std::ifstream is(dir / "spec.json");
    require(static_cast<bool>(is), ErrorKind::io, "cannot read " + (dir / "spec.json").string());
    corpus.spec = corpus_spec_from_json(nlohmann::json::parse(is));
  }
  std::ifstream is(dir / "utterances.jsonl");
  require(static_cast<bool>(is), ErrorKind::io, "cannot read utterances.jsonl");
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    Utterance u;
    u.id = j.at("id").get<std::uint32_t>();
    require(u.id == corpus.utterances.size(), ErrorKind::integrity, "utterance ids must be dense and ordered");
    u.scenario = j.at("scenario").get<std::string>();
    u.action = j.at("action").get<std::string>();
    for (const auto& e : j.at("entities"))
      u.entities.push_back(Entity{e.at("type").get<std::string>(), split_words(e.at("value").get<std::string>())});
    u.transcript = split_words(j.at("transcript").get<std::string>());
    switch (parse_split(j.at("split").get<std::string>())) {
      case Split::train: corpus.train.push_back(u.id); break;
      case Split::valid: corpus.valid.push_back(u.id); break;
      case Split::test: corpus.test.push_back(u.id); break;
    }
    corpus.utterances.push_back(std::move(u));
  }
  std::ifstream fs(dir / "features.bin", std::ios::binary);
  require(static_cast<bool>(fs), ErrorKind::io, "cannot read features.bin");
  char magic[8];
  fs.read(magic, 8);
  require(static_cast<bool>(fs) && std::equal(magic, magic + 8, detail::kFeatureMagic), ErrorKind::integrity,
          "features.bin: bad magic");
  const auto count = detail::read_pod<std::uint64_t>(fs);
  require(count == corpus.utterances.size(), ErrorKind::integrity, "features.bin: utterance count mismatch");
  for (auto& u : corpus.utterances) {
    const auto id = detail::read_pod<std::uint64_t>(fs);
    require(id == u.id, ErrorKind::integrity, "features.bin: id order mismatch");
    const auto rows = detail::read_pod<std::uint64_t>(fs);
    const auto cols = detail::read_pod<std::uint64_t>(fs);
    u.features = Tensor::matrix(rows, cols);
    fs.read(reinterpret_cast<char*>(u.features.data.data()), static_cast<std::streamsize>(rows * cols * sizeof(double)));
    require(static_cast<bool>(fs), ErrorKind::io, "features.bin: truncated");
  }
  return corpus;
}

}  // namespace cilslu
