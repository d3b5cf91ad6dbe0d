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

// Binary model checkpoints: magic, version, JSON header (model config,
// vocabulary hash, caller metadata), then every parameter tensor by name.

#pragma once

#include <cilslu/error.hpp>
#include <cilslu/model.hpp>

#include "json.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

namespace cilslu {

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"encoder_layers", c.encoder_layers},
          {"decoder_layers", c.decoder_layers},
          {"hidden", c.hidden},
          {"heads", c.heads},
          {"ffn", c.ffn},
          {"vocab_size", c.vocab_size},
          {"max_source_frames", c.max_source_frames},
          {"max_target_tokens", c.max_target_tokens},
          {"feature_dim", c.feature_dim},
          {"dropout", c.dropout},
          {"norm_epsilon", c.norm_epsilon}};
}

/// Fields absent from `j` keep the values of `base`.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {}) {
  try {
    if (j.contains("preset")) {
      const auto p = j.at("preset").get<std::string>();
      if (p == "desk") base = ModelConfig::desk(base.vocab_size);
      else if (p == "paper") base = ModelConfig::paper_scale(base.vocab_size);
      else fail(ErrorKind::config, "unknown model preset '" + p + "'");
    }
    base.encoder_layers = j.value("encoder_layers", base.encoder_layers);
    base.decoder_layers = j.value("decoder_layers", base.decoder_layers);
    base.hidden = j.value("hidden", base.hidden);
    base.heads = j.value("heads", base.heads);
    base.ffn = j.value("ffn", base.ffn);
    base.vocab_size = j.value("vocab_size", base.vocab_size);
    base.max_source_frames = j.value("max_source_frames", base.max_source_frames);
    base.max_target_tokens = j.value("max_target_tokens", base.max_target_tokens);
    base.feature_dim = j.value("feature_dim", base.feature_dim);
    base.dropout = j.value("dropout", base.dropout);
    base.norm_epsilon = j.value("norm_epsilon", base.norm_epsilon);
    return base;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("model config: ") + e.what());
  }
}

struct LoadedModel {
  Seq2SeqModel model;
  std::uint64_t vocab_hash = 0;
  nlohmann::json metadata;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'C', 'I', 'L', 'S', 'L', 'U', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  require(static_cast<bool>(is), ErrorKind::integrity, "checkpoint truncated");
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, std::size_t limit = std::size_t{1} << 30) {
  const auto n = read_u64(is);
  require(n <= limit, ErrorKind::integrity, "checkpoint string length implausible");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  require(static_cast<bool>(is), ErrorKind::integrity, "checkpoint truncated");
  return s;
}

}  // namespace detail

inline void save_model(const std::filesystem::path& path, const Seq2SeqModel& model, std::uint64_t vocab_hash,
                       const nlohmann::json& metadata = nlohmann::json::object()) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    require(static_cast<bool>(os), ErrorKind::io, "cannot write " + tmp);
    os.write(detail::kCheckpointMagic, 8);
    const std::uint32_t version = detail::kCheckpointVersion;
    os.write(reinterpret_cast<const char*>(&version), 4);
    const nlohmann::json header{{"model", to_json(model.config())}, {"vocab_hash", vocab_hash}, {"metadata", metadata}};
    detail::write_string(os, header.dump());
    const auto named = model.named_parameters();
    detail::write_u64(os, named.size());
    for (const auto& [name, t] : named) {
      detail::write_string(os, name);
      detail::write_u64(os, t->size());
      os.write(reinterpret_cast<const char*>(t->data.data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
    }
    require(static_cast<bool>(os), ErrorKind::io, "write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

/// Loads a checkpoint; a nonzero `expected_vocab_hash` must match the stored one.
inline LoadedModel load_model(const std::filesystem::path& path, std::uint64_t expected_vocab_hash = 0) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::io, "cannot read checkpoint " + path.string());
  char magic[8];
  is.read(magic, 8);
  require(static_cast<bool>(is) && std::memcmp(magic, detail::kCheckpointMagic, 8) == 0, ErrorKind::integrity,
          path.string() + " is not a checkpoint");
  std::uint32_t version = 0;
  is.read(reinterpret_cast<char*>(&version), 4);
  require(version == detail::kCheckpointVersion, ErrorKind::integrity,
          "unsupported checkpoint version " + std::to_string(version));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(detail::read_string(is));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::integrity, std::string("checkpoint header: ") + e.what());
  }
  LoadedModel out;
  out.vocab_hash = header.at("vocab_hash").get<std::uint64_t>();
  out.metadata = header.value("metadata", nlohmann::json::object());
  require(expected_vocab_hash == 0 || expected_vocab_hash == out.vocab_hash, ErrorKind::integrity,
          "checkpoint vocabulary hash does not match the corpus vocabulary");
  out.model = Seq2SeqModel(model_config_from_json(header.at("model")), 0);
  const auto count = detail::read_u64(is);
  auto params = out.model.parameters();
  const auto named = out.model.named_parameters();
  require(count == params.size(), ErrorKind::integrity, "checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = detail::read_string(is, 4096);
    require(name == named[i].first, ErrorKind::integrity, "checkpoint parameter " + name + " out of order");
    const auto n = detail::read_u64(is);
    require(n == params[i]->size(), ErrorKind::integrity, "checkpoint tensor " + name + " has wrong size");
    is.read(reinterpret_cast<char*>(params[i]->data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    require(static_cast<bool>(is), ErrorKind::integrity, "checkpoint truncated in " + name);
  }
  return out;
}

}  // namespace cilslu
