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

// Class-incremental task schedule and the rehearsal buffer.

#pragma once

#include <cilslu/data.hpp>
#include <cilslu/error.hpp>
#include <cilslu/grad.hpp>

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace cilslu {

struct Task {
  std::vector<std::string> scenarios;
  std::vector<std::uint32_t> train, valid, test;

  const std::vector<std::uint32_t>& ids(Split s) const {
    switch (s) {
      case Split::train: return train;
      case Split::valid: return valid;
      case Split::test: return test;
    }
    return train;
  }
  std::vector<std::uint32_t>& ids(Split s) {
    return const_cast<std::vector<std::uint32_t>&>(static_cast<const Task&>(*this).ids(s));
  }
  bool contains(const std::string& scenario) const {
    return std::find(scenarios.begin(), scenarios.end(), scenario) != scenarios.end();
  }
};

struct TaskSchedule {
  std::vector<Task> tasks;

  std::size_t size() const { return tasks.size(); }
  const Task& operator[](std::size_t t) const { return tasks.at(t); }

  /// Scenarios of tasks 0..t in schedule order.
  std::vector<std::string> seen_scenarios(std::size_t t) const {
    std::vector<std::string> out;
    for (std::size_t k = 0; k <= t && k < tasks.size(); ++k)
      out.insert(out.end(), tasks[k].scenarios.begin(), tasks[k].scenarios.end());
    return out;
  }

  int task_of(const std::string& scenario) const {
    for (std::size_t t = 0; t < tasks.size(); ++t)
      if (tasks[t].contains(scenario)) return static_cast<int>(t);
    return -1;
  }
};

/// Scenarios sorted by descending training cardinality (ties alphabetical),
/// dealt into `task_count` contiguous groups of equal size.
inline TaskSchedule build_schedule(const Corpus& corpus, std::size_t task_count) {
  const auto names = corpus.scenario_names();
  require(task_count >= 1, ErrorKind::config, "task count must be >= 1");
  require(names.size() % task_count == 0, ErrorKind::config,
          std::to_string(names.size()) + " scenarios cannot be split into " + std::to_string(task_count) +
              " equal tasks");
  std::map<std::string, std::size_t> cardinality;
  for (const auto& n : names) cardinality[n] = 0;
  for (auto id : corpus.train) ++cardinality[corpus.at(id).scenario];
  std::vector<std::string> order = names;
  std::sort(order.begin(), order.end(), [&](const std::string& a, const std::string& b) {
    if (cardinality[a] != cardinality[b]) return cardinality[a] > cardinality[b];
    return a < b;
  });
  const std::size_t per = names.size() / task_count;
  TaskSchedule schedule;
  schedule.tasks.resize(task_count);
  std::map<std::string, std::size_t> task_index;
  for (std::size_t i = 0; i < order.size(); ++i) {
    schedule.tasks[i / per].scenarios.push_back(order[i]);
    task_index[order[i]] = i / per;
  }
  for (Split s : {Split::train, Split::valid, Split::test})
    for (auto id : corpus.ids(s)) {
      schedule.tasks[task_index.at(corpus.at(id).scenario)].ids(s).push_back(id);
    }
  return schedule;
}

// ---------------------------------------------------------------------------
// Exemplar selection

enum class Strategy { random, herding };

inline std::string_view to_string(Strategy s) { return s == Strategy::random ? "random" : "herding"; }

inline Strategy parse_strategy(std::string_view s) {
  if (s == "random") return Strategy::random;
  if (s == "herding" || s == "icarl") return Strategy::herding;
  fail(ErrorKind::config, "unknown selection strategy '" + std::string(s) + "'");
}

/// ceil(budget × total_train)
inline std::size_t buffer_capacity(double budget, std::size_t total_train) {
  require(budget > 0.0 && budget <= 1.0, ErrorKind::config, "rehearsal budget must be in (0, 1]");
  return static_cast<std::size_t>(std::ceil(budget * static_cast<double>(total_train) - 1e-9));
}

/// Equal split of `capacity` over scenarios (round robin in the given order,
/// capped by availability), at least one per non-empty scenario.
inline std::vector<std::size_t> allocate_quotas(const std::vector<std::size_t>& available, std::size_t capacity) {
  std::vector<std::size_t> q(available.size(), 0);
  std::size_t remaining = capacity;
  bool progress = true;
  while (remaining > 0 && progress) {
    progress = false;
    for (std::size_t i = 0; i < q.size() && remaining > 0; ++i)
      if (q[i] < available[i]) {
        ++q[i];
        --remaining;
        progress = true;
      }
  }
  for (std::size_t i = 0; i < q.size(); ++i)
    if (q[i] == 0 && available[i] > 0) q[i] = 1;
  return q;
}

/// iCaRL herding over one class: greedily append the candidate that brings the
/// running exemplar mean closest to the class mean. Ties go to the smaller id.
inline std::vector<std::uint32_t> herding_select(const std::vector<std::uint32_t>& candidates, std::size_t m,
                                                 const std::function<Tensor(std::uint32_t)>& embed) {
  require(m <= candidates.size(), ErrorKind::config, "herding: more exemplars requested than candidates");
  if (m == 0) return {};
  std::vector<Tensor> emb;
  emb.reserve(candidates.size());
  for (auto id : candidates) emb.push_back(embed(id));
  const std::size_t h = emb.front().size();
  std::vector<double> mu(h, 0.0);
  for (const auto& e : emb) {
    require(e.size() == h, ErrorKind::dimension, "herding: embeddings of unequal size");
    for (std::size_t d = 0; d < h; ++d) mu[d] += e.data[d];
  }
  for (double& x : mu) x /= static_cast<double>(emb.size());

  std::vector<double> running(h, 0.0);
  std::vector<bool> taken(candidates.size(), false);
  std::vector<std::uint32_t> out;
  for (std::size_t k = 1; k <= m; ++k) {
    std::size_t best = candidates.size();
    double best_dist = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      if (taken[i]) continue;
      double dist = 0.0;
      for (std::size_t d = 0; d < h; ++d) {
        const double diff = mu[d] - (running[d] + emb[i].data[d]) / static_cast<double>(k);
        dist += diff * diff;
      }
      if (best == candidates.size() || dist < best_dist ||
          (dist == best_dist && candidates[i] < candidates[best])) {
        best = i;
        best_dist = dist;
      }
    }
    taken[best] = true;
    for (std::size_t d = 0; d < h; ++d) running[d] += emb[best].data[d];
    out.push_back(candidates[best]);
  }
  return out;
}

/// Uniform sample of m ids without replacement, in sampled order.
inline std::vector<std::uint32_t> random_sample(std::vector<std::uint32_t> ids, std::size_t m, std::mt19937_64& rng) {
  require(m <= ids.size(), ErrorKind::config, "random selection: more exemplars requested than candidates");
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(m);
  return ids;
}

/// Random stratified selection from the given training ids with equal per-scenario allocation.
inline std::vector<std::uint32_t> random_select(const Corpus& corpus, const std::vector<std::uint32_t>& ids,
                                                double budget, std::size_t total_train, std::uint64_t seed) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::uint32_t>> groups;
  for (auto id : ids) {
    const auto& s = corpus.at(id).scenario;
    if (groups.find(s) == groups.end()) order.push_back(s);
    groups[s].push_back(id);
  }
  std::vector<std::size_t> avail;
  for (const auto& s : order) avail.push_back(groups[s].size());
  const auto quotas = allocate_quotas(avail, buffer_capacity(budget, total_train));
  std::mt19937_64 rng(seed);
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto pick = random_sample(groups[order[i]], quotas[i], rng);
    out.insert(out.end(), pick.begin(), pick.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rehearsal buffer

struct RehearsalBuffer {
  double budget = 0.01;
  Strategy strategy = Strategy::random;
  std::size_t total_train = 0;
  std::vector<std::pair<std::string, std::vector<std::uint32_t>>> groups;  // scenario → exemplars, schedule order
  std::vector<std::uint32_t> fresh;  // ids added by the last update

  std::size_t capacity() const { return buffer_capacity(budget, total_train); }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& g : groups) n += g.second.size();
    return n;
  }
  bool empty() const { return size() == 0; }

  std::vector<std::uint32_t> ids() const {
    std::vector<std::uint32_t> out;
    for (const auto& g : groups) out.insert(out.end(), g.second.begin(), g.second.end());
    return out;
  }

  bool contains(std::uint32_t id) const {
    for (const auto& g : groups)
      if (std::find(g.second.begin(), g.second.end(), id) != g.second.end()) return true;
    return false;
  }
};

/// Rebalance after finishing `task`: new scenarios select from their full
/// training data, earlier scenarios re-select among their retained exemplars.
/// Herding uses `embed` (the just-trained model); random truncates the stored order.
inline void update_buffer(RehearsalBuffer& buffer, const Corpus& corpus, const Task& task,
                          const std::function<Tensor(std::uint32_t)>& embed, std::mt19937_64& rng) {
  for (const auto& s : task.scenarios)
    for (const auto& g : buffer.groups)
      require(g.first != s, ErrorKind::usage, "buffer already holds scenario " + s + "; task completed twice?");
  std::vector<std::pair<std::string, std::vector<std::uint32_t>>> pools = buffer.groups;
  for (const auto& s : task.scenarios) {
    std::vector<std::uint32_t> ids;
    for (auto id : task.train)
      if (corpus.at(id).scenario == s) ids.push_back(id);
    pools.emplace_back(s, std::move(ids));
  }
  std::vector<std::size_t> avail;
  for (const auto& p : pools) avail.push_back(p.second.size());
  const auto quotas = allocate_quotas(avail, buffer.capacity());

  const std::size_t old_groups = buffer.groups.size();
  buffer.fresh.clear();
  std::vector<std::pair<std::string, std::vector<std::uint32_t>>> next;
  for (std::size_t i = 0; i < pools.size(); ++i) {
    const auto& [name, pool] = pools[i];
    std::vector<std::uint32_t> chosen;
    if (buffer.strategy == Strategy::herding) {
      chosen = herding_select(pool, quotas[i], embed);
    } else if (i < old_groups) {
      chosen.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(quotas[i]));
    } else {
      chosen = random_sample(pool, quotas[i], rng);
    }
    if (i >= old_groups) buffer.fresh.insert(buffer.fresh.end(), chosen.begin(), chosen.end());
    next.emplace_back(name, std::move(chosen));
  }
  buffer.groups = std::move(next);
}

inline nlohmann::json to_json(const RehearsalBuffer& b) {
  nlohmann::json j;
  j["budget"] = b.budget;
  j["strategy"] = to_string(b.strategy);
  j["total_train"] = b.total_train;
  j["groups"] = nlohmann::json::array();
  for (const auto& [s, ids] : b.groups) j["groups"].push_back({{"scenario", s}, {"ids", ids}});
  j["fresh"] = b.fresh;
  return j;
}

inline RehearsalBuffer buffer_from_json(const nlohmann::json& j) {
  try {
    RehearsalBuffer b;
    b.budget = j.at("budget").get<double>();
    b.strategy = parse_strategy(j.at("strategy").get<std::string>());
    b.total_train = j.at("total_train").get<std::size_t>();
    for (const auto& g : j.at("groups"))
      b.groups.emplace_back(g.at("scenario").get<std::string>(), g.at("ids").get<std::vector<std::uint32_t>>());
    b.fresh = j.value("fresh", std::vector<std::uint32_t>{});
    return b;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::integrity, std::string("rehearsal buffer: ") + e.what());
  }
}

}  // namespace cilslu
