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

#include <cilslu/cil.hpp>

#include <gtest/gtest.h>

#include "oracles.hpp"

#include <cmath>
#include <map>
#include <random>
#include <set>

namespace cilslu {
namespace {

const Corpus& corpus() {
  static const Corpus c = [] {
    CorpusSpec spec = default_corpus_spec();
    spec.total_samples = 2400;
    spec.seed = 4;
    return generate_corpus(spec);
  }();
  return c;
}

std::map<std::string, std::size_t> train_cardinality(const Corpus& c) {
  std::map<std::string, std::size_t> n;
  for (auto id : c.train) ++n[c.at(id).scenario];
  return n;
}

TEST(Schedule, TaskSizes) {
  for (std::size_t T : {3u, 6u}) {
    const auto s = build_schedule(corpus(), T);
    ASSERT_EQ(s.size(), T);
    for (const auto& t : s.tasks) EXPECT_EQ(t.scenarios.size(), 18 / T);
  }
  EXPECT_EQ(build_schedule(corpus(), 1).tasks[0].scenarios.size(), 18u);
  try {
    build_schedule(corpus(), 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
}

TEST(Schedule, PartitionAndOrdering) {
  const auto card = train_cardinality(corpus());
  const auto s = build_schedule(corpus(), 6);
  std::set<std::string> all;
  for (const auto& t : s.tasks)
    for (const auto& sc : t.scenarios) EXPECT_TRUE(all.insert(sc).second);
  EXPECT_EQ(all.size(), 18u);
  for (std::size_t t = 0; t + 1 < s.size(); ++t) {
    for (const auto& a : s[t].scenarios)
      for (const auto& b : s[t + 1].scenarios) EXPECT_GE(card.at(a), card.at(b));
    EXPECT_GE(s[t].train.size(), s[t + 1].train.size());
  }
  for (Split sp : {Split::train, Split::valid, Split::test}) {
    std::size_t n = 0;
    for (const auto& t : s.tasks) {
      n += t.ids(sp).size();
      for (auto id : t.ids(sp)) EXPECT_TRUE(t.contains(corpus().at(id).scenario));
    }
    EXPECT_EQ(n, corpus().ids(sp).size());
  }
}

TEST(Schedule, TiesAreAlphabetical) {
  CorpusSpec spec = default_corpus_spec();
  for (auto& sc : spec.scenarios) sc.frequency = 1.0;
  spec.total_samples = 18 * 50;
  const Corpus c = generate_corpus(spec);
  const auto s = build_schedule(c, 3);
  std::vector<std::string> flat;
  for (const auto& t : s.tasks) flat.insert(flat.end(), t.scenarios.begin(), t.scenarios.end());
  auto sorted = flat;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(flat, sorted);
}

TEST(Quota, EqualAllocation) {
  EXPECT_EQ(allocate_quotas({10, 10, 10}, 7), (std::vector<std::size_t>{3, 2, 2}));
  EXPECT_EQ(allocate_quotas({1, 10, 10}, 7), (std::vector<std::size_t>{1, 3, 3}));
  EXPECT_EQ(allocate_quotas({5, 5, 5, 5}, 2), (std::vector<std::size_t>{1, 1, 1, 1}));
  EXPECT_EQ(allocate_quotas({2, 0}, 9), (std::vector<std::size_t>{2, 0}));
}

TEST(RandomSelect, FullBudgetKeepsEverything) {
  const auto& c = corpus();
  auto got = random_select(c, c.train, 1.0, c.train.size(), 3);
  std::sort(got.begin(), got.end());
  EXPECT_EQ(got, c.train);
}

TEST(RandomSelect, OnePercentOfSixHundred) {
  const auto& c = corpus();
  const auto s = build_schedule(c, 3);
  std::vector<std::uint32_t> seen;
  std::map<std::string, std::size_t> per;
  for (auto id : s[0].train) {
    if (per[c.at(id).scenario] < 100) seen.push_back(id);
    ++per[c.at(id).scenario];
  }
  ASSERT_EQ(seen.size(), 600u);
  const auto got = random_select(c, seen, 0.01, 600, 9);
  ASSERT_EQ(got.size(), 6u);
  std::set<std::string> scen;
  for (auto id : got) scen.insert(c.at(id).scenario);
  EXPECT_EQ(scen.size(), 6u);
  EXPECT_EQ(random_select(c, seen, 0.01, 600, 9), got);
  EXPECT_EQ(random_select(c, seen, 0.1, 600, 9), random_select(c, seen, 0.1, 600, 9));
  EXPECT_NE(random_select(c, seen, 0.1, 600, 9), random_select(c, seen, 0.1, 600, 10));
}

TEST(RandomSelect, BudgetMustBeInUnitInterval) {
  EXPECT_THROW(random_select(corpus(), corpus().train, 0.0, 10, 1), Error);
  EXPECT_THROW(random_select(corpus(), corpus().train, 1.5, 10, 1), Error);
}

// --- herding ---------------------------------------------------------------

std::function<Tensor(std::uint32_t)> table_embed(const std::map<std::uint32_t, std::vector<double>>& points) {
  return [points](std::uint32_t id) {
    const auto& p = points.at(id);
    return Tensor({1, p.size()}, p);
  };
}

double dist2(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

TEST(Herding, SingleExemplarIsClosestToMean) {
  const std::map<std::uint32_t, std::vector<double>> pts{{0, {0, 0}}, {1, {4, 0}}, {2, {1, 1}}, {3, {3, 3}}};
  // mean (2, 1): distances 5, 5, 1, 5
  EXPECT_EQ(herding_select({0, 1, 2, 3}, 1, table_embed(pts)), (std::vector<std::uint32_t>{2}));
  EXPECT_TRUE(herding_select({0, 1, 2, 3}, 0, table_embed(pts)).empty());
  EXPECT_THROW(herding_select({0, 1}, 3, table_embed(pts)), Error);
}

TEST(Herding, DuplicatesFavourEarlierId) {
  const std::map<std::uint32_t, std::vector<double>> pts{{3, {1, 1}}, {7, {1, 1}}, {9, {5, 5}}};
  EXPECT_EQ(herding_select({3, 7, 9}, 1, table_embed(pts)), (std::vector<std::uint32_t>{3}));
}

TEST(Herding, MatchesExhaustiveGreedyOracle) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::map<std::uint32_t, std::vector<double>> pts;
    std::vector<std::uint32_t> ids;
    for (std::uint32_t i = 0; i < 5; ++i) {
      pts[i * 3 + 1] = {n(rng), n(rng)};
      ids.push_back(i * 3 + 1);
    }
    std::vector<double> mu(2, 0.0);
    for (const auto& [id, p] : pts)
      for (int d = 0; d < 2; ++d) mu[static_cast<std::size_t>(d)] += p[static_cast<std::size_t>(d)] / 5.0;
    // enumerate every ordered pair and keep the lexicographically greedy one
    std::uint32_t best_a = 0, best_b = 0;
    double best1 = 1e300, best2 = 1e300;
    for (auto a : ids) {
      const double d1 = dist2(mu, pts[a]);
      for (auto b : ids) {
        if (a == b) continue;
        const std::vector<double> m2{(pts[a][0] + pts[b][0]) / 2, (pts[a][1] + pts[b][1]) / 2};
        const double d2 = dist2(mu, m2);
        if (d1 < best1 || (d1 == best1 && d2 < best2)) {
          best1 = d1;
          best2 = d2;
          best_a = a;
          best_b = b;
        }
      }
    }
    EXPECT_EQ(herding_select(ids, 2, table_embed(pts)), (std::vector<std::uint32_t>{best_a, best_b}));
  }
}

TEST(Herding, MatchesStepwiseGreedyOracle) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<int> count(1, 10), dim(2, 8);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t c = static_cast<std::size_t>(count(rng)), h = static_cast<std::size_t>(dim(rng));
    std::vector<std::uint32_t> ids;
    std::vector<std::vector<double>> points;
    std::map<std::uint32_t, std::vector<double>> table;
    for (std::size_t i = 0; i < c; ++i) {
      std::vector<double> p(h);
      for (double& x : p) x = std::round(n(rng) * 2.0) / 2.0;  // coarse grid forces ties
      if (i > 0 && trial % 3 == 0) p = points[i - 1];
      ids.push_back(static_cast<std::uint32_t>(100 - 7 * i));
      points.push_back(p);
      table[ids.back()] = p;
    }
    for (std::size_t m = 0; m <= c; ++m)
      EXPECT_EQ(herding_select(ids, m, table_embed(table)), testing::greedy_herding(ids, points, m));
  }
}

TEST(Herding, PrefixConsistent) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  std::map<std::uint32_t, std::vector<double>> pts;
  std::vector<std::uint32_t> ids;
  for (std::uint32_t i = 0; i < 40; ++i) {
    pts[i] = {n(rng), n(rng), n(rng), n(rng)};
    ids.push_back(i);
  }
  const auto full = herding_select(ids, 25, table_embed(pts));
  std::set<std::uint32_t> distinct(full.begin(), full.end());
  EXPECT_EQ(distinct.size(), 25u);
  for (std::size_t k = 0; k <= 25; k += 5) {
    const auto part = herding_select(ids, k, table_embed(pts));
    EXPECT_TRUE(std::equal(part.begin(), part.end(), full.begin()));
  }
}

// --- buffer ----------------------------------------------------------------

std::function<Tensor(std::uint32_t)> feature_embed() {
  return [](std::uint32_t id) {
    const Tensor& f = corpus().at(id).features;
    std::vector<double> m(f.cols(), 0.0);
    for (std::size_t r = 0; r < f.rows(); ++r)
      for (std::size_t c = 0; c < f.cols(); ++c) m[c] += f(r, c) / static_cast<double>(f.rows());
    return Tensor({1, m.size()}, m);
  };
}

void check_buffer_run(Strategy strategy, double budget, std::size_t T, std::uint64_t seed) {
  const auto& c = corpus();
  const auto schedule = build_schedule(c, T);
  RehearsalBuffer buf;
  buf.budget = budget;
  buf.strategy = strategy;
  buf.total_train = c.train.size();
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < T; ++t) {
    const auto seen = schedule.seen_scenarios(t);
    update_buffer(buf, c, schedule[t], feature_embed(), rng);
    ASSERT_EQ(buf.groups.size(), seen.size());
    EXPECT_LE(buf.size(), std::max(buf.capacity(), seen.size()));
    std::size_t lo = SIZE_MAX, hi = 0;
    for (std::size_t g = 0; g < buf.groups.size(); ++g) {
      EXPECT_EQ(buf.groups[g].first, seen[g]);
      lo = std::min(lo, buf.groups[g].second.size());
      hi = std::max(hi, buf.groups[g].second.size());
      for (auto id : buf.groups[g].second) {
        EXPECT_EQ(c.at(id).scenario, seen[g]);
        EXPECT_LE(static_cast<std::size_t>(schedule.task_of(c.at(id).scenario)), t);
        EXPECT_NE(std::find(c.train.begin(), c.train.end(), id), c.train.end());
      }
    }
    EXPECT_LE(hi - lo, 1u);
    EXPECT_GE(lo, 1u);
    auto ids = buf.ids();
    std::sort(ids.begin(), ids.end());
    EXPECT_EQ(std::adjacent_find(ids.begin(), ids.end()), ids.end());
  }
}

TEST(Buffer, AllocationAfterFirstTask) {
  const auto& c = corpus();
  const auto schedule = build_schedule(c, 3);
  RehearsalBuffer buf;
  buf.budget = 0.05;
  buf.total_train = c.train.size();
  std::mt19937_64 rng(1);
  update_buffer(buf, c, schedule[0], feature_embed(), rng);
  const double per = 0.05 * static_cast<double>(c.train.size()) / 6.0;
  ASSERT_EQ(buf.groups.size(), 6u);
  for (const auto& g : buf.groups) EXPECT_LE(std::abs(static_cast<double>(g.second.size()) - per), 1.0);
  EXPECT_EQ(buf.fresh.size(), buf.size());
  update_buffer(buf, c, schedule[1], feature_embed(), rng);
  update_buffer(buf, c, schedule[2], feature_embed(), rng);
  EXPECT_EQ(buf.groups.size(), 18u);
  EXPECT_THROW(update_buffer(buf, c, schedule[2], feature_embed(), rng), Error);
}

TEST(Buffer, RandomTruncationKeepsPrefix) {
  const auto& c = corpus();
  const auto schedule = build_schedule(c, 3);
  RehearsalBuffer buf;
  buf.budget = 0.05;
  buf.total_train = c.train.size();
  std::mt19937_64 rng(1);
  update_buffer(buf, c, schedule[0], feature_embed(), rng);
  const auto before = buf.groups;
  update_buffer(buf, c, schedule[1], feature_embed(), rng);
  for (std::size_t g = 0; g < before.size(); ++g) {
    const auto& now = buf.groups[g].second;
    EXPECT_LT(now.size(), before[g].second.size());
    EXPECT_TRUE(std::equal(now.begin(), now.end(), before[g].second.begin()));
  }
}

TEST(Buffer, SimulationNeverExceedsBudget) {
  for (Strategy s : {Strategy::random, Strategy::herding})
    for (double b : {0.01, 0.05, 0.3})
      for (std::size_t T : {3u, 6u}) check_buffer_run(s, b, T, 17);
}

TEST(Buffer, JsonRoundtrip) {
  const auto& c = corpus();
  const auto schedule = build_schedule(c, 3);
  RehearsalBuffer buf;
  buf.budget = 0.05;
  buf.strategy = Strategy::herding;
  buf.total_train = c.train.size();
  std::mt19937_64 rng(1);
  update_buffer(buf, c, schedule[0], feature_embed(), rng);
  const auto back = buffer_from_json(nlohmann::json::parse(to_json(buf).dump()));
  EXPECT_EQ(back.groups, buf.groups);
  EXPECT_EQ(back.fresh, buf.fresh);
  EXPECT_EQ(back.strategy, Strategy::herding);
  EXPECT_EQ(back.capacity(), buf.capacity());
  EXPECT_THROW(buffer_from_json(nlohmann::json{{"budget", 0.1}}), Error);
}

}  // namespace
}  // namespace cilslu
