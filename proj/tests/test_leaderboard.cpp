#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "lpref/leaderboard.hpp"
#include "support.hpp"

namespace lpref {
namespace {

LeaderboardEntry entry(std::string team, double score, Track track = Track::kTrack3) {
  LeaderboardEntry e;
  e.team_id = std::move(team);
  e.track = track;
  e.score = score;
  return e;
}

std::vector<int> groups_of(const std::vector<RankedEntry>& ranked) {
  std::vector<int> g;
  for (const auto& r : ranked) g.push_back(r.prize_group);
  return g;
}

TEST(Rank, PublishedNearTie) {
  const std::vector<LeaderboardEntry> in{entry("d", 0.14556), entry("b", 0.39701),
                                         entry("a", 0.44462), entry("c", 0.39664)};
  const auto ranked = rank(in, 0.001);
  ASSERT_EQ(ranked.size(), 4u);
  EXPECT_EQ(ranked[0].entry.team_id, "a");
  EXPECT_EQ(ranked[1].entry.team_id, "b");
  EXPECT_EQ(ranked[2].entry.team_id, "c");
  EXPECT_EQ(groups_of(ranked), (std::vector<int>{1, 2, 2, 3}));
  EXPECT_EQ(ordinal(ranked[2].prize_group), "2nd");
  EXPECT_EQ(ordinal(ranked[3].prize_group), "3rd");
}

TEST(Rank, StrictWithZeroEpsilon) {
  const std::vector<LeaderboardEntry> in{entry("a", 0.3), entry("b", 0.2), entry("c", 0.1),
                                         entry("d", 0.4)};
  EXPECT_EQ(groups_of(rank(in, 0.0)), (std::vector<int>{1, 2, 3, 4}));
}

TEST(Rank, EqualScoresShareGroup) {
  const std::vector<LeaderboardEntry> in{entry("z", 0.25), entry("y", 0.25), entry("x", 0.5)};
  for (double eps : {0.0, 1e-9, 0.001, 0.5}) {
    const auto ranked = rank(in, eps);
    EXPECT_EQ(ranked[1].prize_group, ranked[2].prize_group);
    EXPECT_EQ(ranked[1].entry.team_id, "y");
  }
}

TEST(Rank, ConsecutiveDifferenceRuleOnly) {
  // Each neighbour gap is within epsilon although the ends differ by more.
  const std::vector<LeaderboardEntry> in{entry("a", 0.5000), entry("b", 0.4992),
                                         entry("c", 0.4984), entry("d", 0.4960)};
  EXPECT_EQ(groups_of(rank(in, 0.001)), (std::vector<int>{1, 1, 1, 2}));
}

TEST(Rank, NegativeEpsilonRejected) {
  EXPECT_THROW(rank({}, -0.1), Error);
}

TEST(RankProperty, PermutationInvariantAndRuleHolds) {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 400; ++trial) {
    std::vector<LeaderboardEntry> in;
    const int n = static_cast<int>(rng() % 12);
    for (int i = 0; i < n; ++i) {
      auto e = entry("team" + std::to_string(rng() % 6), static_cast<double>(rng() % 50) / 1000.0,
                     static_cast<Track>(1 + rng() % 3));
      e.run_id = "run-" + std::to_string(rng() % 4);
      e.timestamp_ms = static_cast<std::int64_t>(rng() % 3);
      in.push_back(e);
    }
    const double eps = static_cast<double>(rng() % 4) / 1000.0;
    const auto base = rank(in, eps);
    auto shuffled = in;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto again = rank(shuffled, eps);
    ASSERT_EQ(base.size(), again.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
      EXPECT_EQ(base[i].entry, again[i].entry);
      EXPECT_EQ(base[i].prize_group, again[i].prize_group);
    }
    for (std::size_t i = 1; i < base.size(); ++i) {
      const double gap = base[i - 1].entry.score - base[i].entry.score;
      EXPECT_GE(gap, 0.0);
      EXPECT_EQ(base[i].prize_group, base[i - 1].prize_group + (gap > eps ? 1 : 0));
    }
  }
}

TEST(BestPerTeam, KeepsHighestPerTeamAndTrack) {
  auto a1 = entry("a", 0.2, Track::kTrack2);
  auto a2 = entry("a", 0.3, Track::kTrack2);
  auto a3 = entry("a", 0.1, Track::kTrack3);
  auto b1 = entry("b", 0.3, Track::kTrack2);
  b1.timestamp_ms = 5;
  auto b2 = entry("b", 0.3, Track::kTrack2);
  b2.timestamp_ms = 2;
  const std::vector<LeaderboardEntry> in{a1, a2, a3, b1, b2};
  const auto best = best_per_team(in);
  ASSERT_EQ(best.size(), 3u);
  EXPECT_EQ(best[0], a2);
  EXPECT_EQ(best[1], a3);
  EXPECT_EQ(best[2], b2);
}

TEST(LeaderboardEntry, ScoreReproducibleFromComponents) {
  LeaderboardEntry e = entry("a", 0.0, Track::kTrack2);
  e.primary = 0.38981;
  e.secondary = 1.540;
  e.score = compute_score(e.primary, e.secondary);
  const auto back = nlohmann::json::parse(nlohmann::json(e).dump()).get<LeaderboardEntry>();
  EXPECT_EQ(back, e);
  EXPECT_NEAR(recompute_score(back), back.score, 1e-9 * back.score);
}

TEST(Ordinal, Suffixes) {
  EXPECT_EQ(ordinal(1), "1st");
  EXPECT_EQ(ordinal(11), "11th");
  EXPECT_EQ(ordinal(22), "22nd");
  EXPECT_EQ(ordinal(113), "113th");
}

TEST(FormatRanked, TableAndCsv) {
  auto e = entry("tsinghua", 0.44462, Track::kTrack3);
  e.primary = 0.1832;
  e.secondary = 0.4120;
  const auto ranked = rank(std::vector<LeaderboardEntry>{e});
  EXPECT_NE(format_ranked_table(ranked).find("0.4446"), std::string::npos);
  EXPECT_NE(format_ranked_csv(ranked).find("1,tsinghua,Track3,0.1832"), std::string::npos);
}

TEST(RunStore, PersistThenReadIsByteIdentical) {
  testing::TempDir dir("store");
  RunStore store(dir.path());
  const std::string report = "{\n  \"map\": 0.1,\n  \"weird\": \"\\u00e9\\r\\n\"\n}\n\x01";
  const auto id = store.persist_run(entry("a", 0.1), report);
  EXPECT_EQ(id, "run-000001");
  EXPECT_EQ(store.read_report(id), report);
  EXPECT_EQ(RunStore(dir.path()).read_report(id), report);
  EXPECT_EQ(store.list_runs().at(0).run_id, id);
}

TEST(RunStore, UnknownTeamFilterIsEmpty) {
  testing::TempDir dir("store");
  RunStore store(dir.path());
  store.persist_run(entry("a", 0.1), "{}");
  EXPECT_TRUE(store.list_runs({.team_id = "nobody", .track = {}}).empty());
  EXPECT_TRUE(RunStore(dir / "empty").list_runs().empty());
}

TEST(RunStore, TrackFilterOverTenRuns) {
  testing::TempDir dir("store");
  RunStore store(dir.path());
  std::vector<std::string> track2_ids;
  for (int i = 0; i < 10; ++i) {
    const Track t = static_cast<Track>(1 + (i * 7) % 3);
    const auto id = store.persist_run(entry("t" + std::to_string(i % 4), 0.01 * i, t),
                                      "{\"i\":" + std::to_string(i) + "}");
    if (t == Track::kTrack2) track2_ids.push_back(id);
  }
  const auto got = store.list_runs({.team_id = {}, .track = Track::kTrack2});
  std::vector<std::string> ids;
  for (const auto& e : got) {
    EXPECT_EQ(e.track, Track::kTrack2);
    ids.push_back(e.run_id);
  }
  EXPECT_EQ(ids, track2_ids);
  EXPECT_EQ(store.list_runs().size(), 10u);
  EXPECT_EQ(store.list_runs({.team_id = "t1", .track = Track::kTrack2}).size(),
            static_cast<std::size_t>(std::count_if(got.begin(), got.end(),
                                                   [](const auto& e) { return e.team_id == "t1"; })));
}

TEST(RunStore, MissingReportNamesPath) {
  testing::TempDir dir("store");
  try {
    RunStore(dir.path()).read_report("run-000042");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIo);
    EXPECT_NE(std::string(e.what()).find("run-000042.json"), std::string::npos);
  }
}

}  // namespace
}  // namespace lpref
