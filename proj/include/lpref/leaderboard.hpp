#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "lpref/energy.hpp"
#include "lpref/error.hpp"

namespace lpref {

inline constexpr double kDefaultTieEpsilon = 0.001;

enum class Track { kTrack1 = 1, kTrack2 = 2, kTrack3 = 3 };

inline std::string to_string(Track t) { return "Track" + std::to_string(static_cast<int>(t)); }

inline Track parse_track(const std::string& s) {
  if (s == "Track1" || s == "1") return Track::kTrack1;
  if (s == "Track2" || s == "2") return Track::kTrack2;
  if (s == "Track3" || s == "3") return Track::kTrack3;
  throw Error(ErrorKind::kInvalidInput, "unknown track '" + s + "' (Track1|Track2|Track3)");
}

struct LeaderboardEntry {
  std::string team_id;
  Track track = Track::kTrack2;
  double score = 0;
  // Track 2/3: mAP and energy (Wh). Track 1: test metric and latency (ms).
  double primary = 0;
  double secondary = 0;
  std::string run_id;
  std::int64_t timestamp_ms = 0;

  friend bool operator==(const LeaderboardEntry&, const LeaderboardEntry&) = default;
};

inline double recompute_score(const LeaderboardEntry& e) {
  return e.track == Track::kTrack1 ? e.primary : compute_score(e.primary, e.secondary);
}

inline void to_json(nlohmann::json& j, const LeaderboardEntry& e) {
  j = {{"run_id", e.run_id},         {"team_id", e.team_id},
       {"track", to_string(e.track)}, {"score", e.score},
       {"primary", e.primary},        {"secondary", e.secondary},
       {"timestamp_ms", e.timestamp_ms}};
}

inline void from_json(const nlohmann::json& j, LeaderboardEntry& e) {
  j.at("run_id").get_to(e.run_id);
  j.at("team_id").get_to(e.team_id);
  e.track = parse_track(j.at("track").get<std::string>());
  j.at("score").get_to(e.score);
  j.at("primary").get_to(e.primary);
  j.at("secondary").get_to(e.secondary);
  j.at("timestamp_ms").get_to(e.timestamp_ms);
}

struct RankedEntry {
  LeaderboardEntry entry;
  int prize_group = 0;  // 1-based; shared by near-tied neighbours
};

namespace detail {
using RankKey = std::tuple<double, const std::string&, int, const std::string&,
                           std::int64_t, double, double>;

inline RankKey rank_key(const LeaderboardEntry& e) {
  return {-e.score, e.team_id, static_cast<int>(e.track), e.run_id, e.timestamp_ms,
          -e.primary, e.secondary};
}
}  // namespace detail

// Descending score; a new prize group starts whenever the gap to the previous
// entry exceeds `tie_epsilon`. Groups are numbered 1, 2, 3, ... (dense).
inline std::vector<RankedEntry> rank(std::span<const LeaderboardEntry> entries,
                                     double tie_epsilon = kDefaultTieEpsilon) {
  if (!(tie_epsilon >= 0)) {
    throw Error(ErrorKind::kInvalidInput, "tie epsilon must be >= 0");
  }
  std::vector<LeaderboardEntry> sorted(entries.begin(), entries.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    return detail::rank_key(a) < detail::rank_key(b);
  });
  std::vector<RankedEntry> out;
  out.reserve(sorted.size());
  int group = 0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (i == 0 || sorted[i - 1].score - sorted[i].score > tie_epsilon) ++group;
    out.push_back({std::move(sorted[i]), group});
  }
  return out;
}

// Highest-scoring entry for each (team, track); earliest timestamp on ties.
inline std::vector<LeaderboardEntry> best_per_team(std::span<const LeaderboardEntry> entries) {
  std::map<std::pair<std::string, Track>, LeaderboardEntry> best;
  for (const auto& e : entries) {
    auto [it, inserted] = best.try_emplace({e.team_id, e.track}, e);
    if (inserted) continue;
    auto& cur = it->second;
    if (e.score > cur.score ||
        (e.score == cur.score &&
         std::tie(e.timestamp_ms, e.run_id) < std::tie(cur.timestamp_ms, cur.run_id))) {
      cur = e;
    }
  }
  std::vector<LeaderboardEntry> out;
  out.reserve(best.size());
  for (auto& [key, e] : best) out.push_back(std::move(e));
  return out;
}

inline std::string ordinal(int n) {
  const int mod100 = n % 100;
  const char* suffix = "th";
  if (mod100 < 11 || mod100 > 13) {
    switch (n % 10) {
      case 1: suffix = "st"; break;
      case 2: suffix = "nd"; break;
      case 3: suffix = "rd"; break;
      default: break;
    }
  }
  return std::to_string(n) + suffix;
}

// Aligned text table with 4-decimal scores.
inline std::string format_ranked_table(std::span<const RankedEntry> ranked) {
  std::size_t team_w = 4;
  for (const auto& r : ranked) team_w = std::max(team_w, r.entry.team_id.size());
  std::ostringstream os;
  os << std::left << std::setw(6) << "Prize" << std::setw(static_cast<int>(team_w) + 2) << "Team"
     << std::setw(8) << "Track" << std::right << std::setw(10) << "Accuracy" << std::setw(12)
     << "Cost" << std::setw(10) << "Score" << '\n';
  for (const auto& r : ranked) {
    const auto& e = r.entry;
    os << std::left << std::setw(6) << ordinal(r.prize_group)
       << std::setw(static_cast<int>(team_w) + 2) << e.team_id << std::setw(8) << to_string(e.track)
       << std::right << std::fixed << std::setprecision(4) << std::setw(10) << e.primary
       << std::setw(12) << e.secondary << std::setw(10) << e.score << '\n';
    os.unsetf(std::ios::fixed);
  }
  return os.str();
}

inline std::string format_ranked_csv(std::span<const RankedEntry> ranked) {
  std::ostringstream os;
  os << "prize_group,team_id,track,primary,secondary,score,run_id,timestamp_ms\n";
  os << std::setprecision(17);
  for (const auto& r : ranked) {
    const auto& e = r.entry;
    os << r.prize_group << ',' << e.team_id << ',' << to_string(e.track) << ',' << e.primary
       << ',' << e.secondary << ',' << e.score << ',' << e.run_id << ',' << e.timestamp_ms
       << '\n';
  }
  return os.str();
}

struct RunFilter {
  std::optional<std::string> team_id;
  std::optional<Track> track;
};

// Append-only store: `runs.jsonl` indexes entries, `reports/<run_id>.json`
// holds each report verbatim. One writer at a time.
class RunStore {
 public:
  explicit RunStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

  const std::filesystem::path& dir() const { return dir_; }

  // Assigns the run id (overwriting entry.run_id) and returns it.
  std::string persist_run(LeaderboardEntry entry, const std::string& report) {
    namespace fs = std::filesystem;
    std::lock_guard lock(mu_);
    std::error_code ec;
    fs::create_directories(dir_ / "reports", ec);
    if (ec) throw Error(ErrorKind::kIo, "cannot create '" + (dir_ / "reports").string() + "': " + ec.message());

    std::size_t seq = list_all_locked().size() + 1;
    fs::path report_path;
    do {
      char buf[32];
      std::snprintf(buf, sizeof buf, "run-%06zu", seq++);
      entry.run_id = buf;
      report_path = dir_ / "reports" / (entry.run_id + ".json");
    } while (fs::exists(report_path));

    {
      std::ofstream out(report_path, std::ios::binary);
      out << report;
      if (!out) throw Error(ErrorKind::kIo, "cannot write report '" + report_path.string() + "'");
    }
    const auto index = dir_ / "runs.jsonl";
    std::ofstream idx(index, std::ios::app | std::ios::binary);
    idx << nlohmann::json(entry).dump() << '\n';
    idx.flush();
    if (!idx) throw Error(ErrorKind::kIo, "cannot append to '" + index.string() + "'");
    return entry.run_id;
  }

  std::string read_report(const std::string& run_id) const {
    const auto path = dir_ / "reports" / (run_id + ".json");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::kIo, "cannot read report '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }

  std::vector<LeaderboardEntry> list_runs(const RunFilter& filter = {}) const {
    std::lock_guard lock(mu_);
    std::vector<LeaderboardEntry> out;
    for (auto& e : list_all_locked()) {
      if (filter.team_id && e.team_id != *filter.team_id) continue;
      if (filter.track && e.track != *filter.track) continue;
      out.push_back(std::move(e));
    }
    return out;
  }

 private:
  std::vector<LeaderboardEntry> list_all_locked() const {
    std::vector<LeaderboardEntry> out;
    const auto index = dir_ / "runs.jsonl";
    std::ifstream in(index, std::ios::binary);
    if (!in) return out;
    std::string content{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    std::size_t pos = 0;
    std::size_t line_no = 0;
    for (auto nl = content.find('\n'); nl != std::string::npos;
         pos = nl + 1, nl = content.find('\n', pos)) {
      ++line_no;
      const auto line = content.substr(pos, nl - pos);
      if (line.empty()) continue;
      try {
        out.push_back(nlohmann::json::parse(line).get<LeaderboardEntry>());
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::kParse,
                    index.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    return out;
  }

  std::filesystem::path dir_;
  mutable std::mutex mu_;
};

}  // namespace lpref
