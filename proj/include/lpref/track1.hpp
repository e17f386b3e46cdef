#pragma once

// Track-1 latency-budget classification metrics and duplicate elimination of
// model submissions by content digest.

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <mutex>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "lpref/error.hpp"

namespace lpref {

inline constexpr double kDefaultBudgetPerImageMs = 30.0;

struct Track1Record {
  std::string image_id;
  double latency_ms = 0;
  bool correct = false;
};

struct Track1Run {
  std::vector<Track1Record> records;  // processing order
  std::size_t n_total = 0;
  double budget_per_image_ms = kDefaultBudgetPerImageMs;
};

struct Track1Scores {
  double test_metric = 0;
  double accuracy_on_classified = 0;
  std::size_t num_classified = 0;
  std::size_t num_correct_classified = 0;
  double accuracy_over_time = 0;  // per ms
  double wall_time_ms = 0;
  double total_inference_ms = 0;
  double mean_latency_ms = 0;
};

// Images run back to back on one core; an image counts as classified when
// the running sum of latencies up to and including it stays within
// budget * n_total. Missing images are unclassified and wrong.
inline Track1Scores evaluate_track1(const Track1Run& run) {
  if (run.n_total == 0) {
    throw Error(ErrorKind::kInvalidInput, "track1: n_total must be > 0");
  }
  if (run.records.empty()) {
    throw Error(ErrorKind::kInvalidInput, "track1: run has no records");
  }
  if (run.records.size() > run.n_total) {
    throw Error(ErrorKind::kInvalidInput,
                "track1: more records (" + std::to_string(run.records.size()) +
                    ") than n_total (" + std::to_string(run.n_total) + ")");
  }
  if (!(std::isfinite(run.budget_per_image_ms) && run.budget_per_image_ms > 0)) {
    throw Error(ErrorKind::kInvalidInput, "track1: budget must be > 0 ms");
  }

  Track1Scores s;
  s.wall_time_ms = run.budget_per_image_ms * static_cast<double>(run.n_total);
  bool within = true;
  for (const auto& r : run.records) {
    if (!(std::isfinite(r.latency_ms) && r.latency_ms > 0)) {
      throw Error(ErrorKind::kInvalidInput,
                  "track1: latency for '" + r.image_id + "' must be finite and > 0");
    }
    s.total_inference_ms += r.latency_ms;
    within = within && s.total_inference_ms <= s.wall_time_ms;
    if (within) {
      ++s.num_classified;
      if (r.correct) ++s.num_correct_classified;
    }
  }
  s.mean_latency_ms = s.total_inference_ms / static_cast<double>(run.records.size());
  const auto correct = static_cast<double>(s.num_correct_classified);
  s.test_metric = correct / static_cast<double>(run.n_total);
  s.accuracy_on_classified =
      s.num_classified == 0 ? 0.0 : correct / static_cast<double>(s.num_classified);
  s.accuracy_over_time =
      s.accuracy_on_classified / std::max(s.total_inference_ms, s.wall_time_ms);
  return s;
}

// Header `n_total=<int> budget_ms=<real>`, then `<image_id>,<latency_ms>,<0|1>`.
inline Track1Run parse_track1_run(std::istream& in,
                                  const std::string& source = "<track1>") {
  Track1Run run;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  auto fail = [&](const std::string& msg) {
    throw Error(ErrorKind::kParse,
                source + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos || line[0] == '#') {
      continue;
    }
    if (!have_header) {
      std::istringstream h(line);
      std::string a, b;
      if (!(h >> a >> b) || a.rfind("n_total=", 0) != 0 ||
          b.rfind("budget_ms=", 0) != 0) {
        fail("expected header 'n_total=<int> budget_ms=<real>'");
      }
      try {
        std::size_t used = 0;
        const long long n = std::stoll(a.substr(8), &used);
        if (used != a.size() - 8 || n < 0) fail("bad n_total");
        run.n_total = static_cast<std::size_t>(n);
        run.budget_per_image_ms = std::stod(b.substr(10), &used);
        if (used != b.size() - 10) fail("bad budget_ms");
      } catch (const std::logic_error&) {
        fail("bad header value");
      }
      have_header = true;
      continue;
    }
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string::npos || line.find(',', c2 + 1) != std::string::npos) {
      fail("expected '<image_id>,<latency_ms>,<0|1>'");
    }
    Track1Record rec;
    rec.image_id = line.substr(0, c1);
    const std::string latency = line.substr(c1 + 1, c2 - c1 - 1);
    const std::string flag = line.substr(c2 + 1);
    try {
      std::size_t used = 0;
      rec.latency_ms = std::stod(latency, &used);
      if (used != latency.size()) fail("bad latency '" + latency + "'");
    } catch (const std::logic_error&) {
      fail("bad latency '" + latency + "'");
    }
    if (flag != "0" && flag != "1") fail("correctness flag must be 0 or 1");
    rec.correct = flag == "1";
    if (rec.image_id.empty()) fail("empty image id");
    run.records.push_back(std::move(rec));
  }
  if (!have_header) fail("missing header");
  return run;
}

inline Track1Run load_track1_run(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open track1 run '" + path + "'");
  return parse_track1_run(in, path);
}

// ---------------------------------------------------------------------------
// Submission digests

// MD5 of the bytes, lowercase hex. Used only as an equality key.
inline std::string md5_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_md5(), nullptr) != 1) {
    throw Error(ErrorKind::kIo, "md5 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string md5_file_hex(const std::filesystem::path& path) {
  return md5_hex(read_file_bytes(path));
}

struct SubmissionRecord {
  std::string content_digest;
  double test_metric = 0;
  std::string submitter;
  std::int64_t received_at_ms = 0;

  friend bool operator==(const SubmissionRecord&, const SubmissionRecord&) = default;
};

// One record per digest: the best test metric, earliest receipt on ties.
// Output follows the first appearance of each digest in the input.
inline std::vector<SubmissionRecord> dedup_submissions(
    std::span<const SubmissionRecord> records) {
  std::vector<SubmissionRecord> kept;
  std::unordered_map<std::string, std::size_t> slot;
  for (const auto& r : records) {
    auto [it, inserted] = slot.try_emplace(r.content_digest, kept.size());
    if (inserted) {
      kept.push_back(r);
      continue;
    }
    auto& cur = kept[it->second];
    if (r.test_metric > cur.test_metric ||
        (r.test_metric == cur.test_metric && r.received_at_ms < cur.received_at_ms)) {
      cur = r;
    }
  }
  return kept;
}

// `<submitter>,<received_at_ms>,<test_metric>,<digest>`; a digest field of
// `@<path>` is replaced by the MD5 of that file (relative to `base_dir`).
inline std::vector<SubmissionRecord> parse_submissions(
    std::istream& in, const std::filesystem::path& base_dir,
    const std::string& source = "<submissions>") {
  std::vector<SubmissionRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos || line[0] == '#') continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    const auto where = source + ":" + std::to_string(line_no) + ": ";
    if (f.size() != 4) {
      throw Error(ErrorKind::kParse,
                  where + "expected '<submitter>,<received_at_ms>,<test_metric>,<digest>'");
    }
    SubmissionRecord r;
    r.submitter = f[0];
    try {
      std::size_t used = 0;
      r.received_at_ms = std::stoll(f[1], &used);
      if (used != f[1].size()) throw std::invalid_argument("trailing");
      r.test_metric = std::stod(f[2], &used);
      if (used != f[2].size()) throw std::invalid_argument("trailing");
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::kParse, where + "bad numeric field");
    }
    if (!f[3].empty() && f[3][0] == '@') {
      r.content_digest = md5_file_hex(base_dir / f[3].substr(1));
    } else {
      r.content_digest = f[3];
    }
    if (r.content_digest.empty()) throw Error(ErrorKind::kParse, where + "empty digest");
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<SubmissionRecord> load_submissions(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open submissions '" + path.string() + "'");
  return parse_submissions(in, path.parent_path(), path.string());
}

inline void to_json(nlohmann::json& j, const SubmissionRecord& r) {
  j = {{"digest", r.content_digest},
       {"test_metric", r.test_metric},
       {"submitter", r.submitter},
       {"received_at_ms", r.received_at_ms}};
}

inline void from_json(const nlohmann::json& j, SubmissionRecord& r) {
  j.at("digest").get_to(r.content_digest);
  j.at("test_metric").get_to(r.test_metric);
  j.at("submitter").get_to(r.submitter);
  j.at("received_at_ms").get_to(r.received_at_ms);
}

// Append-only JSON-lines ledger of submissions. Writes are serialized; a
// snapshot reads only complete lines.
class SubmissionLedger {
 public:
  explicit SubmissionLedger(std::filesystem::path path) : path_(std::move(path)) {}

  void append(const SubmissionRecord& record) {
    std::lock_guard lock(mu_);
    std::ofstream out(path_, std::ios::app | std::ios::binary);
    if (!out) throw Error(ErrorKind::kIo, "cannot append to ledger '" + path_.string() + "'");
    out << nlohmann::json(record).dump() << '\n';
    out.flush();
    if (!out) throw Error(ErrorKind::kIo, "write failed on ledger '" + path_.string() + "'");
  }

  std::vector<SubmissionRecord> snapshot() const {
    std::vector<SubmissionRecord> out;
    std::ifstream in(path_, std::ios::binary);
    if (!in) return out;
    std::string content{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    std::size_t pos = 0;
    while (true) {
      const auto nl = content.find('\n', pos);
      if (nl == std::string::npos) break;  // trailing partial line
      const auto line = content.substr(pos, nl - pos);
      pos = nl + 1;
      if (line.empty()) continue;
      out.push_back(nlohmann::json::parse(line).get<SubmissionRecord>());
    }
    return out;
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
};

}  // namespace lpref
