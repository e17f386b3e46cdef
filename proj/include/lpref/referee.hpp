#pragma once

// Transport-independent referee: roster, image catalog, timed sessions,
// answer collection and the finalization of a closed session into a report.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "lpref/dataset.hpp"
#include "lpref/energy.hpp"
#include "lpref/error.hpp"
#include "lpref/leaderboard.hpp"
#include "lpref/scoring.hpp"

namespace lpref {

// Each team has ten minutes to process the whole test set.
inline constexpr std::int64_t kMaxWindowMs = 600'000;

// Milliseconds on the referee's authoritative clock.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual std::int64_t now_ms() const = 0;
};

class SteadyClock final : public Clock {
 public:
  SteadyClock() : origin_(std::chrono::steady_clock::now()) {}
  std::int64_t now_ms() const override {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::steady_clock::now() - origin_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point origin_;
};

class ManualClock final : public Clock {
 public:
  explicit ManualClock(std::int64_t start_ms = 0) : now_(start_ms) {}
  std::int64_t now_ms() const override { return now_.load(); }
  void set(std::int64_t ms) { now_.store(ms); }
  void advance(std::int64_t ms) { now_.fetch_add(ms); }

 private:
  std::atomic<std::int64_t> now_;
};

// ---------------------------------------------------------------------------
// Catalog and roster

struct CatalogImage {
  std::string image_id;
  std::string media_type;
  std::string payload;          // used when `path` is empty
  std::filesystem::path path;   // read on demand otherwise
};

inline std::string media_type_for(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".png") return "image/png";
  if (ext == ".pgm") return "image/x-portable-graymap";
  if (ext == ".ppm") return "image/x-portable-pixmap";
  return "application/octet-stream";
}

class ImageCatalog {
 public:
  ImageCatalog() = default;

  explicit ImageCatalog(std::vector<CatalogImage> images) : images_(std::move(images)) {
    for (std::size_t i = 0; i < images_.size(); ++i) {
      if (images_[i].image_id.empty()) {
        throw Error(ErrorKind::kValidation, "catalog entry " + std::to_string(i + 1) + " has an empty id");
      }
      if (!index_.emplace(images_[i].image_id, i + 1).second) {
        throw Error(ErrorKind::kValidation, "duplicate image id '" + images_[i].image_id + "' in catalog");
      }
    }
  }

  std::size_t size() const { return images_.size(); }
  bool contains(const std::string& image_id) const { return index_.count(image_id) != 0; }

  // 1-based.
  const CatalogImage& at(std::size_t index) const {
    if (index < 1 || index > images_.size()) {
      throw Error(ErrorKind::kNotFound, "image index " + std::to_string(index) +
                                            " out of range 1.." + std::to_string(images_.size()));
    }
    return images_[index - 1];
  }

  std::string payload(std::size_t index) const {
    const auto& img = at(index);
    return img.path.empty() ? img.payload : read_file_bytes(img.path);
  }

 private:
  std::vector<CatalogImage> images_;
  std::unordered_map<std::string, std::size_t> index_;
};

// `<image_id> <path>` per line, in serving order; paths relative to the file.
inline ImageCatalog load_catalog(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open catalog '" + path.string() + "'");
  std::vector<CatalogImage> images;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::skippable(line)) continue;
    const auto f = detail::split_ws(line);
    if (f.size() != 2) {
      throw Error(ErrorKind::kParse, path.string() + ":" + std::to_string(line_no) +
                                         ": expected '<image_id> <path>'");
    }
    auto file = path.parent_path() / f[1];
    std::error_code ec;
    if (!std::filesystem::is_regular_file(file, ec)) {
      throw Error(ErrorKind::kIo, path.string() + ":" + std::to_string(line_no) +
                                      ": image file '" + file.string() + "' not found");
    }
    images.push_back({f[0], media_type_for(file), {}, file});
  }
  return ImageCatalog(std::move(images));
}

inline bool valid_team_id(std::string_view id) {
  return !id.empty() && id.size() <= 64 &&
         std::all_of(id.begin(), id.end(), [](unsigned char c) {
           return std::isalnum(c) || c == '_' || c == '-' || c == '.';
         });
}

// team_id -> credential.
using Roster = std::map<std::string, std::string>;

// `<team_id> <credential>` per line.
inline Roster load_roster(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open roster '" + path.string() + "'");
  Roster roster;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::skippable(line)) continue;
    const auto f = detail::split_ws(line);
    if (f.size() != 2 || !valid_team_id(f[0])) {
      throw Error(ErrorKind::kParse, path.string() + ":" + std::to_string(line_no) +
                                         ": expected '<team_id> <credential>'");
    }
    roster[f[0]] = f[1];
  }
  return roster;
}

// ---------------------------------------------------------------------------
// Sessions

enum class SessionState { kCreated, kActive, kClosed, kExpired };

inline std::string to_string(SessionState s) {
  switch (s) {
    case SessionState::kCreated: return "Created";
    case SessionState::kActive: return "Active";
    case SessionState::kClosed: return "Closed";
    case SessionState::kExpired: return "Expired";
  }
  return "?";
}

inline SessionState parse_session_state(const std::string& s) {
  if (s == "Created") return SessionState::kCreated;
  if (s == "Active") return SessionState::kActive;
  if (s == "Closed") return SessionState::kClosed;
  if (s == "Expired") return SessionState::kExpired;
  throw Error(ErrorKind::kParse, "unknown session state '" + s + "'");
}

struct LateRejection {
  std::int64_t received_ms = 0;  // since session epoch
  std::size_t detections = 0;
};

// Immutable view of a session; what gets persisted and scored.
struct SessionRecord {
  std::string session_id;
  std::string team_id;
  SessionState state = SessionState::kCreated;
  std::int64_t login_at_ms = 0;   // referee clock
  std::int64_t window_end_ms = 0; // since session epoch; 0 while Active
  std::int64_t window_ms = kMaxWindowMs;
  std::size_t n_images = 0;
  std::vector<std::size_t> images_served;
  std::size_t images_answered = 0;
  std::size_t posts_accepted = 0;
  std::vector<Detection> detections;  // scoring order (receipt order)
  std::vector<LateRejection> late_rejections;
};

struct LoginResult {
  std::string token;
  std::string session_id;
  std::int64_t window_start_ms = 0;
  std::size_t n_images = 0;
};

struct ImageResponse {
  std::string image_id;
  std::string media_type;
  std::string bytes;
};

struct FinalWindow {
  std::string session_id;
  SessionState state = SessionState::kClosed;
  std::int64_t window_start_ms = 0;
  std::int64_t window_end_ms = 0;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(std::vector<LineError> errors)
      : Error(ErrorKind::kValidation, summarize(errors)), errors_(std::move(errors)) {}
  const std::vector<LineError>& errors() const { return errors_; }

 private:
  static std::string summarize(const std::vector<LineError>& errors) {
    std::string s = "rejected " + std::to_string(errors.size()) + " invalid record(s)";
    for (const auto& e : errors) s += "; line " + std::to_string(e.line) + ": " + e.message;
    return s;
  }
  std::vector<LineError> errors_;
};

struct RefereeOptions {
  std::int64_t window_ms = kMaxWindowMs;
};

class Referee {
 public:
  Referee(ImageCatalog catalog, Roster roster, LabelSpace labels, const Clock& clock,
          RefereeOptions options = {})
      : catalog_(std::move(catalog)),
        roster_(std::move(roster)),
        labels_(std::move(labels)),
        clock_(clock),
        options_(options),
        rng_(std::random_device{}()) {
    if (options_.window_ms <= 0 || options_.window_ms > kMaxWindowMs) {
      throw Error(ErrorKind::kInvalidInput, "session window must be in (0, 600000] ms");
    }
  }

  const ImageCatalog& catalog() const { return catalog_; }
  const LabelSpace& labels() const { return labels_; }
  std::int64_t window_ms() const { return options_.window_ms; }

  LoginResult login(const std::string& team_id, const std::string& credential) {
    const auto now = clock_.now_ms();
    std::lock_guard lock(mu_);
    auto rit = roster_.find(team_id);
    if (rit == roster_.end() || rit->second != credential) {
      throw Error(ErrorKind::kAuth, "unknown team or bad credential");
    }
    if (auto it = active_by_team_.find(team_id); it != active_by_team_.end()) {
      auto& prev = *it->second;
      std::lock_guard slock(prev.mu);
      expire_if_due(prev, now);
      if (prev.state == SessionState::kActive) {
        throw Error(ErrorKind::kConflict, "team '" + team_id + "' already has an active session");
      }
    }
    auto s = std::make_shared<Session>();
    s->team_id = team_id;
    s->session_id = next_session_id(team_id);
    s->token = new_token();
    s->state = SessionState::kCreated;
    s->login_at_ms = now;
    s->state = SessionState::kActive;
    by_token_[s->token] = s;
    active_by_team_[team_id] = s;
    return {s->token, s->session_id, 0, catalog_.size()};
  }

  ImageResponse get_image(const std::string& token, std::size_t index) {
    const auto now = clock_.now_ms();
    auto s = find(token);
    std::lock_guard lock(s->mu);
    require_active(*s, now);
    const auto& img = catalog_.at(index);
    ImageResponse out{img.image_id, img.media_type, catalog_.payload(index)};
    s->images_served.insert(index);
    return out;
  }

  // Detections for each image replace any earlier answer for that image.
  std::size_t post_result(const std::string& token, std::string_view body,
                          const std::optional<std::string>& only_image = std::nullopt) {
    const auto now = clock_.now_ms();
    auto s = find(token);
    std::lock_guard lock(s->mu);
    if (!admit_post(*s, now, body)) {
      throw Error(ErrorKind::kSessionOver, "session window is over; answer rejected");
    }
    auto parsed = parse_detection_lines(body, labels_, [this](const std::string& id) {
      return catalog_.contains(id);
    });
    if (only_image) {
      if (!catalog_.contains(*only_image)) {
        parsed.errors.push_back({0, "image_id (unknown image '" + *only_image + "')"});
      }
      for (const auto& d : parsed.detections) {
        if (d.image_id != *only_image) {
          parsed.errors.push_back({0, "image_id ('" + d.image_id + "' differs from query image '" +
                                          *only_image + "')"});
        }
      }
    }
    if (!parsed.errors.empty()) throw ValidationError(std::move(parsed.errors));
    store(*s, std::move(parsed.detections), only_image);
    return s->last_accepted;
  }

  std::size_t post_result(const std::string& token, const std::string& image_id,
                          std::vector<Detection> detections) {
    std::string body;
    for (const auto& d : detections) {
      if (d.image_id != image_id) {
        throw Error(ErrorKind::kValidation, "detection image '" + d.image_id +
                                                "' differs from posted image '" + image_id + "'");
      }
      body += format_detection_line(d);
      body += '\n';
    }
    return post_result(token, body, image_id);
  }

  FinalWindow logout(const std::string& token) {
    const auto now = clock_.now_ms();
    auto s = find(token);
    std::lock_guard lock(s->mu);
    expire_if_due(*s, now);
    if (s->state != SessionState::kActive) {
      throw Error(ErrorKind::kSession, "session " + s->session_id + " is already " +
                                           to_string(s->state));
    }
    end_session(*s, SessionState::kClosed, now - s->login_at_ms);
    return {s->session_id, s->state, 0, s->window_end_ms};
  }

  // Expires every session whose window has run out.
  void sweep() {
    const auto now = clock_.now_ms();
    for (auto& s : all_sessions()) {
      std::lock_guard lock(s->mu);
      expire_if_due(*s, now);
    }
  }

  // Ends every active session now (server shutdown).
  void shutdown() {
    const auto now = clock_.now_ms();
    for (auto& s : all_sessions()) {
      std::lock_guard lock(s->mu);
      expire_if_due(*s, now);
      if (s->state == SessionState::kActive) {
        end_session(*s, SessionState::kExpired,
                    std::min(now - s->login_at_ms, options_.window_ms));
      }
    }
  }

  // Sessions that ended since the last call, in the order they ended.
  std::vector<SessionRecord> take_finished() {
    std::lock_guard lock(finished_mu_);
    return std::exchange(finished_, {});
  }

  SessionRecord snapshot(const std::string& token) {
    auto s = find(token);
    std::lock_guard lock(s->mu);
    return record_of(*s);
  }

 private:
  struct Answer {
    std::vector<std::pair<std::uint64_t, Detection>> detections;  // (ordinal, det)
  };

  struct Session {
    std::mutex mu;
    std::string session_id;
    std::string team_id;
    std::string token;
    SessionState state = SessionState::kCreated;
    std::int64_t login_at_ms = 0;
    std::int64_t window_end_ms = 0;
    std::map<std::string, Answer> answers;
    std::set<std::size_t> images_served;
    std::vector<LateRejection> late_rejections;
    std::uint64_t next_ordinal = 0;
    std::size_t posts_accepted = 0;
    std::size_t last_accepted = 0;
  };

  std::shared_ptr<Session> find(const std::string& token) {
    std::lock_guard lock(mu_);
    auto it = by_token_.find(token);
    if (it == by_token_.end()) throw Error(ErrorKind::kAuth, "unknown session token");
    return it->second;
  }

  std::vector<std::shared_ptr<Session>> all_sessions() {
    std::lock_guard lock(mu_);
    std::vector<std::shared_ptr<Session>> out;
    out.reserve(by_token_.size());
    for (auto& [token, s] : by_token_) out.push_back(s);
    return out;
  }

  // Caller holds s.mu.
  void expire_if_due(Session& s, std::int64_t now) {
    if (s.state == SessionState::kActive && now - s.login_at_ms > options_.window_ms) {
      end_session(s, SessionState::kExpired, options_.window_ms);
    }
  }

  void require_active(Session& s, std::int64_t now) {
    expire_if_due(s, now);
    if (s.state != SessionState::kActive) {
      throw Error(ErrorKind::kSessionOver,
                  "session " + s.session_id + " is " + to_string(s.state));
    }
  }

  // Late posts are logged on the session, never stored.
  bool admit_post(Session& s, std::int64_t now, std::string_view body) {
    expire_if_due(s, now);
    if (s.state == SessionState::kActive) return true;
    const auto parsed = parse_detection_lines(body, labels_);
    s.late_rejections.push_back({now - s.login_at_ms, parsed.detections.size()});
    // Keep a not-yet-collected record in step with the live session.
    std::lock_guard lock(finished_mu_);
    for (auto& r : finished_) {
      if (r.session_id == s.session_id) r.late_rejections = s.late_rejections;
    }
    return false;
  }

  void store(Session& s, std::vector<Detection> detections,
             const std::optional<std::string>& only_image) {
    std::map<std::string, Answer> fresh;
    if (only_image) fresh[*only_image];
    for (auto& d : detections) {
      auto id = d.image_id;
      fresh[id].detections.emplace_back(s.next_ordinal++, std::move(d));
    }
    s.last_accepted = detections.size();
    for (auto& [id, ans] : fresh) s.answers[id] = std::move(ans);
    ++s.posts_accepted;
  }

  void end_session(Session& s, SessionState state, std::int64_t end_rel_ms) {
    s.state = state;
    s.window_end_ms = std::clamp<std::int64_t>(end_rel_ms, 0, options_.window_ms);
    std::lock_guard lock(finished_mu_);
    finished_.push_back(record_of(s));
  }

  SessionRecord record_of(const Session& s) const {
    SessionRecord r;
    r.session_id = s.session_id;
    r.team_id = s.team_id;
    r.state = s.state;
    r.login_at_ms = s.login_at_ms;
    r.window_end_ms = s.window_end_ms;
    r.window_ms = options_.window_ms;
    r.n_images = catalog_.size();
    r.images_served.assign(s.images_served.begin(), s.images_served.end());
    r.posts_accepted = s.posts_accepted;
    r.late_rejections = s.late_rejections;
    std::vector<std::pair<std::uint64_t, Detection>> flat;
    for (const auto& [id, ans] : s.answers) {
      ++r.images_answered;
      flat.insert(flat.end(), ans.detections.begin(), ans.detections.end());
    }
    std::sort(flat.begin(), flat.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    r.detections.reserve(flat.size());
    for (auto& [ord, d] : flat) r.detections.push_back(std::move(d));
    return r;
  }

  std::string next_session_id(const std::string& team_id) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04zu", ++session_counter_);
    return team_id + "-" + buf;
  }

  std::string new_token() {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string t;
    for (int i = 0; i < 32; ++i) t.push_back(kHex[rng_() & 0xF]);
    return t;
  }

  ImageCatalog catalog_;
  Roster roster_;
  LabelSpace labels_;
  const Clock& clock_;
  RefereeOptions options_;

  std::mutex mu_;  // by_token_, active_by_team_, counters, rng_
  std::unordered_map<std::string, std::shared_ptr<Session>> by_token_;
  std::unordered_map<std::string, std::shared_ptr<Session>> active_by_team_;
  std::size_t session_counter_ = 0;
  std::mt19937_64 rng_;

  std::mutex finished_mu_;
  std::vector<SessionRecord> finished_;
};

// ---------------------------------------------------------------------------
// Session persistence

inline nlohmann::json session_json(const SessionRecord& r) {
  nlohmann::json late = nlohmann::json::array();
  for (const auto& l : r.late_rejections) {
    late.push_back({{"received_ms", l.received_ms}, {"detections", l.detections}});
  }
  return {{"session_id", r.session_id},
          {"team_id", r.team_id},
          {"state", to_string(r.state)},
          {"login_at_ms", r.login_at_ms},
          {"window_start_ms", 0},
          {"window_end_ms", r.window_end_ms},
          {"window_ms", r.window_ms},
          {"n_images", r.n_images},
          {"images_served", r.images_served},
          {"images_answered", r.images_answered},
          {"posts_accepted", r.posts_accepted},
          {"late_rejections", late}};
}

// Writes `session.json` and `answers.txt` (result-line format, scoring order).
inline void save_session(const SessionRecord& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create '" + dir.string() + "': " + ec.message());
  {
    std::ofstream out(dir / "session.json", std::ios::binary);
    out << session_json(r).dump(2) << '\n';
    if (!out) throw Error(ErrorKind::kIo, "cannot write '" + (dir / "session.json").string() + "'");
  }
  std::ofstream out(dir / "answers.txt", std::ios::binary);
  for (const auto& d : r.detections) out << format_detection_line(d) << '\n';
  if (!out) throw Error(ErrorKind::kIo, "cannot write '" + (dir / "answers.txt").string() + "'");
}

inline SessionRecord load_session(const std::filesystem::path& dir, const LabelSpace& labels) {
  const auto meta_path = dir / "session.json";
  std::ifstream in(meta_path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + meta_path.string() + "'");
  SessionRecord r;
  try {
    const auto j = nlohmann::json::parse(in);
    j.at("session_id").get_to(r.session_id);
    j.at("team_id").get_to(r.team_id);
    r.state = parse_session_state(j.at("state").get<std::string>());
    j.at("login_at_ms").get_to(r.login_at_ms);
    j.at("window_end_ms").get_to(r.window_end_ms);
    j.at("window_ms").get_to(r.window_ms);
    j.at("n_images").get_to(r.n_images);
    j.at("images_served").get_to(r.images_served);
    j.at("images_answered").get_to(r.images_answered);
    j.at("posts_accepted").get_to(r.posts_accepted);
    for (const auto& l : j.at("late_rejections")) {
      r.late_rejections.push_back({l.at("received_ms").get<std::int64_t>(),
                                   l.at("detections").get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, meta_path.string() + ": " + e.what());
  }
  const auto answers = read_file_bytes(dir / "answers.txt");
  auto parsed = parse_detection_lines(answers, labels);
  if (!parsed.errors.empty()) throw ValidationError(std::move(parsed.errors));
  r.detections = std::move(parsed.detections);
  return r;
}

// ---------------------------------------------------------------------------
// Finalization

struct NamedClassScore {
  ClassScore score;
  std::string name;
};

struct RunReport {
  std::string session_id;
  std::string team_id;
  Track track = Track::kTrack2;
  SessionState state = SessionState::kClosed;
  std::int64_t login_at_ms = 0;
  std::int64_t window_start_ms = 0;
  std::int64_t window_end_ms = 0;
  double map = 0;
  std::vector<NamedClassScore> per_class;
  double energy_wh = 0;
  double score = 0;
  std::size_t n_images = 0;
  std::size_t images_served = 0;
  std::size_t images_answered = 0;
  std::size_t detections = 0;
  std::size_t late_rejected_posts = 0;
  std::vector<std::string> notes;
};

struct FinalizeOptions {
  Track track = Track::kTrack2;
  double max_gap_ms = kDefaultMaxGapMs;
  double iou_threshold = kDefaultIouThreshold;
};

// Scores every ground-truth object (unanswered images are misses) and
// integrates the trace over the session window.
inline RunReport finalize_session(const SessionRecord& session, const GroundTruthSet& gts,
                                  const PowerTrace& trace, const FinalizeOptions& options = {}) {
  if (session.state != SessionState::kClosed && session.state != SessionState::kExpired) {
    throw Error(ErrorKind::kSession, "session " + session.session_id + " is still " +
                                         to_string(session.state));
  }
  RunReport rep;
  rep.session_id = session.session_id;
  rep.team_id = session.team_id;
  rep.track = options.track;
  rep.state = session.state;
  rep.login_at_ms = session.login_at_ms;
  rep.window_end_ms = session.window_end_ms;

  if (session.window_end_ms <= rep.window_start_ms) {
    throw Error(ErrorKind::kDivisionGuard, "session " + session.session_id +
                                               " has an empty window; no energy, score undefined");
  }
  const auto scored = mean_average_precision(session.detections, gts.objects, gts.label_space,
                                             options.iou_threshold);
  rep.map = scored.map;
  for (const auto& c : scored.per_class) {
    rep.per_class.push_back({c, gts.label_space.name(c.category_id)});
  }
  rep.energy_wh = integrate_energy(
      trace, {static_cast<double>(rep.window_start_ms), static_cast<double>(rep.window_end_ms)});
  rep.score = compute_score(rep.map, rep.energy_wh);

  rep.n_images = session.n_images;
  rep.images_served = session.images_served.size();
  rep.images_answered = session.images_answered;
  rep.detections = session.detections.size();
  rep.late_rejected_posts = session.late_rejections.size();

  rep.notes.push_back("power trace assumed aligned to the referee clock (login = 0 ms)");
  for (const auto& g : find_gaps(trace, options.max_gap_ms)) {
    if (g.to_ms < rep.window_start_ms || g.from_ms > rep.window_end_ms) continue;
    std::ostringstream os;
    os << "power trace gap " << g.from_ms << ".." << g.to_ms << " ms exceeds " << options.max_gap_ms
       << " ms";
    rep.notes.push_back(os.str());
  }
  return rep;
}

inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : r.per_class) {
    classes.push_back({{"category_id", c.score.category_id},
                       {"name", c.name},
                       {"ap", c.score.ap},
                       {"num_gt", c.score.num_gt},
                       {"num_tp", c.score.num_tp},
                       {"num_fp", c.score.num_fp}});
  }
  return {{"session_id", r.session_id},
          {"team_id", r.team_id},
          {"track", to_string(r.track)},
          {"state", to_string(r.state)},
          {"login_at_ms", r.login_at_ms},
          {"window_start_ms", r.window_start_ms},
          {"window_end_ms", r.window_end_ms},
          {"map", r.map},
          {"energy_wh", r.energy_wh},
          {"score", r.score},
          {"per_class", classes},
          {"counts",
           {{"n_images", r.n_images},
            {"images_served", r.images_served},
            {"images_answered", r.images_answered},
            {"detections", r.detections},
            {"late_rejected_posts", r.late_rejected_posts}}},
          {"notes", r.notes}};
}

inline LeaderboardEntry to_leaderboard_entry(const RunReport& r) {
  LeaderboardEntry e;
  e.team_id = r.team_id;
  e.track = r.track;
  e.score = r.score;
  e.primary = r.map;
  e.secondary = r.energy_wh;
  e.timestamp_ms = r.login_at_ms;
  return e;
}

inline std::string format_report_table(const RunReport& r) {
  std::ostringstream os;
  os << "session " << r.session_id << " team " << r.team_id << " (" << to_string(r.state)
     << ", window 0.." << r.window_end_ms << " ms)\n";
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(10) << "mAP" << std::setw(10) << "Energy" << "Score\n";
  os << std::setw(10) << r.map << std::setw(10) << r.energy_wh << r.score << '\n';
  os << "images served " << r.images_served << "/" << r.n_images << ", answered "
     << r.images_answered << ", detections " << r.detections << ", late posts rejected "
     << r.late_rejected_posts << '\n';
  os << std::right << std::setw(8) << "class" << std::setw(10) << "AP" << std::setw(8) << "GT"
     << std::setw(8) << "TP" << std::setw(8) << "FP" << "  name\n";
  for (const auto& c : r.per_class) {
    os << std::setw(8) << c.score.category_id << std::setw(10) << c.score.ap << std::setw(8)
       << c.score.num_gt << std::setw(8) << c.score.num_tp << std::setw(8) << c.score.num_fp
       << "  " << c.name << '\n';
  }
  for (const auto& n : r.notes) os << "note: " << n << '\n';
  return os.str();
}

// Persists ended sessions and, when a trace is available, scores them.
class SessionArchiver {
 public:
  struct Outcome {
    std::filesystem::path session_dir;
    std::optional<RunReport> report;
    std::optional<std::string> run_id;
    std::string detail;  // why no report, when there is none
  };

  SessionArchiver(std::filesystem::path sessions_dir, std::optional<std::filesystem::path> trace_dir,
                  const GroundTruthSet& gts, RunStore& store, FinalizeOptions options = {})
      : sessions_dir_(std::move(sessions_dir)),
        trace_dir_(std::move(trace_dir)),
        gts_(gts),
        store_(store),
        options_(options) {}

  // Trace lookup: <trace_dir>/<session_id>.csv, then <trace_dir>/<team_id>.csv.
  std::optional<std::filesystem::path> trace_for(const SessionRecord& r) const {
    if (!trace_dir_) return std::nullopt;
    for (const auto& name : {r.session_id, r.team_id}) {
      auto p = *trace_dir_ / (name + ".csv");
      std::error_code ec;
      if (std::filesystem::is_regular_file(p, ec)) return p;
    }
    return std::nullopt;
  }

  Outcome archive(const SessionRecord& r) {
    Outcome out;
    out.session_dir = sessions_dir_ / r.session_id;
    save_session(r, out.session_dir);
    const auto trace_path = trace_for(r);
    if (!trace_path) {
      out.detail = "no power trace found; score later with score-session";
      return out;
    }
    auto report = finalize_session(r, gts_, load_power_trace(trace_path->string()), options_);
    const auto text = to_json(report).dump(2) + "\n";
    {
      std::ofstream f(out.session_dir / "report.json", std::ios::binary);
      f << text;
      if (!f) throw Error(ErrorKind::kIo, "cannot write '" + (out.session_dir / "report.json").string() + "'");
    }
    out.run_id = store_.persist_run(to_leaderboard_entry(report), text);
    out.report = std::move(report);
    return out;
  }

 private:
  std::filesystem::path sessions_dir_;
  std::optional<std::filesystem::path> trace_dir_;
  const GroundTruthSet& gts_;
  RunStore& store_;
  FinalizeOptions options_;
};

// ---------------------------------------------------------------------------
// Server configuration (JSON; relative paths resolve against the file)

struct ServeConfig {
  std::filesystem::path catalog;
  std::filesystem::path ground_truth;
  std::optional<std::filesystem::path> labels;
  Roster roster;
  std::int64_t window_ms = kMaxWindowMs;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path sessions_dir = "sessions";
  std::filesystem::path runs_dir = "runs";
  std::optional<std::filesystem::path> trace_dir;
  Track track = Track::kTrack2;
  double max_gap_ms = kDefaultMaxGapMs;
  int threads = 8;
};

inline ServeConfig parse_serve_config(const nlohmann::json& j, const std::filesystem::path& base) {
  ServeConfig c;
  auto path_of = [&](const char* key) { return base / j.at(key).get<std::string>(); };
  try {
    c.catalog = path_of("catalog");
    c.ground_truth = path_of("ground_truth");
    if (j.contains("labels")) c.labels = path_of("labels");
    const auto& roster = j.at("roster");
    if (roster.is_string()) {
      c.roster = load_roster(base / roster.get<std::string>());
    } else {
      for (const auto& t : roster) {
        const auto id = t.at("team_id").get<std::string>();
        if (!valid_team_id(id)) throw Error(ErrorKind::kValidation, "invalid team_id '" + id + "'");
        c.roster[id] = t.at("credential").get<std::string>();
      }
    }
    c.window_ms = j.value("window_ms", kMaxWindowMs);
    if (j.contains("listen")) {
      c.host = j["listen"].value("host", c.host);
      c.port = j["listen"].value("port", c.port);
    }
    if (j.contains("sessions_dir")) c.sessions_dir = path_of("sessions_dir");
    else c.sessions_dir = base / c.sessions_dir;
    if (j.contains("runs_dir")) c.runs_dir = path_of("runs_dir");
    else c.runs_dir = base / c.runs_dir;
    if (j.contains("trace_dir")) c.trace_dir = path_of("trace_dir");
    if (j.contains("track")) c.track = parse_track(j["track"].get<std::string>());
    c.max_gap_ms = j.value("max_gap_ms", c.max_gap_ms);
    c.threads = j.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("config: ") + e.what());
  }
  if (c.window_ms <= 0 || c.window_ms > kMaxWindowMs) {
    throw Error(ErrorKind::kValidation, "config: window_ms must be in (0, 600000]");
  }
  if (c.roster.empty()) throw Error(ErrorKind::kValidation, "config: roster is empty");
  return c;
}

inline ServeConfig load_serve_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, path.string() + ": " + e.what());
  }
  return parse_serve_config(j, path.parent_path());
}

}  // namespace lpref
