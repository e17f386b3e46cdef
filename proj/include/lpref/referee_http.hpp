#pragma once

// HTTP/1.1 binding of the referee (login, image fetch, result post, logout),
// the long-running service wrapper used by `serve`, and the reference
// contestant client.

#include <spdlog/spdlog.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "lpref/dataset.hpp"
#include "lpref/error.hpp"
#include "lpref/referee.hpp"

namespace lpref {

inline int http_status_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kAuth: return 401;
    case ErrorKind::kConflict: return 409;
    case ErrorKind::kSession: return 409;
    case ErrorKind::kSessionOver: return 410;
    case ErrorKind::kNotFound: return 404;
    case ErrorKind::kValidation: return 422;
    case ErrorKind::kParse:
    case ErrorKind::kInvalidInput: return 400;
    default: return 500;
  }
}

inline ErrorKind error_kind_for_status(int status) {
  switch (status) {
    case 401: return ErrorKind::kAuth;
    case 404: return ErrorKind::kNotFound;
    case 409: return ErrorKind::kSession;
    case 410: return ErrorKind::kSessionOver;
    case 422: return ErrorKind::kValidation;
    case 400: return ErrorKind::kParse;
    default: return ErrorKind::kIo;
  }
}

inline nlohmann::json final_window_json(const FinalWindow& w) {
  return {{"session_id", w.session_id},
          {"state", to_string(w.state)},
          {"window_start_ms", w.window_start_ms},
          {"window_end_ms", w.window_end_ms}};
}

class RefereeHttpServer {
 public:
  explicit RefereeHttpServer(Referee& referee, int threads = 8) : referee_(referee) {
    server_.new_task_queue = [threads] {
      return new httplib::ThreadPool(static_cast<std::size_t>(std::max(1, threads)));
    };
    server_.set_tcp_nodelay(true);
    routes();
  }

  // Returns the bound port (an ephemeral one when `port` is 0).
  int bind(const std::string& host, int port) {
    if (port == 0) {
      const int bound = server_.bind_to_any_port(host);
      if (bound <= 0) throw Error(ErrorKind::kIo, "cannot bind " + host + ":0");
      return bound;
    }
    if (!server_.bind_to_port(host, port)) {
      throw Error(ErrorKind::kIo, "cannot bind " + host + ":" + std::to_string(port));
    }
    return port;
  }

  // Blocks until stop().
  void listen() { server_.listen_after_bind(); }
  void wait_until_ready() const { server_.wait_until_ready(); }
  void stop() { server_.stop(); }

 private:
  static std::string bearer(const httplib::Request& req) {
    const auto h = req.get_header_value("Authorization");
    constexpr std::string_view kPrefix = "Bearer ";
    if (h.rfind(kPrefix, 0) != 0) throw Error(ErrorKind::kAuth, "missing bearer token");
    return h.substr(kPrefix.size());
  }

  template <typename Fn>
  auto guarded(Fn fn) {
    return [fn = std::move(fn)](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const ValidationError& e) {
        nlohmann::json errs = nlohmann::json::array();
        for (const auto& le : e.errors()) errs.push_back({{"line", le.line}, {"message", le.message}});
        res.status = 422;
        res.set_content(nlohmann::json{{"error", "validation"}, {"message", e.what()}, {"errors", errs}}.dump(),
                        "application/json");
      } catch (const Error& e) {
        res.status = http_status_for(e.kind());
        if (e.kind() == ErrorKind::kSessionOver) spdlog::info("rejected {} {}: {}", req.method, req.path, e.what());
        res.set_content(nlohmann::json{{"error", std::string(to_string(e.kind()))}, {"message", e.what()}}.dump(),
                        "application/json");
      } catch (const std::exception& e) {
        res.status = 500;
        res.set_content(nlohmann::json{{"error", "internal"}, {"message", e.what()}}.dump(), "application/json");
      }
    };
  }

  void routes() {
    server_.Post("/v1/login", guarded([this](const httplib::Request& req, httplib::Response& res) {
      httplib::Params form;
      httplib::detail::parse_query_text(req.body, form);
      auto field = [&](const char* key) {
        if (req.has_param(key)) return req.get_param_value(key);
        auto it = form.find(key);
        if (it == form.end()) throw Error(ErrorKind::kParse, std::string("missing form field '") + key + "'");
        return it->second;
      };
      const auto login = referee_.login(field("team_id"), field("credential"));
      spdlog::info("login team={} session={}", field("team_id"), login.session_id);
      res.set_content(nlohmann::json{{"token", login.token},
                                     {"session_id", login.session_id},
                                     {"window_start_ms", login.window_start_ms},
                                     {"n_images", login.n_images}}
                          .dump(),
                      "application/json");
    }));

    server_.Get(R"(/v1/image/(\d+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto token = bearer(req);
      std::size_t index = 0;
      try {
        index = std::stoul(req.matches[1].str());
      } catch (const std::logic_error&) {
        throw Error(ErrorKind::kNotFound, "bad image index");
      }
      auto img = referee_.get_image(token, index);
      res.set_header("X-Image-Id", img.image_id);
      res.set_content(std::move(img.bytes), img.media_type);
    }));

    server_.Post("/v1/result", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto token = bearer(req);
      std::optional<std::string> image;
      if (req.has_param("image_id")) image = req.get_param_value("image_id");
      const auto accepted = referee_.post_result(token, req.body, image);
      res.set_content(nlohmann::json{{"accepted", accepted}}.dump(), "application/json");
    }));

    server_.Post("/v1/logout", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto w = referee_.logout(bearer(req));
      spdlog::info("logout session={} window_end_ms={}", w.session_id, w.window_end_ms);
      res.set_content(final_window_json(w).dump(), "application/json");
    }));
  }

  Referee& referee_;
  httplib::Server server_;
};

// Everything `serve` runs: referee, HTTP listener, and a maintenance thread
// that expires sessions and archives/finalizes them off the request path.
class RefereeService {
 public:
  RefereeService(const ServeConfig& config, const Clock& clock,
                 std::chrono::milliseconds sweep_every = std::chrono::milliseconds(50))
      : config_(config),
        labels_(config.labels ? load_label_space(config.labels->string()) : LabelSpace::numbered()),
        gts_(load_ground_truth(config.ground_truth.string(), labels_)),
        store_(config.runs_dir),
        referee_(load_catalog(config.catalog), config.roster, labels_, clock,
                 RefereeOptions{config.window_ms}),
        archiver_(config.sessions_dir, config.trace_dir, gts_, store_,
                  FinalizeOptions{config.track, config.max_gap_ms, kDefaultIouThreshold}),
        http_(referee_, config.threads),
        sweep_every_(sweep_every) {}

  ~RefereeService() { stop(); }

  RefereeService(const RefereeService&) = delete;
  RefereeService& operator=(const RefereeService&) = delete;

  // Binds and starts serving in the background; returns the bound port.
  int start() {
    port_ = http_.bind(config_.host, config_.port);
    listener_ = std::thread([this] { http_.listen(); });
    http_.wait_until_ready();
    maintenance_ = std::thread([this] { maintain(); });
    spdlog::info("referee ready on {}:{} with {} images, window {} ms", config_.host, port_,
                 referee_.catalog().size(), referee_.window_ms());
    return port_;
  }

  // Stops listening, expires live sessions and archives everything pending.
  void stop() {
    if (stopped_.exchange(true)) return;
    http_.stop();
    if (listener_.joinable()) listener_.join();
    {
      std::lock_guard lock(mu_);
      quit_ = true;
    }
    cv_.notify_all();
    if (maintenance_.joinable()) maintenance_.join();
    referee_.shutdown();
    drain();
  }

  Referee& referee() { return referee_; }
  RunStore& store() { return store_; }
  int port() const { return port_; }

  // Archive outcomes in completion order.
  std::vector<SessionArchiver::Outcome> outcomes() {
    std::lock_guard lock(outcomes_mu_);
    return outcomes_;
  }

  // Runs one sweep + archive pass synchronously.
  void tick() {
    referee_.sweep();
    drain();
  }

 private:
  void maintain() {
    std::unique_lock lock(mu_);
    while (!quit_) {
      cv_.wait_for(lock, sweep_every_);
      if (quit_) break;
      lock.unlock();
      tick();
      lock.lock();
    }
  }

  void drain() {
    std::lock_guard archive_lock(archive_mu_);
    for (const auto& rec : referee_.take_finished()) {
      try {
        auto out = archiver_.archive(rec);
        if (out.report) {
          spdlog::info("session {} {}: mAP {:.4f} energy {:.4f} Wh score {:.4f} ({})", rec.session_id,
                       to_string(rec.state), out.report->map, out.report->energy_wh, out.report->score,
                       *out.run_id);
        } else {
          spdlog::warn("session {} {}: {}", rec.session_id, to_string(rec.state), out.detail);
        }
        if (!rec.late_rejections.empty()) {
          spdlog::info("session {}: {} late post(s) rejected", rec.session_id, rec.late_rejections.size());
        }
        std::lock_guard lock(outcomes_mu_);
        outcomes_.push_back(std::move(out));
      } catch (const std::exception& e) {
        spdlog::error("session {}: finalization failed: {}", rec.session_id, e.what());
        std::lock_guard lock(outcomes_mu_);
        outcomes_.push_back({config_.sessions_dir / rec.session_id, std::nullopt, std::nullopt, e.what()});
      }
    }
  }

  ServeConfig config_;
  LabelSpace labels_;
  GroundTruthSet gts_;
  RunStore store_;
  Referee referee_;
  SessionArchiver archiver_;
  RefereeHttpServer http_;
  std::chrono::milliseconds sweep_every_;
  int port_ = 0;

  std::thread listener_;
  std::thread maintenance_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool quit_ = false;
  std::atomic<bool> stopped_{false};
  std::mutex archive_mu_;
  std::mutex outcomes_mu_;
  std::vector<SessionArchiver::Outcome> outcomes_;
};

// ---------------------------------------------------------------------------
// Reference contestant

struct SimulatorOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string team_id;
  std::string credential;
  std::vector<Detection> answers;  // posted grouped by image, first-seen order
  std::int64_t pace_ms = 0;        // pause after each post
  // Pause implementation; tests substitute a virtual-clock advance.
  std::function<void(std::int64_t)> sleep = [](std::int64_t ms) {
    if (ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(ms));
  };
  bool logout = true;
};

struct SimulatorResult {
  int exit_status = 0;  // 0 all accepted, 1 rejections, 2 network/protocol failure
  std::string token;
  std::size_t n_images = 0;
  std::size_t images_fetched = 0;
  std::size_t posts_accepted = 0;
  std::size_t detections_accepted = 0;
  std::size_t posts_rejected = 0;
  std::optional<nlohmann::json> final_window;
  std::vector<std::string> errors;
};

namespace detail {
inline std::string describe(const httplib::Result& r) {
  if (!r) return "request failed: " + httplib::to_string(r.error());
  std::string msg = "HTTP " + std::to_string(r->status);
  try {
    const auto j = nlohmann::json::parse(r->body);
    msg += " " + j.value("error", std::string()) + ": " + j.value("message", std::string());
  } catch (const nlohmann::json::exception&) {
    msg += ": " + r->body;
  }
  return msg;
}
}  // namespace detail

// Logs in, fetches every image, posts the canned answers at the given pace
// and logs out.
inline SimulatorResult simulate_contestant(const SimulatorOptions& opt) {
  SimulatorResult out;
  httplib::Client cli(opt.host, opt.port);
  cli.set_connection_timeout(5);
  cli.set_read_timeout(30);
  cli.set_keep_alive(true);
  cli.set_tcp_nodelay(true);
  auto fail = [&](int status, std::string msg) {
    out.errors.push_back(std::move(msg));
    out.exit_status = std::max(out.exit_status, status);
  };

  auto login = cli.Post("/v1/login", httplib::Params{{"team_id", opt.team_id}, {"credential", opt.credential}});
  if (!login || login->status != 200) {
    fail(login ? 1 : 2, "login: " + detail::describe(login));
    return out;
  }
  try {
    const auto j = nlohmann::json::parse(login->body);
    out.token = j.at("token").get<std::string>();
    out.n_images = j.at("n_images").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(2, std::string("login: malformed response: ") + e.what());
    return out;
  }
  cli.set_bearer_token_auth(out.token);

  for (std::size_t i = 1; i <= out.n_images; ++i) {
    auto r = cli.Get("/v1/image/" + std::to_string(i));
    if (!r) {
      fail(2, "image " + std::to_string(i) + ": " + detail::describe(r));
      return out;
    }
    if (r->status != 200) {
      fail(1, "image " + std::to_string(i) + ": " + detail::describe(r));
      break;
    }
    ++out.images_fetched;
  }

  std::vector<std::string> order;
  std::map<std::string, std::string> bodies;
  for (const auto& d : opt.answers) {
    auto [it, inserted] = bodies.try_emplace(d.image_id);
    if (inserted) order.push_back(d.image_id);
    it->second += format_detection_line(d);
    it->second += '\n';
  }
  for (const auto& image_id : order) {
    const auto& body = bodies[image_id];
    auto r = cli.Post("/v1/result?image_id=" + httplib::detail::encode_query_param(image_id), body, "text/plain");
    if (!r) {
      fail(2, "result " + image_id + ": " + detail::describe(r));
      return out;
    }
    if (r->status == 200) {
      ++out.posts_accepted;
      try {
        out.detections_accepted += nlohmann::json::parse(r->body).at("accepted").get<std::size_t>();
      } catch (const nlohmann::json::exception&) {
        fail(2, "result " + image_id + ": malformed response");
      }
    } else {
      ++out.posts_rejected;
      fail(1, "result " + image_id + ": " + detail::describe(r));
    }
    opt.sleep(opt.pace_ms);
  }

  if (opt.logout) {
    auto r = cli.Post("/v1/logout");
    if (!r) {
      fail(2, "logout: " + detail::describe(r));
    } else if (r->status != 200) {
      fail(1, "logout: " + detail::describe(r));
    } else {
      try {
        out.final_window = nlohmann::json::parse(r->body);
      } catch (const nlohmann::json::exception&) {
        fail(2, "logout: malformed response");
      }
    }
  }
  return out;
}

}  // namespace lpref
