#include <gtest/gtest.h>

#include "lpref/referee_http.hpp"
#include "support.hpp"

namespace lpref {
namespace {

constexpr std::int64_t kT0 = 5'000'000;

struct Loopback {
  explicit Loopback(std::int64_t window_ms = kMaxWindowMs)
      : dir("http"),
        fx(testing::make_loopback_fixture(dir.path(), window_ms)),
        clock(kT0),
        service(load_serve_config(fx.config), clock) {
    port = service.start();
  }

  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_connection_timeout(5);
    return c;
  }

  SimulatorOptions sim(const std::string& team, const std::string& cred) {
    SimulatorOptions o;
    o.port = port;
    o.team_id = team;
    o.credential = cred;
    o.answers = fx.answers;
    o.pace_ms = 1000;
    o.sleep = [this](std::int64_t ms) { clock.advance(ms); };
    return o;
  }

  std::string login(const std::string& team, const std::string& cred) {
    auto r = client().Post("/v1/login", "team_id=" + team + "&credential=" + cred,
                           "application/x-www-form-urlencoded");
    EXPECT_TRUE(r);
    EXPECT_EQ(r->status, 200) << r->body;
    return nlohmann::json::parse(r->body).at("token").get<std::string>();
  }

  testing::TempDir dir;
  testing::LoopbackFixture fx;
  ManualClock clock;
  RefereeService service;
  int port = 0;
};

httplib::Headers bearer(const std::string& token) { return {{"Authorization", "Bearer " + token}}; }

TEST(HttpReferee, SimulatedContestantEndToEnd) {
  Loopback lb;
  const auto result = simulate_contestant(lb.sim("alpha", "a-secret"));
  EXPECT_EQ(result.exit_status, 0) << (result.errors.empty() ? "" : result.errors[0]);
  EXPECT_EQ(result.n_images, 20u);
  EXPECT_EQ(result.images_fetched, 20u);
  EXPECT_EQ(result.posts_accepted, 20u);
  EXPECT_EQ(result.detections_accepted, 20u);
  ASSERT_TRUE(result.final_window);
  EXPECT_EQ((*result.final_window)["window_end_ms"], 20'000);
  EXPECT_EQ((*result.final_window)["state"], "Closed");

  lb.service.tick();
  const auto outs = lb.service.outcomes();
  ASSERT_EQ(outs.size(), 1u);
  ASSERT_TRUE(outs[0].report);
  EXPECT_NEAR(outs[0].report->map, 0.625, 1e-12);
  EXPECT_NEAR(outs[0].report->energy_wh, 12.0 * 20'000 / 3.6e6, 1e-12);
  EXPECT_NEAR(outs[0].report->score, 9.375, 1e-9);
  EXPECT_EQ(outs[0].report->images_served, 20u);
  const auto runs = lb.service.store().list_runs();
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_EQ(runs[0].team_id, "alpha");
  EXPECT_EQ(runs[0].track, Track::kTrack2);
}

TEST(HttpReferee, StatusCodes) {
  Loopback lb;
  auto c = lb.client();
  auto bad = c.Post("/v1/login", "team_id=alpha&credential=nope", "application/x-www-form-urlencoded");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 401);
  EXPECT_EQ(c.Post("/v1/login", "team_id=alpha", "application/x-www-form-urlencoded")->status, 400);
  EXPECT_EQ(c.Get("/v1/image/1")->status, 401);

  const auto token = lb.login("alpha", "a-secret");
  EXPECT_EQ(c.Post("/v1/login", "team_id=alpha&credential=a-secret", "application/x-www-form-urlencoded")->status,
            409);
  auto img = c.Get("/v1/image/3", bearer(token));
  ASSERT_TRUE(img);
  EXPECT_EQ(img->status, 200);
  EXPECT_EQ(img->get_header_value("X-Image-Id"), "img03");
  EXPECT_EQ(img->get_header_value("Content-Type"), "image/x-portable-graymap");
  EXPECT_EQ(img->body, read_file_bytes(lb.dir / "images/img03.pgm"));
  EXPECT_EQ(c.Get("/v1/image/21", bearer(token))->status, 404);

  auto invalid = c.Post("/v1/result", bearer(token), "img01 1 1.5 1 1 2 2\n", "text/plain");
  EXPECT_EQ(invalid->status, 422);
  const auto body = nlohmann::json::parse(invalid->body);
  EXPECT_EQ(body["errors"][0]["line"], 1);
  EXPECT_NE(body["errors"][0]["message"].get<std::string>().find("confidence"), std::string::npos);

  auto ok = c.Post("/v1/result", bearer(token), "img01 1 0.5 10 10 30 30\nimg02 1 0.5 10 10 30 30\n", "text/plain");
  EXPECT_EQ(ok->status, 200);
  EXPECT_EQ(nlohmann::json::parse(ok->body)["accepted"], 2);

  lb.clock.advance(600'001);
  EXPECT_EQ(c.Get("/v1/image/1", bearer(token))->status, 410);
  EXPECT_EQ(c.Post("/v1/result", bearer(token), "img03 1 0.5 10 10 30 30\n", "text/plain")->status, 410);
  EXPECT_EQ(c.Post("/v1/logout", bearer(token), "", "text/plain")->status, 409);
}

TEST(HttpReferee, LatePostsNeverChangeTheScore) {
  auto run = [](bool with_late_posts) {
    Loopback lb;
    auto opt = lb.sim("beta", "b-secret");
    opt.logout = false;
    const auto sim = simulate_contestant(opt);
    EXPECT_EQ(sim.exit_status, 0);
    lb.clock.set(kT0 + 600'001);
    if (with_late_posts) {
      auto c = lb.client();
      for (const auto& d : lb.fx.late_corrections) {
        auto r = c.Post("/v1/result?image_id=" + d.image_id, bearer(sim.token),
                        format_detection_line(d) + "\n", "text/plain");
        EXPECT_EQ(r->status, 410);
      }
    }
    lb.service.tick();
    const auto outs = lb.service.outcomes();
    EXPECT_EQ(outs.size(), 1u);
    return *outs.at(0).report;
  };
  const auto clean = run(false);
  const auto late = run(true);
  EXPECT_EQ(clean.map, late.map);
  EXPECT_EQ(clean.map, 0.625);
  EXPECT_EQ(late.state, SessionState::kExpired);
  EXPECT_EQ(late.window_end_ms, 600'000);
  EXPECT_NEAR(late.energy_wh, 2.0, 1e-12);
  EXPECT_NEAR(late.score, 0.3125, 1e-12);
  EXPECT_EQ(late.late_rejected_posts, 5u);
  EXPECT_EQ(clean.late_rejected_posts, 0u);
}

TEST(HttpReferee, ConcurrentTeams) {
  Loopback lb;
  std::vector<std::thread> threads;
  std::vector<SimulatorResult> results(4);
  const std::vector<std::pair<std::string, std::string>> teams{
      {"alpha", "a-secret"}, {"beta", "b-secret"}, {"gamma", "g-secret"}, {"delta", "d-secret"}};
  for (std::size_t i = 0; i < teams.size(); ++i) {
    threads.emplace_back([&, i] {
      auto o = lb.sim(teams[i].first, teams[i].second);
      o.sleep = [&lb](std::int64_t) { lb.clock.advance(1); };
      results[i] = simulate_contestant(o);
    });
  }
  for (auto& t : threads) t.join();
  for (const auto& r : results) {
    EXPECT_EQ(r.exit_status, 0);
    EXPECT_EQ(r.posts_accepted, 20u);
  }
  lb.service.tick();
  const auto outs = lb.service.outcomes();
  ASSERT_EQ(outs.size(), 4u);
  for (const auto& o : outs) {
    ASSERT_TRUE(o.report);
    EXPECT_NEAR(o.report->map, 0.625, 1e-12);
  }
}

TEST(HttpReferee, StopExpiresLiveSessions) {
  Loopback lb;
  lb.login("gamma", "g-secret");
  lb.clock.advance(30'000);
  lb.service.stop();
  const auto outs = lb.service.outcomes();
  ASSERT_EQ(outs.size(), 1u);
  ASSERT_TRUE(outs[0].report);
  EXPECT_EQ(outs[0].report->state, SessionState::kExpired);
  EXPECT_EQ(outs[0].report->window_end_ms, 30'000);
  EXPECT_TRUE(std::filesystem::exists(outs[0].session_dir / "report.json"));
}

TEST(Simulator, UnreachableServerIsNetworkFailure) {
  SimulatorOptions o;
  o.port = 1;
  o.team_id = "x";
  o.credential = "y";
  EXPECT_EQ(simulate_contestant(o).exit_status, 2);
}

TEST(HttpStatus, Mapping) {
  EXPECT_EQ(http_status_for(ErrorKind::kAuth), 401);
  EXPECT_EQ(http_status_for(ErrorKind::kSessionOver), 410);
  EXPECT_EQ(error_kind_for_status(http_status_for(ErrorKind::kNotFound)), ErrorKind::kNotFound);
  EXPECT_EQ(error_kind_for_status(http_status_for(ErrorKind::kValidation)), ErrorKind::kValidation);
}

}  // namespace
}  // namespace lpref
