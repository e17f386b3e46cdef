// lpref: referee and scoring tool for low-power image recognition contests.
//
// Exit codes: 0 success, 1 validation failure, 2 I/O failure.

#include <signal.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "lpref/dataset.hpp"
#include "lpref/energy.hpp"
#include "lpref/error.hpp"
#include "lpref/leaderboard.hpp"
#include "lpref/referee.hpp"
#include "lpref/referee_http.hpp"
#include "lpref/scoring.hpp"
#include "lpref/track1.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitIo = 2;

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("lpref");
  logger->set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* lvl = std::getenv("LPREF_LOG")) {
    spdlog::set_level(spdlog::level::from_str(lvl));
  }
}

lpref::LabelSpace labels_from(const std::string& path) {
  return path.empty() ? lpref::LabelSpace::numbered() : lpref::load_label_space(path);
}

void write_output(const std::string& text, const std::string& path) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw lpref::Error(lpref::ErrorKind::kIo, "cannot write '" + path + "'");
}

// ---------------------------------------------------------------------------

int run_serve(const std::string& config_path) {
  const auto config = lpref::load_serve_config(config_path);

  // Block termination signals before any thread starts so they can be
  // collected synchronously below.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  lpref::SteadyClock clock;
  lpref::RefereeService service(config, clock);
  service.start();
  int sig = 0;
  sigwait(&signals, &sig);
  spdlog::info("received signal {}, shutting down", sig);
  service.stop();
  for (const auto& o : service.outcomes()) {
    spdlog::info("archived {}{}", o.session_dir.string(), o.run_id ? " as " + *o.run_id : "");
  }
  return kExitOk;
}

struct SessionArgs {
  std::string session_dir;
  std::string gt;
  std::string trace;
  std::string labels;
  std::string track = "Track2";
  std::string runs_dir;
  std::string out = "table";
  double max_gap_ms = lpref::kDefaultMaxGapMs;
};

int run_score_session(const SessionArgs& a) {
  const auto labels = labels_from(a.labels);
  const auto gts = lpref::load_ground_truth(a.gt, labels);
  const auto session = lpref::load_session(a.session_dir, labels);
  const auto trace = lpref::load_power_trace(a.trace);
  const auto report = lpref::finalize_session(
      session, gts, trace,
      {lpref::parse_track(a.track), a.max_gap_ms, lpref::kDefaultIouThreshold});
  const auto text = lpref::to_json(report).dump(2) + "\n";
  if (!a.runs_dir.empty()) {
    lpref::RunStore store(a.runs_dir);
    const auto id = store.persist_run(lpref::to_leaderboard_entry(report), text);
    spdlog::info("persisted {} in {}", id, a.runs_dir);
  }
  if (a.out == "json") {
    std::cout << text;
  } else if (a.out == "csv") {
    std::cout << std::setprecision(17) << "session_id,team_id,map,energy_wh,score\n"
              << report.session_id << ',' << report.team_id << ',' << report.map << ','
              << report.energy_wh << ',' << report.score << '\n';
    std::cout << "category_id,ap,num_gt,num_tp,num_fp\n";
    for (const auto& c : report.per_class) {
      std::cout << c.score.category_id << ',' << c.score.ap << ',' << c.score.num_gt << ','
                << c.score.num_tp << ',' << c.score.num_fp << '\n';
    }
  } else {
    std::cout << lpref::format_report_table(report);
  }
  return kExitOk;
}

int run_score_track1(const std::string& path, const std::string& out) {
  const auto s = lpref::evaluate_track1(lpref::load_track1_run(path));
  if (out == "csv") {
    std::cout << "mean_latency_ms,test_metric,accuracy_on_classified,accuracy_over_time,"
                 "num_classified,wall_time_ms,total_inference_ms\n"
              << std::setprecision(17) << s.mean_latency_ms << ',' << s.test_metric << ','
              << s.accuracy_on_classified << ',' << s.accuracy_over_time << ','
              << s.num_classified << ',' << s.wall_time_ms << ',' << s.total_inference_ms << '\n';
    return kExitOk;
  }
  char buf[64];
  std::cout << std::left;
  std::snprintf(buf, sizeof buf, "%.1f", s.mean_latency_ms);
  std::cout << std::setw(24) << "Latency" << buf << '\n';
  std::snprintf(buf, sizeof buf, "%.5f", s.test_metric);
  std::cout << std::setw(24) << "Test Metric" << buf << '\n';
  std::snprintf(buf, sizeof buf, "%.5f", s.accuracy_on_classified);
  std::cout << std::setw(24) << "Accuracy on Classified" << buf << '\n';
  std::snprintf(buf, sizeof buf, "%.2e", s.accuracy_over_time);
  std::cout << std::setw(24) << "Accuracy / Time" << buf << '\n';
  std::cout << std::setw(24) << "# Classified" << s.num_classified << '\n';
  return kExitOk;
}

int run_dedup_images(const std::string& candidates, const std::string& reference, double threshold,
                     const std::string& report) {
  const auto cands = lpref::load_thumbnail_dir(candidates);
  const auto refs = lpref::load_thumbnail_dir(reference);
  const auto pairs = lpref::find_duplicates(cands, refs, threshold);
  write_output(lpref::format_dedup_report(pairs, threshold), report);
  spdlog::info("{} candidate(s) x {} reference(s): {} pair(s) within {}", cands.size(), refs.size(),
               pairs.size(), threshold);
  return kExitOk;
}

int run_dedup_submissions(const std::string& path, const std::string& out, const std::string& ledger) {
  auto records = lpref::load_submissions(path);
  if (!ledger.empty()) {
    lpref::SubmissionLedger l(ledger);
    for (const auto& r : records) l.append(r);
    records = l.snapshot();
  }
  const auto unique = lpref::dedup_submissions(records);
  if (out == "csv") {
    std::cout << "submitter,received_at_ms,test_metric,digest\n" << std::setprecision(17);
    for (const auto& r : unique) {
      std::cout << r.submitter << ',' << r.received_at_ms << ',' << r.test_metric << ','
                << r.content_digest << '\n';
    }
    return kExitOk;
  }
  std::cout << records.size() << " submissions, " << unique.size() << " unique\n";
  for (const auto& r : unique) {
    char metric[32];
    std::snprintf(metric, sizeof metric, "%.4f", r.test_metric);
    std::cout << "  " << r.content_digest << "  " << metric << "  " << r.submitter << '\n';
  }
  return kExitOk;
}

struct LeaderboardArgs {
  std::string runs_dir;
  std::string team;
  std::string track;
  double epsilon = lpref::kDefaultTieEpsilon;
  bool all = false;
  std::string out = "table";
};

int run_leaderboard(const LeaderboardArgs& a) {
  lpref::RunStore store(a.runs_dir);
  lpref::RunFilter filter;
  if (!a.team.empty()) filter.team_id = a.team;
  if (!a.track.empty()) filter.track = lpref::parse_track(a.track);
  auto entries = store.list_runs(filter);
  if (!a.all) entries = lpref::best_per_team(entries);
  const auto ranked = lpref::rank(entries, a.epsilon);
  std::cout << (a.out == "csv" ? lpref::format_ranked_csv(ranked) : lpref::format_ranked_table(ranked));
  return kExitOk;
}

struct SimulateArgs {
  std::string server = "127.0.0.1:8080";
  std::string team;
  std::string credential;
  std::string answers;
  std::string labels;
  std::int64_t pace_ms = 0;
};

int run_simulate(const SimulateArgs& a) {
  lpref::SimulatorOptions opt;
  const auto colon = a.server.rfind(':');
  if (colon == std::string::npos) {
    throw lpref::Error(lpref::ErrorKind::kInvalidInput, "--server must be host:port");
  }
  opt.host = a.server.substr(0, colon);
  try {
    opt.port = std::stoi(a.server.substr(colon + 1));
  } catch (const std::logic_error&) {
    throw lpref::Error(lpref::ErrorKind::kInvalidInput, "bad port in --server");
  }
  opt.team_id = a.team;
  opt.credential = a.credential;
  opt.pace_ms = a.pace_ms;
  auto parsed = lpref::parse_detection_lines(lpref::read_file_bytes(a.answers), labels_from(a.labels));
  if (!parsed.errors.empty()) throw lpref::ValidationError(std::move(parsed.errors));
  opt.answers = std::move(parsed.detections);

  const auto result = lpref::simulate_contestant(opt);
  for (const auto& e : result.errors) spdlog::error("{}", e);
  spdlog::info("fetched {}/{} images, {} post(s) accepted ({} detections), {} rejected",
               result.images_fetched, result.n_images, result.posts_accepted,
               result.detections_accepted, result.posts_rejected);
  if (result.final_window) std::cout << result.final_window->dump() << '\n';
  return result.exit_status;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Referee and scorer for low-power image recognition contests"};
  app.require_subcommand(1, 1);

  std::string config_path;
  auto* serve = app.add_subcommand("serve", "Run the HTTP referee until SIGINT/SIGTERM");
  serve->add_option("--config", config_path, "Referee config (JSON)")->required();

  SessionArgs sess;
  auto* score_session = app.add_subcommand("score-session", "Score a recorded session directory");
  score_session->add_option("session_dir", sess.session_dir, "Directory with session.json + answers.txt")
      ->required();
  score_session->add_option("--gt", sess.gt, "Ground-truth file")->required();
  score_session->add_option("--trace", sess.trace, "Power trace (<t_ms>,<watts>)")->required();
  score_session->add_option("--labels", sess.labels, "Label sidecar (<category_id> <name>); default 1..200");
  score_session->add_option("--track", sess.track, "Track2 or Track3");
  score_session->add_option("--runs-dir", sess.runs_dir, "Persist the report into this run store");
  score_session->add_option("--max-gap-ms", sess.max_gap_ms, "Trace gap warning threshold");
  score_session->add_option("--out", sess.out, "table|csv|json")
      ->check(CLI::IsMember({"table", "csv", "json"}));

  std::string track1_path;
  std::string track1_out = "table";
  auto* score_track1 = app.add_subcommand("score-track1", "Evaluate a Track-1 latency/correctness run");
  score_track1->add_option("run", track1_path, "Run file")->required();
  score_track1->add_option("--out", track1_out, "table|csv")->check(CLI::IsMember({"table", "csv"}));

  std::string cand_dir, ref_dir, dedup_report;
  double threshold = 0;
  auto* dedup_images = app.add_subcommand("dedup-images", "Thumbnail L2 near-duplicate search");
  dedup_images->add_option("--candidates", cand_dir, "Directory of PGM/PPM candidates")->required();
  dedup_images->add_option("--reference", ref_dir, "Directory of PGM/PPM reference images")->required();
  dedup_images->add_option("--threshold", threshold, "Maximum L2 distance to report")->required();
  dedup_images->add_option("--report", dedup_report, "Write the report here instead of stdout");

  std::string subs_path, subs_out = "table", ledger_path;
  auto* dedup_subs = app.add_subcommand("dedup-submissions", "Keep one best submission per MD5 digest");
  dedup_subs->add_option("submissions", subs_path, "CSV <submitter>,<received_at_ms>,<test_metric>,<digest|@file>")
      ->required();
  dedup_subs->add_option("--ledger", ledger_path, "Append to this ledger and dedup its full contents");
  dedup_subs->add_option("--out", subs_out, "table|csv")->check(CLI::IsMember({"table", "csv"}));

  LeaderboardArgs lb;
  auto* leaderboard = app.add_subcommand("leaderboard", "Rank persisted runs with prize groups");
  leaderboard->add_option("--runs-dir", lb.runs_dir, "Run store directory")->required();
  leaderboard->add_option("--team", lb.team, "Only this team");
  leaderboard->add_option("--track", lb.track, "Only this track");
  leaderboard->add_option("--epsilon", lb.epsilon, "Near-tie prize grouping epsilon")
      ->check(CLI::NonNegativeNumber);
  leaderboard->add_flag("--all", lb.all, "Rank every run, not only each team's best");
  leaderboard->add_option("--out", lb.out, "table|csv")->check(CLI::IsMember({"table", "csv"}));

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate-contestant", "Reference client: fetch all images, post answers");
  simulate->add_option("--server", sim.server, "host:port");
  simulate->add_option("--team", sim.team, "Team id")->required();
  simulate->add_option("--credential", sim.credential, "Team credential")->required();
  simulate->add_option("--answers", sim.answers, "Answers in result-line format")->required();
  simulate->add_option("--labels", sim.labels, "Label sidecar used to validate answers");
  simulate->add_option("--pace-ms", sim.pace_ms, "Pause after each post")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*serve) return run_serve(config_path);
    if (*score_session) return run_score_session(sess);
    if (*score_track1) return run_score_track1(track1_path, track1_out);
    if (*dedup_images) return run_dedup_images(cand_dir, ref_dir, threshold, dedup_report);
    if (*dedup_subs) return run_dedup_submissions(subs_path, subs_out, ledger_path);
    if (*leaderboard) return run_leaderboard(lb);
    if (*simulate) return run_simulate(sim);
  } catch (const lpref::Error& e) {
    spdlog::error("{}: {}", lpref::to_string(e.kind()), e.what());
    return e.kind() == lpref::ErrorKind::kIo ? kExitIo : kExitValidation;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitIo;
  }
  return kExitValidation;
}
