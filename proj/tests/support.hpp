#pragma once

// Test-only oracles and fixture builders. The oracles deliberately avoid the
// library's code paths: selection-order ranking instead of stable_sort, a
// flat scan over every ground truth, antiderivatives instead of trapezoids.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "lpref/scoring.hpp"
#include "lpref/track1.hpp"

namespace lpref::testing {

// ---------------------------------------------------------------------------
// mAP oracle

inline double oracle_overlap(const BoundingBox& a, const BoundingBox& b) {
  const double ix = std::max(0.0, std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin));
  const double iy = std::max(0.0, std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin));
  const double inter = ix * iy;
  const double area_a = (a.xmax - a.xmin) * (a.ymax - a.ymin);
  const double area_b = (b.xmax - b.xmin) * (b.ymax - b.ymin);
  return inter / (area_a + area_b - inter);
}

// Ranked TP/FP flags for one class.
inline std::vector<bool> oracle_flags(const std::vector<Detection>& dets,
                                      const std::vector<GroundTruthObject>& gts, int category,
                                      double threshold = 0.5) {
  std::vector<std::size_t> remaining;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].category_id == category) remaining.push_back(i);
  }
  std::vector<bool> consumed(gts.size(), false);
  std::vector<bool> flags;
  while (!remaining.empty()) {
    // Highest confidence, lowest submission index on ties.
    std::size_t pick = 0;
    for (std::size_t k = 1; k < remaining.size(); ++k) {
      if (dets[remaining[k]].confidence > dets[remaining[pick]].confidence) pick = k;
    }
    const Detection& d = dets[remaining[pick]];
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(pick));

    double best = -1;
    std::size_t best_gt = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (consumed[g] || gts[g].category_id != category || gts[g].image_id != d.image_id) continue;
      const double o = oracle_overlap(d.box, gts[g].box);
      if (o > best) {
        best = o;
        best_gt = g;
      }
    }
    const bool tp = best_gt < gts.size() && best >= threshold;
    if (tp) consumed[best_gt] = true;
    flags.push_back(tp);
  }
  return flags;
}

// AP = (1/G) * sum over TP ranks k of max_{j >= k} precision_j.
inline double oracle_ap(const std::vector<bool>& flags, std::size_t num_gt) {
  if (num_gt == 0) return 0;
  std::vector<double> precision;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    tp += flags[i] ? 1 : 0;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  double total = 0;
  for (std::size_t k = 0; k < flags.size(); ++k) {
    if (!flags[k]) continue;
    double best = 0;
    for (std::size_t j = k; j < flags.size(); ++j) best = std::max(best, precision[j]);
    total += best;
  }
  return total / static_cast<double>(num_gt);
}

inline double oracle_map(const std::vector<Detection>& dets,
                         const std::vector<GroundTruthObject>& gts) {
  std::map<int, std::size_t> gt_count;
  for (const auto& g : gts) ++gt_count[g.category_id];
  if (gt_count.empty()) return 0;
  double sum = 0;
  for (const auto& [cat, n] : gt_count) sum += oracle_ap(oracle_flags(dets, gts, cat), n);
  return sum / static_cast<double>(gt_count.size());
}

struct Instance {
  std::vector<Detection> detections;
  std::vector<GroundTruthObject> gts;
};

// <= 3 images, <= 3 classes, <= 4 boxes per class on a coarse grid so that
// overlaps, exact IoU=0.5 cases and confidence ties occur often.
inline BoundingBox random_grid_box(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pos(0, 6);
  std::uniform_int_distribution<int> len(1, 4);
  BoundingBox b;
  b.xmin = pos(rng);
  b.ymin = pos(rng);
  b.xmax = b.xmin + len(rng);
  b.ymax = b.ymin + len(rng);
  return b;
}

inline Instance random_instance(std::mt19937_64& rng) {
  Instance inst;
  std::uniform_int_distribution<int> n_images(1, 3);
  std::uniform_int_distribution<int> n_classes(1, 3);
  std::uniform_int_distribution<int> n_boxes(0, 4);
  const double confidences[] = {0.1, 0.3, 0.5, 0.5, 0.7, 0.9, 1.0};
  std::uniform_int_distribution<int> conf_pick(0, 6);
  const int images = n_images(rng);
  const int classes = n_classes(rng);
  std::uniform_int_distribution<int> image_pick(1, images);
  for (int c = 1; c <= classes; ++c) {
    const int gt_n = n_boxes(rng);
    for (int k = 0; k < gt_n; ++k) {
      inst.gts.push_back({"img" + std::to_string(image_pick(rng)), c, random_grid_box(rng)});
    }
    const int det_n = n_boxes(rng);
    for (int k = 0; k < det_n; ++k) {
      BoundingBox b;
      // Half the time perturb an existing ground truth to get real matches.
      const bool near_gt = !inst.gts.empty() && (rng() & 1);
      std::string image = "img" + std::to_string(image_pick(rng));
      if (near_gt) {
        const auto& g = inst.gts[rng() % inst.gts.size()];
        image = g.image_id;
        b = g.box;
        std::uniform_int_distribution<int> jitter(-1, 1);
        b.xmin += jitter(rng);
        b.xmax = std::max(b.xmin + 1, b.xmax + jitter(rng));
      } else {
        b = random_grid_box(rng);
      }
      inst.detections.push_back({image, c, confidences[conf_pick(rng)], b});
    }
  }
  return inst;
}

// ---------------------------------------------------------------------------
// Energy oracle: exact integral of a piecewise-linear function.

struct Breakpoint {
  double t_ms;
  double watts;
};

inline long double exact_energy_wh(const std::vector<Breakpoint>& pts, double a, double b) {
  long double total = 0;
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const long double t0 = pts[i].t_ms, t1 = pts[i + 1].t_ms;
    const long double lo = std::max<long double>(t0, a), hi = std::min<long double>(t1, b);
    if (!(lo < hi)) continue;
    const long double slope = (pts[i + 1].watts - pts[i].watts) / (t1 - t0);
    const long double intercept = pts[i].watts - slope * t0;
    // Antiderivative of intercept + slope * t.
    auto F = [&](long double t) { return intercept * t + slope * t * t / 2; };
    total += F(hi) - F(lo);
  }
  return total / 3'600'000.0L;
}

// ---------------------------------------------------------------------------
// Submission fixture: 128 submissions, 97 distinct files.

struct SubmissionFixture {
  std::vector<SubmissionRecord> records;
  std::size_t unique_files = 0;
};

// Duplicate structure: 12 files submitted twice with different scores
// (evaluation-server changes), 5 files submitted three times with equal
// scores, 3 files submitted four times (re-submission under other accounts,
// mixed scores). 97 + 12 + 10 + 9 = 128 records.
inline SubmissionFixture track1_submission_fixture() {
  SubmissionFixture fx;
  fx.unique_files = 97;
  std::mt19937_64 rng(2018);
  std::uniform_real_distribution<double> metric(0.05, 0.65);
  std::int64_t clock = 0;
  auto add = [&](int file, double m, const std::string& who) {
    fx.records.push_back({md5_hex("tflite-model-" + std::to_string(file)), m, who, clock += 60'000});
  };
  for (int f = 0; f < 97; ++f) add(f, metric(rng), "team" + std::to_string(f % 40));
  for (int f = 0; f < 12; ++f) add(f, metric(rng), "team" + std::to_string(f % 40));
  for (int f = 12; f < 17; ++f) {
    const double m = fx.records[static_cast<std::size_t>(f)].test_metric;
    add(f, m, "team" + std::to_string(f % 40));
    add(f, m, "team" + std::to_string(f % 40));
  }
  for (int f = 17; f < 20; ++f) {
    for (int k = 0; k < 3; ++k) add(f, metric(rng), "alias" + std::to_string(k));
  }
  std::shuffle(fx.records.begin(), fx.records.end(), rng);
  return fx;
}

// ---------------------------------------------------------------------------
// Files

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline std::string pgm(int w, int h, const std::vector<std::uint8_t>& px) {
  std::string s = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  s.append(px.begin(), px.end());
  return s;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("lpref-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

// 20-image contest: class 1 on images 1..10, class 2 on 11..20, one 20x20
// object per image. The canned answers find class 1 perfectly (AP 1) and, in
// class 2, rank five misplaced boxes (conf 0.9) above five correct ones
// (conf 0.8): precision at the TP ranks is 1/6..5/10, the envelope is 0.5
// throughout, so AP = 5 * 0.1 * 0.5 = 0.25 and mAP = 0.625.
struct LoopbackFixture {
  std::filesystem::path config;
  std::vector<Detection> answers;
  std::vector<Detection> late_corrections;  // would make class 2 perfect
  double expected_map = 0.625;
  double watts = 12.0;
};

inline std::string image_id(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "img%02d", i);
  return buf;
}

inline LoopbackFixture make_loopback_fixture(const std::filesystem::path& dir,
                                             std::int64_t window_ms = 600'000) {
  LoopbackFixture fx;
  std::string catalog, gt;
  for (int i = 1; i <= 20; ++i) {
    std::vector<std::uint8_t> px(64);
    for (std::size_t k = 0; k < px.size(); ++k) px[k] = static_cast<std::uint8_t>((i * 37 + k * 11) % 256);
    write_text(dir / "images" / (image_id(i) + ".pgm"), pgm(8, 8, px));
    catalog += image_id(i) + " images/" + image_id(i) + ".pgm\n";
    const int cls = i <= 10 ? 1 : 2;
    gt += image_id(i) + " " + std::to_string(cls) + " 10 10 30 30\n";
    const BoundingBox right{10, 10, 30, 30};
    const BoundingBox wrong{50, 50, 70, 70};
    if (cls == 1) {
      fx.answers.push_back({image_id(i), 1, 0.9, right});
    } else if (i <= 15) {
      fx.answers.push_back({image_id(i), 2, 0.8, right});
    } else {
      fx.answers.push_back({image_id(i), 2, 0.9, wrong});
      fx.late_corrections.push_back({image_id(i), 2, 0.9, right});
    }
  }
  write_text(dir / "catalog.txt", catalog);
  write_text(dir / "gt.txt", gt);
  write_text(dir / "labels.txt", "1 person\n2 car\n3 bicycle\n");
  std::string trace = "# constant 12 W\n";
  for (int t = 0; t <= 700'000; t += 1000) trace += std::to_string(t) + ",12\n";
  for (const char* team : {"alpha", "beta", "gamma", "delta"}) {
    write_text(dir / "traces" / (std::string(team) + ".csv"), trace);
  }
  fx.config = dir / "config.json";
  write_text(fx.config, R"({
  "catalog": "catalog.txt",
  "ground_truth": "gt.txt",
  "labels": "labels.txt",
  "roster": [
    {"team_id": "alpha", "credential": "a-secret"},
    {"team_id": "beta", "credential": "b-secret"},
    {"team_id": "gamma", "credential": "g-secret"},
    {"team_id": "delta", "credential": "d-secret"}
  ],
  "window_ms": )" + std::to_string(window_ms) + R"(,
  "listen": {"host": "127.0.0.1", "port": 0},
  "sessions_dir": "sessions",
  "runs_dir": "runs",
  "trace_dir": "traces",
  "track": "Track2"
}
)");
  return fx;
}

}  // namespace lpref::testing
