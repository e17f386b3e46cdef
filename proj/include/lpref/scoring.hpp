#pragma once

// Detection scoring: IoU, per-class greedy matching, average precision and
// mean average precision over a configured label space.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lpref/error.hpp"

namespace lpref {

// Minimum overlap for a detection to count as correct ("at least 50%").
inline constexpr double kDefaultIouThreshold = 0.5;
inline constexpr int kCompetitionClassCount = 200;

struct BoundingBox {
  double xmin = 0;
  double ymin = 0;
  double xmax = 0;
  double ymax = 0;

  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  double area() const { return width() * height(); }

  bool valid() const {
    return std::isfinite(xmin) && std::isfinite(ymin) && std::isfinite(xmax) &&
           std::isfinite(ymax) && xmin < xmax && ymin < ymax;
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct Detection {
  std::string image_id;
  int category_id = 0;
  double confidence = 0;
  BoundingBox box;

  friend bool operator==(const Detection&, const Detection&) = default;
};

struct GroundTruthObject {
  std::string image_id;
  int category_id = 0;
  BoundingBox box;

  friend bool operator==(const GroundTruthObject&,
                         const GroundTruthObject&) = default;
};

struct ClassScore {
  int category_id = 0;
  double ap = 0;
  std::size_t num_gt = 0;
  std::size_t num_tp = 0;
  std::size_t num_fp = 0;

  friend bool operator==(const ClassScore&, const ClassScore&) = default;
};

// Category ids with human-readable names.
class LabelSpace {
 public:
  LabelSpace() = default;
  explicit LabelSpace(std::map<int, std::string> names)
      : names_(std::move(names)) {}

  // Ids 1..count, named by their number.
  static LabelSpace numbered(int count = kCompetitionClassCount) {
    std::map<int, std::string> names;
    for (int id = 1; id <= count; ++id) names.emplace(id, std::to_string(id));
    return LabelSpace(std::move(names));
  }

  bool contains(int category_id) const {
    return names_.count(category_id) != 0;
  }
  std::size_t size() const { return names_.size(); }
  const std::map<int, std::string>& names() const { return names_; }

  std::string name(int category_id) const {
    auto it = names_.find(category_id);
    return it == names_.end() ? std::string() : it->second;
  }

 private:
  std::map<int, std::string> names_;
};

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  if (!a.valid() || !b.valid()) {
    throw Error(ErrorKind::kInvalidInput,
                "iou: degenerate bounding box (zero or negative area)");
  }
  const double iw = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const double ih = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

enum class Outcome : bool { kFalsePositive = false, kTruePositive = true };

struct MatchedDetection {
  Detection detection;
  bool true_positive = false;
  // Index into the ground-truth list consumed by this detection, or -1.
  std::ptrdiff_t gt_index = -1;
};

// Greedy matching for a single category. Detections are visited in
// descending confidence (stable: earlier submissions win ties); each one
// takes the best-IoU still-unmatched ground truth in its image, and is a
// true positive iff that IoU reaches `threshold`.
inline std::vector<MatchedDetection> match_class(
    std::span<const Detection> detections,
    std::span<const GroundTruthObject> gts,
    double threshold = kDefaultIouThreshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw Error(ErrorKind::kInvalidInput,
                "match_class: threshold must be in (0, 1]");
  }
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) {
    return detections[l].confidence > detections[r].confidence;
  });

  std::unordered_map<std::string, std::vector<std::size_t>> gts_by_image;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    gts_by_image[gts[i].image_id].push_back(i);
  }
  std::vector<bool> used(gts.size(), false);

  std::vector<MatchedDetection> out;
  out.reserve(detections.size());
  for (std::size_t di : order) {
    const Detection& det = detections[di];
    MatchedDetection m{det, false, -1};
    auto it = gts_by_image.find(det.image_id);
    if (it != gts_by_image.end()) {
      double best = -1.0;
      std::ptrdiff_t best_index = -1;
      for (std::size_t gi : it->second) {
        if (used[gi]) continue;
        const double overlap = iou(det.box, gts[gi].box);
        if (overlap > best) {
          best = overlap;
          best_index = static_cast<std::ptrdiff_t>(gi);
        }
      }
      if (best_index >= 0 && best >= threshold) {
        used[static_cast<std::size_t>(best_index)] = true;
        m.true_positive = true;
        m.gt_index = best_index;
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

// Area under the monotone (non-increasing) precision envelope of the
// precision/recall curve. `flags` must already be in ranked order.
inline double average_precision(std::span<const Outcome> flags,
                                std::size_t num_gt) {
  if (num_gt == 0 || flags.empty()) return 0.0;
  const std::size_t n = flags.size();
  std::vector<double> precision(n);
  std::vector<double> recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (flags[i] == Outcome::kTruePositive) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }
  for (std::size_t i = n - 1; i > 0; --i) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (recall[i] != prev_recall) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
  }
  return ap;
}

struct MapResult {
  double map = 0;
  // One entry per category that has ground truth or detections, ascending id.
  std::vector<ClassScore> per_class;
};

// mAP over every category with at least one ground-truth object. Images with
// ground truth but no detections simply contribute misses.
inline MapResult mean_average_precision(std::span<const Detection> detections,
                                        std::span<const GroundTruthObject> gts,
                                        const LabelSpace& label_space,
                                        double threshold = kDefaultIouThreshold) {
  std::map<int, std::vector<Detection>> det_by_class;
  std::map<int, std::vector<GroundTruthObject>> gt_by_class;
  for (const auto& d : detections) {
    if (!label_space.contains(d.category_id)) {
      throw Error(ErrorKind::kInvalidInput,
                  "detection for image '" + d.image_id +
                      "' references unknown category " +
                      std::to_string(d.category_id));
    }
    det_by_class[d.category_id].push_back(d);
  }
  for (const auto& g : gts) {
    if (!label_space.contains(g.category_id)) {
      throw Error(ErrorKind::kInvalidInput,
                  "ground truth for image '" + g.image_id +
                      "' references unknown category " +
                      std::to_string(g.category_id));
    }
    gt_by_class[g.category_id].push_back(g);
  }

  std::map<int, ClassScore> scores;
  for (const auto& [cid, list] : gt_by_class) scores[cid].category_id = cid;
  for (const auto& [cid, list] : det_by_class) scores[cid].category_id = cid;

  static const std::vector<Detection> kNoDetections;
  static const std::vector<GroundTruthObject> kNoGts;

  MapResult result;
  double sum = 0.0;
  std::size_t counted = 0;
  for (auto& [cid, score] : scores) {
    auto dit = det_by_class.find(cid);
    auto git = gt_by_class.find(cid);
    const auto& dets = dit == det_by_class.end() ? kNoDetections : dit->second;
    const auto& cls_gts = git == gt_by_class.end() ? kNoGts : git->second;

    const auto matched = match_class(dets, cls_gts, threshold);
    std::vector<Outcome> flags;
    flags.reserve(matched.size());
    for (const auto& m : matched) {
      flags.push_back(Outcome{m.true_positive});
      if (m.true_positive) {
        ++score.num_tp;
      } else {
        ++score.num_fp;
      }
    }
    score.num_gt = cls_gts.size();
    score.ap = score.num_tp == 0 ? 0.0 : average_precision(flags, score.num_gt);
    if (score.num_gt > 0) {
      sum += score.ap;
      ++counted;
    }
    result.per_class.push_back(score);
  }
  result.map = counted == 0 ? 0.0 : sum / static_cast<double>(counted);
  return result;
}

}  // namespace lpref
