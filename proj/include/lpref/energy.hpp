#pragma once

// Power traces, trapezoidal energy integration over a session window, and the
// energy-normalized score.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lpref/error.hpp"

namespace lpref {

inline constexpr double kMsPerHour = 3'600'000.0;
inline constexpr double kDefaultMaxGapMs = 1000.0;

struct PowerSample {
  double t_ms = 0;  // since session epoch (login = 0)
  double watts = 0;
};

class PowerTrace {
 public:
  PowerTrace() = default;

  // Validates: strictly increasing timestamps, finite non-negative watts.
  explicit PowerTrace(std::vector<PowerSample> samples)
      : samples_(std::move(samples)) {
    for (std::size_t i = 0; i < samples_.size(); ++i) {
      const auto& s = samples_[i];
      if (!std::isfinite(s.t_ms) || !std::isfinite(s.watts) || s.watts < 0) {
        throw Error(ErrorKind::kInvalidInput,
                    "power sample " + std::to_string(i) +
                        " must have a finite timestamp and finite watts >= 0");
      }
      if (i > 0 && !(s.t_ms > samples_[i - 1].t_ms)) {
        throw Error(ErrorKind::kInvalidInput,
                    "power trace timestamps must be strictly increasing (sample " +
                        std::to_string(i) + ")");
      }
    }
  }

  const std::vector<PowerSample>& samples() const { return samples_; }
  bool empty() const { return samples_.empty(); }

  // Linear interpolation; `t_ms` must lie within the trace.
  double watts_at(double t_ms) const {
    auto it = std::lower_bound(
        samples_.begin(), samples_.end(), t_ms,
        [](const PowerSample& s, double t) { return s.t_ms < t; });
    if (it == samples_.end()) return samples_.back().watts;
    if (it->t_ms == t_ms || it == samples_.begin()) return it->watts;
    const auto& hi = *it;
    const auto& lo = *(it - 1);
    const double f = (t_ms - lo.t_ms) / (hi.t_ms - lo.t_ms);
    return lo.watts + f * (hi.watts - lo.watts);
  }

 private:
  std::vector<PowerSample> samples_;
};

struct EnergyWindow {
  double start_ms = 0;
  double end_ms = 0;

  double length_ms() const { return end_ms - start_ms; }
};

// Trapezoidal integral of power over [window.start, window.end] in Wh.
inline double integrate_energy(const PowerTrace& trace,
                               const EnergyWindow& window) {
  if (trace.empty()) {
    throw Error(ErrorKind::kMissingTrace, "power trace is empty");
  }
  if (!(window.start_ms < window.end_ms)) {
    throw Error(ErrorKind::kInvalidInput,
                "energy window must satisfy start < end");
  }
  const auto& s = trace.samples();
  if (s.front().t_ms > window.start_ms) {
    throw Error(ErrorKind::kCoverage,
                "power trace starts at " + std::to_string(s.front().t_ms) +
                    " ms, after window start " +
                    std::to_string(window.start_ms) + " ms (gap [" +
                    std::to_string(window.start_ms) + ", " +
                    std::to_string(s.front().t_ms) + "] ms uncovered)");
  }
  if (s.back().t_ms < window.end_ms) {
    throw Error(ErrorKind::kCoverage,
                "power trace ends at " + std::to_string(s.back().t_ms) +
                    " ms, before window end " + std::to_string(window.end_ms) +
                    " ms (gap [" + std::to_string(s.back().t_ms) + ", " +
                    std::to_string(window.end_ms) + "] ms uncovered)");
  }

  double watt_ms = 0.0;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) {
    const double lo = std::max(s[i].t_ms, window.start_ms);
    const double hi = std::min(s[i + 1].t_ms, window.end_ms);
    if (!(lo < hi)) continue;
    const double slope = (s[i + 1].watts - s[i].watts) / (s[i + 1].t_ms - s[i].t_ms);
    const double p_lo = s[i].watts + slope * (lo - s[i].t_ms);
    const double p_hi = s[i].watts + slope * (hi - s[i].t_ms);
    watt_ms += 0.5 * (p_lo + p_hi) * (hi - lo);
  }
  return watt_ms / kMsPerHour;
}

// Score = mAP / Wh.
inline double compute_score(double map_value, double energy_wh) {
  if (!std::isfinite(energy_wh) || energy_wh <= 0) {
    throw Error(ErrorKind::kDivisionGuard,
                "energy must be > 0 Wh for a scored run");
  }
  if (!(map_value >= 0.0 && map_value <= 1.0)) {
    throw Error(ErrorKind::kInvalidInput, "mAP must be in [0, 1]");
  }
  return map_value / energy_wh;
}

struct TraceGap {
  double from_ms = 0;
  double to_ms = 0;
};

// Consecutive samples further apart than `max_gap_ms`. Advisory only.
inline std::vector<TraceGap> find_gaps(const PowerTrace& trace,
                                       double max_gap_ms = kDefaultMaxGapMs) {
  std::vector<TraceGap> gaps;
  const auto& s = trace.samples();
  for (std::size_t i = 0; i + 1 < s.size(); ++i) {
    if (s[i + 1].t_ms - s[i].t_ms > max_gap_ms) {
      gaps.push_back({s[i].t_ms, s[i + 1].t_ms});
    }
  }
  return gaps;
}

// `<t_ms>,<watts>` per line; `#` starts a comment line; blank lines ignored.
inline PowerTrace parse_power_trace(std::istream& in,
                                    const std::string& source = "<trace>") {
  std::vector<PowerSample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    PowerSample sample;
    char comma = 0;
    std::string rest;
    if (!(fields >> sample.t_ms >> comma >> sample.watts) || comma != ',' ||
        (fields >> rest)) {
      throw Error(ErrorKind::kParse, source + ":" + std::to_string(line_no) +
                                         ": expected '<t_ms>,<watts>'");
    }
    samples.push_back(sample);
  }
  try {
    return PowerTrace(std::move(samples));
  } catch (const Error& e) {
    throw Error(e.kind(), source + ": " + e.what());
  }
}

inline PowerTrace load_power_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open power trace '" + path + "'");
  return parse_power_trace(in, path);
}

}  // namespace lpref
