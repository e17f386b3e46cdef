#pragma once

// Ground-truth and label ingestion, detection-line validation, PGM/PPM
// decoding and the 30x30 thumbnail near-duplicate filter.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lpref/error.hpp"
#include "lpref/scoring.hpp"
#include "lpref/track1.hpp"

namespace lpref {

namespace detail {

inline std::vector<std::string> split_ws(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline bool parse_double(const std::string& s, double& out) {
  try {
    std::size_t used = 0;
    out = std::stod(s, &used);
    return used == s.size() && std::isfinite(out);
  } catch (const std::logic_error&) {
    return false;
  }
}

inline bool parse_int(const std::string& s, int& out) {
  try {
    std::size_t used = 0;
    out = std::stoi(s, &used);
    return used == s.size();
  } catch (const std::logic_error&) {
    return false;
  }
}

inline bool skippable(std::string_view line) {
  const auto first = line.find_first_not_of(" \t\r");
  return first == std::string_view::npos || line[first] == '#';
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

// Parses the four box fields, appending the names of offending fields.
inline BoundingBox parse_box(const std::vector<std::string>& f, std::size_t at,
                             std::vector<std::string>& bad) {
  BoundingBox b;
  const char* names[] = {"xmin", "ymin", "xmax", "ymax"};
  double* slots[] = {&b.xmin, &b.ymin, &b.xmax, &b.ymax};
  bool numeric = true;
  for (int k = 0; k < 4; ++k) {
    if (!parse_double(f[at + k], *slots[k])) {
      bad.emplace_back(std::string(names[k]) + " (not a finite number)");
      numeric = false;
    }
  }
  if (numeric) {
    if (!(b.xmin < b.xmax)) bad.emplace_back("xmin/xmax (xmin must be < xmax)");
    if (!(b.ymin < b.ymax)) bad.emplace_back("ymin/ymax (ymin must be < ymax)");
  }
  return b;
}

}  // namespace detail

// `<category_id> <name>` per line; the name may contain spaces.
inline LabelSpace parse_label_space(std::istream& in,
                                    const std::string& source = "<labels>") {
  std::map<int, std::string> names;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::skippable(line)) continue;
    std::istringstream ss(line);
    std::string id_text;
    ss >> id_text;
    std::string name;
    std::getline(ss >> std::ws, name);
    int id = 0;
    if (!detail::parse_int(id_text, id) || id < 1 || name.empty()) {
      throw Error(ErrorKind::kParse, source + ":" + std::to_string(line_no) +
                                         ": expected '<category_id> <name>'");
    }
    if (!names.emplace(id, name).second) {
      throw Error(ErrorKind::kValidation, source + ":" + std::to_string(line_no) +
                                              ": duplicate category " + id_text);
    }
  }
  return LabelSpace(std::move(names));
}

inline LabelSpace load_label_space(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open label file '" + path + "'");
  return parse_label_space(in, path);
}

struct GroundTruthSet {
  std::vector<GroundTruthObject> objects;
  LabelSpace label_space;
  std::set<std::string> image_ids;
};

// `<image_id> <category_id> <xmin> <ymin> <xmax> <ymax>` per line. Either the
// whole file loads or an Error listing every offending line is thrown.
inline GroundTruthSet parse_ground_truth(std::istream& in, LabelSpace labels,
                                         const std::string& source = "<gt>") {
  GroundTruthSet set;
  set.label_space = std::move(labels);
  std::vector<std::string> problems;
  ErrorKind kind = ErrorKind::kValidation;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::skippable(line)) continue;
    const auto f = detail::split_ws(line);
    const auto where = source + ":" + std::to_string(line_no) + ": ";
    if (f.size() != 6) {
      problems.push_back(where + "expected 6 fields, got " + std::to_string(f.size()));
      kind = ErrorKind::kParse;
      continue;
    }
    std::vector<std::string> bad;
    GroundTruthObject obj;
    obj.image_id = f[0];
    if (!detail::parse_int(f[1], obj.category_id)) {
      bad.emplace_back("category_id (not an integer)");
    } else if (!set.label_space.contains(obj.category_id)) {
      bad.emplace_back("category_id (" + f[1] + " not in label space of " +
                       std::to_string(set.label_space.size()) + " classes)");
    }
    obj.box = detail::parse_box(f, 2, bad);
    if (!bad.empty()) {
      problems.push_back(where + detail::join(bad, ", "));
      continue;
    }
    set.image_ids.insert(obj.image_id);
    set.objects.push_back(std::move(obj));
  }
  if (!problems.empty()) {
    throw Error(kind, "ground truth rejected:\n  " + detail::join(problems, "\n  "));
  }
  return set;
}

inline GroundTruthSet load_ground_truth(const std::string& path, LabelSpace labels) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open ground truth '" + path + "'");
  return parse_ground_truth(in, std::move(labels), path);
}

struct LineError {
  std::size_t line = 0;
  std::string message;
};

struct ParsedDetections {
  std::vector<Detection> detections;
  std::vector<LineError> errors;
};

// Result lines `<image_id> <category_id> <confidence> <xmin> <ymin> <xmax> <ymax>`.
// Invalid lines are reported with the offending fields and left out.
inline ParsedDetections parse_detection_lines(
    std::string_view text, const LabelSpace& labels,
    const std::function<bool(const std::string&)>& known_image = {}) {
  ParsedDetections out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (detail::skippable(line)) continue;
    const auto f = detail::split_ws(line);
    if (f.size() != 7) {
      out.errors.push_back({line_no, "expected 7 fields, got " + std::to_string(f.size())});
      continue;
    }
    std::vector<std::string> bad;
    Detection d;
    d.image_id = f[0];
    if (known_image && !known_image(d.image_id)) {
      bad.emplace_back("image_id (unknown image '" + d.image_id + "')");
    }
    if (!detail::parse_int(f[1], d.category_id)) {
      bad.emplace_back("category_id (not an integer)");
    } else if (!labels.contains(d.category_id)) {
      bad.emplace_back("category_id (" + f[1] + " not in label space)");
    }
    if (!detail::parse_double(f[2], d.confidence)) {
      bad.emplace_back("confidence (not a finite number)");
    } else if (d.confidence < 0.0 || d.confidence > 1.0) {
      bad.emplace_back("confidence (must be in [0, 1])");
    }
    d.box = detail::parse_box(f, 3, bad);
    if (!bad.empty()) {
      out.errors.push_back({line_no, detail::join(bad, ", ")});
      continue;
    }
    out.detections.push_back(std::move(d));
  }
  return out;
}

inline std::string format_detection_line(const Detection& d) {
  std::ostringstream os;
  os << std::setprecision(17) << d.image_id << ' ' << d.category_id << ' '
     << d.confidence << ' ' << d.box.xmin << ' ' << d.box.ymin << ' '
     << d.box.xmax << ' ' << d.box.ymax;
  return os.str();
}

// ---------------------------------------------------------------------------
// Images and thumbnails

inline constexpr int kThumbnailSide = 30;
inline constexpr std::size_t kThumbnailPixels = kThumbnailSide * kThumbnailSide;

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

// Integer luma approximation.
constexpr std::uint8_t luma(unsigned r, unsigned g, unsigned b) {
  return static_cast<std::uint8_t>((77 * r + 150 * g + 29 * b) >> 8);
}

// Binary (P5/P6) and ASCII (P2/P3) netpbm, any maxval; RGB reduced to luma.
inline GrayImage decode_pnm(std::string_view bytes, const std::string& source = "<image>") {
  std::size_t pos = 0;
  auto fail = [&](const std::string& msg) -> void {
    throw Error(ErrorKind::kParse, source + ": " + msg);
  };
  auto skip_ws_comments = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&]() -> unsigned {
    skip_ws_comments();
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      fail("truncated or malformed header");
    }
    unsigned long v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<unsigned>(bytes[pos++] - '0');
      if (v > 1'000'000'000UL) fail("header value too large");
    }
    return static_cast<unsigned>(v);
  };

  if (bytes.size() < 2 || bytes[0] != 'P') fail("not a PGM/PPM file");
  const char kind = bytes[1];
  if (kind != '2' && kind != '3' && kind != '5' && kind != '6') {
    fail(std::string("unsupported netpbm type P") + kind);
  }
  pos = 2;
  const unsigned w = read_uint();
  const unsigned h = read_uint();
  const unsigned maxval = read_uint();
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) fail("bad dimensions or maxval");
  if (static_cast<unsigned long long>(w) * h > (1ULL << 28)) fail("image too large");
  const bool rgb = kind == '3' || kind == '6';
  const bool binary = kind == '5' || kind == '6';
  const std::size_t channels = rgb ? 3 : 1;
  const std::size_t count = static_cast<std::size_t>(w) * h * channels;

  std::vector<unsigned> samples(count);
  if (binary) {
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
      fail("missing whitespace before raster");
    }
    ++pos;
    const std::size_t width_bytes = maxval > 255 ? 2 : 1;
    if (bytes.size() - pos < count * width_bytes) fail("truncated raster");
    for (std::size_t i = 0; i < count; ++i) {
      const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos + i * width_bytes);
      samples[i] = width_bytes == 2 ? (static_cast<unsigned>(p[0]) << 8) | p[1] : p[0];
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) samples[i] = read_uint();
  }

  GrayImage img;
  img.width = static_cast<int>(w);
  img.height = static_cast<int>(h);
  img.pixels.resize(static_cast<std::size_t>(w) * h);
  auto to8 = [maxval](unsigned v) -> unsigned {
    v = std::min(v, maxval);
    return (v * 255u + maxval / 2) / maxval;
  };
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    if (rgb) {
      img.pixels[i] = luma(to8(samples[3 * i]), to8(samples[3 * i + 1]), to8(samples[3 * i + 2]));
    } else {
      img.pixels[i] = static_cast<std::uint8_t>(to8(samples[i]));
    }
  }
  return img;
}

struct Thumbnail {
  std::array<std::uint8_t, kThumbnailPixels> pixels{};

  friend bool operator==(const Thumbnail&, const Thumbnail&) = default;
};

// Area-averaging (box filter) resize to 30x30 in integer arithmetic. Source
// pixel x spans [30x, 30x+30) and target cell i spans [W*i, W*(i+1)) in units
// of 1/30 source pixel, so every overlap is an exact integer.
inline Thumbnail make_thumbnail(const GrayImage& img) {
  if (img.width <= 0 || img.height <= 0 ||
      img.pixels.size() != static_cast<std::size_t>(img.width) * img.height) {
    throw Error(ErrorKind::kInvalidInput, "make_thumbnail: malformed image");
  }
  constexpr std::int64_t kSide = kThumbnailSide;
  const std::int64_t W = img.width;
  const std::int64_t H = img.height;
  auto overlaps = [](std::int64_t cell, std::int64_t extent) {
    // (source index, overlap length) pairs for one target cell along an axis.
    std::vector<std::pair<std::int64_t, std::int64_t>> out;
    const std::int64_t lo = extent * cell;
    const std::int64_t hi = extent * (cell + 1);
    for (std::int64_t s = lo / kSide; s * kSide < hi; ++s) {
      const std::int64_t a = std::max(lo, s * kSide);
      const std::int64_t b = std::min(hi, (s + 1) * kSide);
      if (b > a) out.emplace_back(s, b - a);
    }
    return out;
  };
  Thumbnail t;
  const std::int64_t cell_area = W * H;
  for (std::int64_t ty = 0; ty < kSide; ++ty) {
    const auto ys = overlaps(ty, H);
    for (std::int64_t tx = 0; tx < kSide; ++tx) {
      const auto xs = overlaps(tx, W);
      std::int64_t sum = 0;
      for (const auto& [sy, wy] : ys) {
        const auto* row = img.pixels.data() + sy * W;
        for (const auto& [sx, wx] : xs) sum += row[sx] * wy * wx;
      }
      t.pixels[static_cast<std::size_t>(ty * kSide + tx)] =
          static_cast<std::uint8_t>((sum + cell_area / 2) / cell_area);
    }
  }
  return t;
}

inline Thumbnail load_thumbnail(const std::filesystem::path& path) {
  return make_thumbnail(decode_pnm(read_file_bytes(path), path.string()));
}

// Euclidean norm of the 900-element difference.
inline double thumbnail_distance(const Thumbnail& a, const Thumbnail& b) {
  std::uint64_t sum = 0;
  for (std::size_t i = 0; i < kThumbnailPixels; ++i) {
    const int d = static_cast<int>(a.pixels[i]) - static_cast<int>(b.pixels[i]);
    sum += static_cast<std::uint64_t>(d * d);
  }
  return std::sqrt(static_cast<double>(sum));
}

struct NamedThumbnail {
  std::string id;
  Thumbnail thumbnail;
};

struct DuplicatePair {
  std::string candidate_id;
  std::string reference_id;
  double distance = 0;

  friend bool operator==(const DuplicatePair&, const DuplicatePair&) = default;
};

// Every (candidate, reference) pair within `threshold`, ascending distance;
// equal distances keep candidate-then-reference input order.
inline std::vector<DuplicatePair> find_duplicates(std::span<const NamedThumbnail> candidates,
                                                  std::span<const NamedThumbnail> reference,
                                                  double threshold) {
  if (!(threshold > 0) || !std::isfinite(threshold)) {
    throw Error(ErrorKind::kInvalidInput, "dedup threshold must be > 0");
  }
  std::vector<DuplicatePair> out;
  for (const auto& c : candidates) {
    for (const auto& r : reference) {
      const double d = thumbnail_distance(c.thumbnail, r.thumbnail);
      if (d <= threshold) out.push_back({c.id, r.id, d});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const DuplicatePair& a, const DuplicatePair& b) {
    return a.distance < b.distance;
  });
  return out;
}

inline std::string format_dedup_report(std::span<const DuplicatePair> pairs, double threshold) {
  std::ostringstream os;
  os << "# thumbnails: 30x30 grayscale (luma (77R+150G+29B)>>8, area-average resize), L2 norm\n";
  os << "# threshold: " << std::setprecision(17) << threshold << '\n';
  os << "# candidate_id,reference_id,distance\n";
  for (const auto& p : pairs) {
    os << p.candidate_id << ',' << p.reference_id << ',' << p.distance << '\n';
  }
  return os.str();
}

// All *.pgm / *.ppm files in a directory (sorted by name), id = file stem.
inline std::vector<NamedThumbnail> load_thumbnail_dir(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) {
    throw Error(ErrorKind::kIo, "not a directory: '" + dir.string() + "'");
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto ext = entry.path().extension().string();
    if (entry.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<NamedThumbnail> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back({f.stem().string(), load_thumbnail(f)});
  return out;
}

}  // namespace lpref
