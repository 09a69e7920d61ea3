#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hsinet/detect.hpp"

namespace hsinet::io {

// One ground-truth box with coordinates normalized to the image size.
struct AnnotationRecord {
  std::string path;
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;

  GtBox to_pixels(double width, double height) const { return GtBox{class_id, cx * width, cy * height, w * width, h * height}; }
  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    auto field = line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) field.remove_suffix(1);
    out.push_back(field);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline double parse_real(std::string_view s, const std::string& where, const char* what) {
  double v = 0;
  const auto* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, v);
  if (s.empty() || res.ec != std::errc() || res.ptr != end || !std::isfinite(v)) {
    throw FormatError(where + ": bad " + what + " '" + std::string(s) + "'");
  }
  return v;
}

inline int parse_int(std::string_view s, const std::string& where, const char* what) {
  int v = 0;
  const auto* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, v);
  if (s.empty() || res.ec != std::errc() || res.ptr != end) {
    throw FormatError(where + ": bad " + what + " '" + std::string(s) + "'");
  }
  return v;
}

inline std::string fmt_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline constexpr const char* kAnnotationHeader = "path,class,cx,cy,w,h";

/// Parses `path,class,cx,cy,w,h` lines. Blank lines, '#' comments and a
/// leading header row are skipped. Errors name the line number.
inline std::vector<AnnotationRecord> parse_annotations(std::istream& in, const std::string& source = "<annotations>") {
  std::vector<AnnotationRecord> out;
  std::string line;
  int lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno);
    std::string_view v(line);
    while (!v.empty() && (v.back() == '\r' || v.back() == ' ')) v.remove_suffix(1);
    if (v.empty() || v.front() == '#') continue;
    const auto f = detail::split_csv(v);
    if (first && !f.empty() && f[0] == "path") {
      first = false;
      continue;
    }
    first = false;
    if (f.size() != 6) throw FormatError(where + ": expected 6 fields, got " + std::to_string(f.size()));
    AnnotationRecord r;
    r.path = std::string(f[0]);
    if (r.path.empty()) throw FormatError(where + ": empty image path");
    r.class_id = detail::parse_int(f[1], where, "class");
    if (r.class_id < 0) throw FormatError(where + ": negative class id");
    r.cx = detail::parse_real(f[2], where, "cx");
    r.cy = detail::parse_real(f[3], where, "cy");
    r.w = detail::parse_real(f[4], where, "w");
    r.h = detail::parse_real(f[5], where, "h");
    for (double c : {r.cx, r.cy, r.w, r.h}) {
      if (c < 0 || c > 1) throw FormatError(where + ": coordinate " + detail::fmt_real(c) + " outside [0,1]");
    }
    if (!(r.w > 0) || !(r.h > 0)) throw FormatError(where + ": box width and height must be positive");
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<AnnotationRecord> read_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return parse_annotations(in, path);
}

// Shortest round-trip formatting, so write -> parse is exact.
inline std::string format_annotations(const std::vector<AnnotationRecord>& recs) {
  std::string out = std::string(kAnnotationHeader) + "\n";
  for (const auto& r : recs) {
    if (r.path.find(',') != std::string::npos) throw ValueError("annotation path contains a comma: " + r.path);
    out += r.path + "," + std::to_string(r.class_id) + "," + detail::fmt_real(r.cx) + "," + detail::fmt_real(r.cy) +
           "," + detail::fmt_real(r.w) + "," + detail::fmt_real(r.h) + "\n";
  }
  return out;
}

inline void write_annotations(const std::vector<AnnotationRecord>& recs, const std::string& path) {
  const std::string text = format_annotations(recs);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << text;
}

// Image paths in an annotation file are relative to the file's directory.
inline std::string resolve_relative(const std::string& annotation_file, const std::string& image_path) {
  const std::filesystem::path p(image_path);
  if (p.is_absolute()) return image_path;
  return (std::filesystem::path(annotation_file).parent_path() / p).string();
}

// Detection rows in source-image pixels: path,class,score,x1,y1,x2,y2
struct DetectionRecord {
  std::string path;
  int class_id = 0;
  double score = 0;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

inline constexpr const char* kDetectionHeader = "path,class,score,x1,y1,x2,y2";

inline std::string format_detections(const std::vector<DetectionRecord>& recs) {
  std::string out = std::string(kDetectionHeader) + "\n";
  char buf[256];
  for (const auto& r : recs) {
    std::snprintf(buf, sizeof buf, ",%d,%.6f,%.3f,%.3f,%.3f,%.3f\n", r.class_id, r.score, r.x1, r.y1, r.x2, r.y2);
    out += r.path + buf;
  }
  return out;
}

inline std::vector<DetectionRecord> parse_detections(std::istream& in, const std::string& source = "<detections>") {
  std::vector<DetectionRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno);
    std::string_view v(line);
    while (!v.empty() && (v.back() == '\r' || v.back() == ' ')) v.remove_suffix(1);
    if (v.empty() || v.front() == '#') continue;
    const auto f = detail::split_csv(v);
    if (f[0] == "path") continue;
    if (f.size() != 7) throw FormatError(where + ": expected 7 fields, got " + std::to_string(f.size()));
    DetectionRecord r;
    r.path = std::string(f[0]);
    r.class_id = detail::parse_int(f[1], where, "class");
    r.score = detail::parse_real(f[2], where, "score");
    r.x1 = detail::parse_real(f[3], where, "x1");
    r.y1 = detail::parse_real(f[4], where, "y1");
    r.x2 = detail::parse_real(f[5], where, "x2");
    r.y2 = detail::parse_real(f[6], where, "y2");
    if (r.x2 < r.x1 || r.y2 < r.y1) throw FormatError(where + ": inverted box corners");
    out.push_back(std::move(r));
  }
  return out;
}

// Inclusive pixel bounds of a decoded mask.
struct PixelBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int width() const { return x1 - x0 + 1; }
  int height() const { return y1 - y0 + 1; }
  friend bool operator==(const PixelBox&, const PixelBox&) = default;
};

/// Tight bounding box of a run-length mask. Runs are "start length" pairs,
/// starts 1-indexed into the column-major (top-to-bottom, then left-to-right)
/// pixel order. Returns nothing for an empty mask.
inline std::optional<PixelBox> rle_to_bbox(std::string_view rle, int height, int width) {
  if (height < 1 || width < 1) throw ValueError("rle: image size must be positive");
  const long long total = static_cast<long long>(height) * width;
  std::vector<long long> nums;
  std::size_t pos = 0;
  while (pos < rle.size()) {
    while (pos < rle.size() && (rle[pos] == ' ' || rle[pos] == '\t' || rle[pos] == '\n' || rle[pos] == '\r')) ++pos;
    if (pos >= rle.size()) break;
    long long v = 0;
    const auto res = std::from_chars(rle.data() + pos, rle.data() + rle.size(), v);
    if (res.ec != std::errc()) throw FormatError("rle: non-numeric token at offset " + std::to_string(pos));
    pos = static_cast<std::size_t>(res.ptr - rle.data());
    if (pos < rle.size() && rle[pos] != ' ' && rle[pos] != '\t' && rle[pos] != '\n' && rle[pos] != '\r') {
      throw FormatError("rle: non-numeric token at offset " + std::to_string(pos));
    }
    nums.push_back(v);
  }
  if (nums.size() % 2) throw FormatError("rle: odd number of values (start/length pairs expected)");
  std::optional<PixelBox> box;
  for (std::size_t i = 0; i < nums.size(); i += 2) {
    const long long start = nums[i], len = nums[i + 1];
    if (start < 1 || len < 1 || start - 1 + len > total) {
      throw FormatError("rle: run (" + std::to_string(start) + ", " + std::to_string(len) + ") outside a " +
                        std::to_string(height) + "x" + std::to_string(width) + " image");
    }
    const long long first = start - 1, last = start - 2 + len;
    const int c0 = static_cast<int>(first / height), c1 = static_cast<int>(last / height);
    // A run that wraps into the next column reaches both the bottom row (in
    // its first column) and the top row (in its last).
    const bool wraps = c1 > c0;
    const int top = wraps ? 0 : static_cast<int>(first % height);
    const int bottom = wraps ? height - 1 : static_cast<int>(last % height);
    const PixelBox b{c0, top, c1, bottom};
    if (!box) {
      box = b;
    } else {
      box->x0 = std::min(box->x0, b.x0);
      box->y0 = std::min(box->y0, b.y0);
      box->x1 = std::max(box->x1, b.x1);
      box->y1 = std::max(box->y1, b.y1);
    }
  }
  return box;
}

}  // namespace hsinet::io
