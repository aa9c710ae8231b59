// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <opencv2/imgproc.hpp>
#include <opencv2/videoio.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "protoef/data.hpp"

namespace protoef {

// EchoNet-Dynamic layout:
//   <root>/FileList.csv        header includes FileName, EF, Split (TRAIN|VAL|TEST)
//   <root>/Videos/<name>.avi   112x112 RGB clips
//   <root>/VolumeTracings.csv  optional; FileName,X1,Y1,X2,Y2,Frame per traced chord

struct EchonetIngest {
  DatasetSplit train, val, test;
  std::vector<std::string> skip_log;
  bool masks_available = false;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

inline bool parse_double(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto res = std::from_chars(b, e, out);
  return res.ec == std::errc() && res.ptr == e;
}

inline std::string strip_avi(std::string name) {
  if (name.size() > 4 && lower(name.substr(name.size() - 4)) == ".avi") name.resize(name.size() - 4);
  return name;
}

struct Chord {
  double x1, y1, x2, y2;
};

// frame -> chords, in file order
using Tracing = std::map<int, std::vector<Chord>>;

// Each traced frame becomes a polygon: left endpoints top-to-bottom followed by
// right endpoints bottom-to-top. The union over traced frames is used for every
// frame of the video.
inline std::vector<std::uint8_t> rasterize_tracing(const Tracing& tracing, int height, int width) {
  cv::Mat mask = cv::Mat::zeros(height, width, CV_8UC1);
  for (const auto& [frame, chords] : tracing) {
    (void)frame;
    if (chords.size() < 2) continue;
    std::vector<cv::Point> poly;
    for (const auto& c : chords) poly.emplace_back(static_cast<int>(std::lround(c.x1)), static_cast<int>(std::lround(c.y1)));
    for (auto it = chords.rbegin(); it != chords.rend(); ++it)
      poly.emplace_back(static_cast<int>(std::lround(it->x2)), static_cast<int>(std::lround(it->y2)));
    std::vector<std::vector<cv::Point>> polys{poly};
    cv::fillPoly(mask, polys, cv::Scalar(1));
  }
  return {mask.datastart, mask.dataend};
}

}  // namespace detail

/// Decodes an AVI file into RGB frames. An optional single-frame mask
/// (height*width) is replicated over all frames.
inline std::shared_ptr<const Video> decode_avi(const std::filesystem::path& path,
                                               const std::vector<std::uint8_t>& frame_mask = {}) {
  if (!std::filesystem::is_regular_file(path)) throw ConfigError("missing video file " + path.string());
  cv::VideoCapture cap(path.string());
  if (!cap.isOpened()) throw ConfigError("cannot decode video " + path.string());
  auto v = std::make_shared<Video>();
  v->channels = 3;
  cv::Mat frame, rgb;
  while (cap.read(frame)) {
    if (frame.empty()) break;
    if (v->frames == 0) {
      v->height = frame.rows;
      v->width = frame.cols;
    } else if (frame.rows != v->height || frame.cols != v->width) {
      throw ConfigError("inconsistent frame size in " + path.string());
    }
    cv::cvtColor(frame, rgb, frame.channels() == 1 ? cv::COLOR_GRAY2RGB : cv::COLOR_BGR2RGB);
    if (!rgb.isContinuous()) rgb = rgb.clone();
    v->pixels.insert(v->pixels.end(), rgb.datastart, rgb.dataend);
    ++v->frames;
  }
  if (v->frames == 0) throw ConfigError("video has no decodable frames: " + path.string());
  if (!frame_mask.empty()) {
    if (frame_mask.size() != v->frame_cells()) throw ConfigError("tracing mask size mismatch for " + path.string());
    v->mask.reserve(static_cast<std::size_t>(v->frames) * frame_mask.size());
    for (int t = 0; t < v->frames; ++t) v->mask.insert(v->mask.end(), frame_mask.begin(), frame_mask.end());
  }
  return v;
}

/// Reads the EchoNet-Dynamic file layout into train/val/test splits. Videos
/// are decoded lazily. Rows whose video is missing or whose fields do not
/// parse are skipped and recorded in skip_log. Labels outside [10, 90] are
/// clamped into that range (also logged).
inline EchonetIngest ingest_echonet_layout(const std::filesystem::path& root, int frame_height = 112,
                                           int frame_width = 112) {
  const auto list_path = root / "FileList.csv";
  std::ifstream list(list_path);
  if (!list) throw ConfigError("missing file-list table " + list_path.string());

  std::string line;
  if (!std::getline(list, line)) throw ConfigError("empty file-list table " + list_path.string());
  const auto header = detail::split_csv_line(line);
  int col_name = -1, col_ef = -1, col_split = -1;
  for (int i = 0; i < static_cast<int>(header.size()); ++i) {
    const auto h = detail::lower(header[i]);
    if (h == "filename") col_name = i;
    if (h == "ef") col_ef = i;
    if (h == "split") col_split = i;
  }
  if (col_name < 0 || col_ef < 0 || col_split < 0)
    throw ConfigError("file-list table must have FileName, EF and Split columns");

  EchonetIngest out;
  out.train.name = "train";
  out.val.name = "val";
  out.test.name = "test";
  out.train.policy = default_policy_for("train");
  out.val.policy = default_policy_for("val");
  out.test.policy = default_policy_for("test");

  // tracings keyed by video stem
  std::map<std::string, detail::Tracing> tracings;
  std::ifstream tr(root / "VolumeTracings.csv");
  if (tr && std::getline(tr, line)) {
    const auto th = detail::split_csv_line(line);
    std::map<std::string, int> col;
    for (int i = 0; i < static_cast<int>(th.size()); ++i) col[detail::lower(th[i])] = i;
    const bool ok = col.count("filename") && col.count("x1") && col.count("y1") && col.count("x2") &&
                    col.count("y2") && col.count("frame");
    while (ok && std::getline(tr, line)) {
      const auto f = detail::split_csv_line(line);
      if (f.size() < th.size()) continue;
      detail::Chord c{};
      double frame = 0;
      if (!detail::parse_double(f[col["x1"]], c.x1) || !detail::parse_double(f[col["y1"]], c.y1) ||
          !detail::parse_double(f[col["x2"]], c.x2) || !detail::parse_double(f[col["y2"]], c.y2) ||
          !detail::parse_double(f[col["frame"]], frame))
        continue;
      tracings[detail::strip_avi(f[col["filename"]])][static_cast<int>(frame)].push_back(c);
    }
  }
  out.masks_available = !tracings.empty();

  int row = 1;
  while (std::getline(list, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto f = detail::split_csv_line(line);
    const auto where = list_path.filename().string() + ":" + std::to_string(row);
    const int need = std::max({col_name, col_ef, col_split});
    if (static_cast<int>(f.size()) <= need) {
      out.skip_log.push_back(where + ": too few fields");
      continue;
    }
    double ef = 0.0;
    if (!detail::parse_double(f[col_ef], ef)) {
      out.skip_log.push_back(where + ": unparsable EF '" + f[col_ef] + "'");
      continue;
    }
    const auto split = detail::lower(f[col_split]);
    DatasetSplit* target = split == "train" ? &out.train : split == "val" ? &out.val : split == "test" ? &out.test : nullptr;
    if (!target) {
      out.skip_log.push_back(where + ": unknown split '" + f[col_split] + "'");
      continue;
    }
    const auto stem = detail::strip_avi(f[col_name]);
    auto video_path = root / "Videos" / (stem + ".avi");
    if (!std::filesystem::exists(video_path)) {
      out.skip_log.push_back(where + ": missing video file for " + stem);
      continue;
    }
    if (ef < kLabelMin || ef > kLabelMax) {
      out.skip_log.push_back(where + ": EF " + f[col_ef] + " clamped into [10, 90]");
      ef = std::clamp(ef, kLabelMin, kLabelMax);
    }
    VideoRecord rec;
    rec.id = stem;
    rec.label = ef;
    rec.path = video_path;
    std::vector<std::uint8_t> mask;
    if (auto it = tracings.find(stem); it != tracings.end())
      mask = detail::rasterize_tracing(it->second, frame_height, frame_width);
    rec.loader = [mask = std::move(mask)](const std::filesystem::path& p) { return decode_avi(p, mask); };
    target->records.push_back(std::move(rec));
  }
  return out;
}

}  // namespace protoef
