// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <opencv2/videoio.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "protoef/metrics.hpp"
#include "protoef/model.hpp"
#include "protoef/pca.hpp"

namespace protoef {

struct ExplainOptions {
  double min_beta = kContributionThreshold;  // contributors need beta strictly above this
  double fps = 25.0;
  int still_columns = 4;   // frames shown per still row
  double alpha = 0.5;      // heatmap opacity
};

struct ExplainedPrototype {
  ScoreRow score;
  bool has_source = false;
  std::string source_clip;
  int source_start = 0;
  std::filesystem::path overlay_video;
  std::filesystem::path still_grid;
};

struct Explanation {
  ScoreSheet sheet;
  std::vector<ExplainedPrototype> contributors;
  std::vector<std::string> warnings;
  std::filesystem::path record_path;
};

namespace detail {

inline Volume<float> map_channel(const Volume<float>& maps, int k) {
  Volume<float> out(1, maps.frames, maps.height, maps.width);
  const std::size_t cells = maps.cells();
  std::copy_n(maps.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(k) * cells), cells,
              out.data.begin());
  return out;
}

// BGR frame t of a [C][T][H][W] clip in [0, 1]; fewer than three channels are replicated.
inline cv::Mat clip_frame_bgr(const Volume<float>& clip, int t) {
  cv::Mat out(clip.height, clip.width, CV_8UC3);
  for (int y = 0; y < clip.height; ++y)
    for (int x = 0; x < clip.width; ++x) {
      auto& px = out.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) {
        const int src = std::min(c, clip.channels - 1);
        const float v = std::clamp(clip.at(src, t, y, x), 0.0f, 1.0f);
        px[2 - c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  return out;
}

// Blends a [0, 1] heat plane over a frame with the JET colormap.
inline cv::Mat overlay_frame(const cv::Mat& frame, const Volume<float>& heat, int t, double alpha) {
  cv::Mat gray(heat.height, heat.width, CV_8UC1);
  for (int y = 0; y < heat.height; ++y)
    for (int x = 0; x < heat.width; ++x)
      gray.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(std::lround(std::clamp(heat.at(0, t, y, x), 0.0f, 1.0f) * 255.0f));
  cv::Mat color, out;
  cv::applyColorMap(gray, color, cv::COLORMAP_JET);
  cv::addWeighted(frame, 1.0 - alpha, color, alpha, 0.0, out);
  return out;
}

inline std::vector<int> still_indices(int frames, int columns) {
  std::vector<int> idx;
  const int n = std::max(1, std::min(columns, frames));
  for (int i = 0; i < n; ++i) idx.push_back(n == 1 ? 0 : static_cast<int>(std::lround(i * (frames - 1.0) / (n - 1.0))));
  return idx;
}

inline cv::Mat still_row(const Volume<float>& clip, const Volume<float>& heat, const std::vector<int>& idx, double alpha) {
  std::vector<cv::Mat> tiles;
  for (int t : idx) tiles.push_back(overlay_frame(clip_frame_bgr(clip, t), heat, t, alpha));
  cv::Mat row;
  cv::hconcat(tiles, row);
  return row;
}

inline void write_overlay_video(const std::filesystem::path& path, const Volume<float>& clip, const Volume<float>& heat,
                                double fps, double alpha) {
  cv::VideoWriter vw(path.string(), cv::VideoWriter::fourcc('M', 'J', 'P', 'G'), fps, cv::Size(clip.width, clip.height),
                     true);
  if (!vw.isOpened()) throw ConfigError("cannot open video writer for " + path.string());
  for (int t = 0; t < clip.frames; ++t) vw.write(overlay_frame(clip_frame_bgr(clip, t), heat, t, alpha));
}

inline void write_png(const std::filesystem::path& path, const cv::Mat& img) {
  if (!cv::imwrite(path.string(), img)) throw ConfigError("cannot write image " + path.string());
}

}  // namespace detail

/// Scores one clip and, for each prototype with beta above the threshold,
/// writes an overlay video of its occurrence map on the query clip and a PNG
/// still grid (query row, plus the source clip row when the prototype is
/// projected and `sources` holds its clip). Writes record.json and returns the
/// explanation. Prediction equals sum beta * label over all prototypes.
inline Explanation build_explanation(const ProtoEFNet<float>& model, const VideoClip& clip,
                                     const std::filesystem::path& out_dir, const ExplainOptions& opt = {},
                                     const DatasetSplit* sources = nullptr, const SamplingPolicy* source_policy = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const auto f = model.infer(clip.frames);
  Explanation ex;
  ex.sheet = make_score_sheet(f.s, f.head, model.bank, clip.id, clip.label);

  const auto& bank = model.bank;
  const auto stills = detail::still_indices(clip.frames.frames, opt.still_columns);
  for (const auto& row : ex.sheet.rows) {
    if (!(row.beta > opt.min_beta)) continue;
    ExplainedPrototype ep;
    ep.score = row;
    const int k = row.prototype;
    const auto heat = upsample_map_to_input(detail::map_channel(f.net.maps, k), clip.frames.frames, clip.frames.height,
                                            clip.frames.width);
    char name[64];
    std::snprintf(name, sizeof(name), "proto_%03d", k);
    ep.overlay_video = out_dir / (std::string(name) + "_overlay.avi");
    detail::write_overlay_video(ep.overlay_video, clip.frames, heat, opt.fps, opt.alpha);

    cv::Mat grid = detail::still_row(clip.frames, heat, stills, opt.alpha);
    const ProjectionRecord* rec = nullptr;
    for (const auto& r : bank.records)
      if (r.prototype == k) rec = &r;
    if (bank.projected && rec && rec->projected) {
      ep.has_source = true;
      ep.source_clip = rec->clip_id;
      ep.source_start = rec->start_frame;
      const VideoRecord* src = nullptr;
      if (sources)
        for (const auto& r : sources->records)
          if (r.id == rec->clip_id) src = &r;
      if (src && !rec->source_map.empty()) {
        SamplingPolicy pol = source_policy ? *source_policy : default_policy_for("val", clip.frames.frames);
        pol.channels = clip.frames.channels;
        const auto sclip = sample_clip_at(*src->load(), pol, rec->start_frame);
        const auto sheat = upsample_map_to_input(rec->source_map, sclip.frames.frames, sclip.frames.height,
                                                 sclip.frames.width);
        cv::Mat srow = detail::still_row(sclip.frames, sheat, detail::still_indices(sclip.frames.frames, opt.still_columns),
                                         opt.alpha);
        if (srow.cols == grid.cols) cv::vconcat(grid, srow, grid);
        else ex.warnings.push_back("prototype " + std::to_string(k) + ": source clip size differs; source row omitted");
      } else {
        ex.warnings.push_back("prototype " + std::to_string(k) + ": source clip '" + rec->clip_id +
                              "' not available; source row omitted");
      }
    } else {
      ex.warnings.push_back("prototype " + std::to_string(k) + " is not projected; no source clip");
    }
    ep.still_grid = out_dir / (std::string(name) + "_stills.png");
    detail::write_png(ep.still_grid, grid);
    ex.contributors.push_back(std::move(ep));
  }

  nlohmann::json contributors = nlohmann::json::array();
  for (const auto& ep : ex.contributors) {
    nlohmann::json c{{"prototype_index", ep.score.prototype}, {"label", ep.score.label},
                     {"theta", ep.score.theta},         {"similarity", ep.score.similarity},
                     {"beta", ep.score.beta},           {"overlay_video", ep.overlay_video.string()},
                     {"still_grid", ep.still_grid.string()}};
    c["source_clip"] = ep.has_source ? nlohmann::json(ep.source_clip) : nlohmann::json(nullptr);
    c["source_start_frame"] = ep.has_source ? nlohmann::json(ep.source_start) : nlohmann::json(nullptr);
    contributors.push_back(std::move(c));
  }
  nlohmann::json record = to_json(ex.sheet);
  record["min_beta"] = opt.min_beta;
  record["contributors"] = contributors;
  record["warnings"] = ex.warnings;
  ex.record_path = out_dir / "record.json";
  std::ofstream(ex.record_path) << record.dump(2) << '\n';
  return ex;
}

/// Scatter of the 2-D projection: feature rows as dots, prototypes as
/// outlined squares, both colored by label over [10, 90].
inline void render_pca_plot(const PrototypePlotData& data, const std::filesystem::path& path, int size = 512) {
  const auto& xy = data.pca.coords;
  if (xy.rows == 0) throw ConfigError("nothing to plot");
  double lo[2] = {xy(0, 0), xy(0, 1)}, hi[2] = {xy(0, 0), xy(0, 1)};
  for (int i = 0; i < xy.rows; ++i)
    for (int a = 0; a < 2; ++a) {
      lo[a] = std::min(lo[a], xy(i, a));
      hi[a] = std::max(hi[a], xy(i, a));
    }
  const int margin = 24;
  auto to_px = [&](int i) {
    cv::Point p;
    for (int a = 0; a < 2; ++a) {
      const double span = hi[a] - lo[a];
      const double u = span > 0 ? (xy(i, a) - lo[a]) / span : 0.5;
      const int v = margin + static_cast<int>(std::lround(u * (size - 2 * margin)));
      if (a == 0) p.x = v;
      else p.y = size - 1 - v;
    }
    return p;
  };
  cv::Mat gray(1, 256, CV_8UC1);
  for (int i = 0; i < 256; ++i) gray.at<std::uint8_t>(0, i) = static_cast<std::uint8_t>(i);
  cv::Mat lut;
  cv::applyColorMap(gray, lut, cv::COLORMAP_VIRIDIS);
  auto color = [&](double label) {
    const int i = std::clamp(static_cast<int>(std::lround((label - kLabelMin) / (kLabelMax - kLabelMin) * 255.0)), 0, 255);
    const auto c = lut.at<cv::Vec3b>(0, i);
    return cv::Scalar(c[0], c[1], c[2]);
  };
  cv::Mat img(size, size, CV_8UC3, cv::Scalar(255, 255, 255));
  for (int i = data.num_prototypes; i < xy.rows; ++i) cv::circle(img, to_px(i), 2, color(data.color_values[i]), -1);
  for (int i = 0; i < data.num_prototypes; ++i) {
    const auto p = to_px(i);
    cv::rectangle(img, p - cv::Point(5, 5), p + cv::Point(5, 5), color(data.color_values[i]), -1);
    cv::rectangle(img, p - cv::Point(5, 5), p + cv::Point(5, 5), cv::Scalar(0, 0, 0), 1);
  }
  detail::write_png(path, img);
}

}  // namespace protoef
