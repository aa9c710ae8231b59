// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "protoef/random.hpp"
#include "protoef/volume.hpp"

namespace protoef {

inline constexpr double kLabelMin = 10.0;
inline constexpr double kLabelMax = 90.0;

/// Full-length video as decoded: 8-bit pixels laid out [frame][row][col][channel],
/// plus an optional binary target-region mask laid out [frame][row][col].
struct Video {
  int frames = 0;
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> mask;  // empty when absent

  bool has_mask() const { return !mask.empty(); }
  std::size_t frame_pixels() const { return static_cast<std::size_t>(height) * width * channels; }
  std::size_t frame_cells() const { return static_cast<std::size_t>(height) * width; }
};

/// One dataset entry. The video is either held in memory or decoded on demand
/// through `loader` (used for large on-disk datasets).
struct VideoRecord {
  std::string id;
  double label = 0.0;
  std::shared_ptr<const Video> video;
  std::filesystem::path path;
  std::function<std::shared_ptr<const Video>(const std::filesystem::path&)> loader;

  std::shared_ptr<const Video> load() const {
    if (video) return video;
    if (loader) return loader(path);
    throw ConfigError("video record '" + id + "' has neither data nor a loader");
  }
};

enum class StartRule { kUniformRandom, kDeterministicZero };

struct SamplingPolicy {
  int clip_length = 64;
  int period = 1;
  StartRule start_rule = StartRule::kDeterministicZero;
  int channels = 3;  // grayscale sources are replicated up to this count
};

struct DatasetSplit {
  std::string name;  // train | val | test
  std::vector<VideoRecord> records;
  SamplingPolicy policy;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
};

inline SamplingPolicy default_policy_for(const std::string& split_name, int clip_length = 64, int period = 1) {
  SamplingPolicy p;
  p.clip_length = clip_length;
  p.period = period;
  p.start_rule = split_name == "train" ? StartRule::kUniformRandom : StartRule::kDeterministicZero;
  return p;
}

/// Model-ready clip: frames as floats in [0,1] laid out [C][T][H][W].
struct VideoClip {
  std::string id;
  double label = 0.0;
  int start_frame = 0;
  Volume<float> frames;
  std::optional<Volume<std::uint8_t>> mask;  // single channel, [1][T][H][W]
};

// ---------------------------------------------------------------------------
// Synthetic pulsating-ellipse task
// ---------------------------------------------------------------------------

/// Parameters of one synthetic video family. The label is the fractional
/// area change of the ellipse over a cycle, in percent.
struct SynthSpec {
  int height = 64;
  int width = 64;
  int num_frames = 96;
  int period_frames = 32;
  double area_max = 800.0;
  double area_min = 400.0;
  double noise_std = 0.05;
  std::uint64_t seed = 0;

  double label() const { return 100.0 * (area_max - area_min) / area_max; }
};

inline void validate(const SynthSpec& spec) {
  if (spec.height < 8 || spec.width < 8) throw ConfigError("synthetic grid must be at least 8x8");
  if (spec.num_frames < 1) throw ConfigError("synthetic video needs at least one frame");
  if (spec.period_frames < 2) throw ConfigError("period_frames must be >= 2");
  if (!(spec.area_min > 0.0)) throw ConfigError("area_min must be positive");
  if (spec.area_min >= spec.area_max)
    throw ConfigError("area_min (" + std::to_string(spec.area_min) + ") must be below area_max (" +
                      std::to_string(spec.area_max) + ")");
  const double label = spec.label();
  if (label < kLabelMin - 1e-9 || label > kLabelMax + 1e-9)
    throw ConfigError("derived label " + std::to_string(label) + " outside [10, 90]");
  if (spec.noise_std < 0.0) throw ConfigError("noise_std must be nonnegative");
}

/// Sampling ranges for building a dataset of varied synthetic videos; one
/// SynthSpec is drawn per video.
struct SynthRanges {
  int height = 64;
  int width = 64;
  int num_frames = 96;
  int period_min = 24;
  int period_max = 40;
  double area_max_lo = 500.0;
  double area_max_hi = 900.0;
  double label_lo = kLabelMin;
  double label_hi = kLabelMax;
  double noise_std = 0.05;
};

namespace detail {

struct EllipseShape {
  double cx, cy;     // pixel-center coordinates
  double aspect;     // semi-major / semi-minor ratio
  double theta;      // orientation
  int phase_frame;   // frame of maximal area
};

// Area of the ellipse at frame t; extremes land exactly on frames
// phase_frame (max) and phase_frame + period/2 (min) for even periods.
inline double ellipse_area(const SynthSpec& s, int phase_frame, int t) {
  const double c = std::cos(2.0 * std::numbers::pi * static_cast<double>(t - phase_frame) / s.period_frames);
  return s.area_min + (s.area_max - s.area_min) * 0.5 * (1.0 + c);
}

inline bool inside_ellipse(double px, double py, const EllipseShape& e, double area) {
  const double a = std::sqrt(area * e.aspect / std::numbers::pi);
  const double b = std::sqrt(area / (e.aspect * std::numbers::pi));
  const double dx = px - e.cx, dy = py - e.cy;
  const double ct = std::cos(e.theta), st = std::sin(e.theta);
  const double u = (dx * ct + dy * st) / a;
  const double v = (-dx * st + dy * ct) / b;
  return u * u + v * v <= 1.0;
}

inline std::uint8_t quantize(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

}  // namespace detail

/// Renders one video of the given family with per-video nuisance (position,
/// aspect, orientation, phase, pixel noise) drawn from `rng`.
inline Video render_synthetic(const SynthSpec& spec, Rng& rng) {
  constexpr double kInside = 0.75;
  constexpr double kOutside = 0.2;
  constexpr double kAspectLo = 0.75, kAspectHi = 1.0 / 0.75;

  detail::EllipseShape e{};
  e.aspect = std::exp(rng.uniform(std::log(kAspectLo), std::log(kAspectHi)));
  e.theta = rng.uniform(0.0, std::numbers::pi);
  e.phase_frame = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.period_frames)));
  const double semi_major = std::sqrt(spec.area_max * std::max(e.aspect, 1.0 / e.aspect) / std::numbers::pi);
  const double half = 0.5 * std::min(spec.height, spec.width);
  const double slack = half - semi_major - 1.0;
  if (slack < 0.0) throw ConfigError("ellipse with area_max " + std::to_string(spec.area_max) + " exceeds the grid");
  const double jitter = std::min(slack, 0.1 * half);
  e.cx = 0.5 * spec.width + rng.uniform(-jitter, jitter);
  e.cy = 0.5 * spec.height + rng.uniform(-jitter, jitter);

  Video v;
  v.frames = spec.num_frames;
  v.height = spec.height;
  v.width = spec.width;
  v.channels = 1;
  v.pixels.resize(static_cast<std::size_t>(v.frames) * v.frame_pixels());
  v.mask.resize(static_cast<std::size_t>(v.frames) * v.frame_cells());
  for (int t = 0; t < v.frames; ++t) {
    const double area = detail::ellipse_area(spec, e.phase_frame, t);
    for (int y = 0; y < v.height; ++y) {
      for (int x = 0; x < v.width; ++x) {
        const bool in = detail::inside_ellipse(x + 0.5, y + 0.5, e, area);
        const std::size_t idx = (static_cast<std::size_t>(t) * v.height + y) * v.width + x;
        const double noise = spec.noise_std > 0.0 ? spec.noise_std * rng.normal() : 0.0;
        v.pixels[idx] = detail::quantize((in ? kInside : kOutside) + noise);
        v.mask[idx] = in ? 1 : 0;
      }
    }
  }
  return v;
}

/// Generates `n_videos` videos of one synthetic family; deterministic in spec.seed.
inline DatasetSplit generate_synthetic(const SynthSpec& spec, int n_videos, const std::string& split_name = "train") {
  validate(spec);
  if (n_videos < 1) throw ConfigError("n_videos must be >= 1");
  Rng rng(spec.seed);
  DatasetSplit split;
  split.name = split_name;
  split.policy = default_policy_for(split_name);
  for (int i = 0; i < n_videos; ++i) {
    Rng video_rng = rng.fork();
    VideoRecord rec;
    rec.id = split_name + "_" + std::to_string(i);
    rec.label = spec.label();
    rec.video = std::make_shared<const Video>(render_synthetic(spec, video_rng));
    split.records.push_back(std::move(rec));
  }
  return split;
}

/// Draws one SynthSpec per video from `ranges` (label uniform over the range)
/// and renders it. Ids are prefixed with the split name so splits stay disjoint.
inline DatasetSplit generate_synthetic_dataset(const SynthRanges& ranges, int n_videos, std::uint64_t seed,
                                               const std::string& split_name) {
  if (n_videos < 1) throw ConfigError("n_videos must be >= 1");
  if (ranges.period_min < 2 || ranges.period_max < ranges.period_min) throw ConfigError("invalid period range");
  if (ranges.label_lo < kLabelMin || ranges.label_hi > kLabelMax || ranges.label_hi < ranges.label_lo)
    throw ConfigError("label range must lie inside [10, 90]");
  Rng rng(seed);
  DatasetSplit split;
  split.name = split_name;
  split.policy = default_policy_for(split_name);
  for (int i = 0; i < n_videos; ++i) {
    SynthSpec spec;
    spec.height = ranges.height;
    spec.width = ranges.width;
    spec.num_frames = ranges.num_frames;
    // even periods put the area minimum exactly on a frame
    const int n_periods = (ranges.period_max - ranges.period_min) / 2 + 1;
    spec.period_frames = ranges.period_min + 2 * static_cast<int>(rng.below(static_cast<std::uint64_t>(n_periods)));
    spec.area_max = rng.uniform(ranges.area_max_lo, ranges.area_max_hi);
    const double label = rng.uniform(ranges.label_lo, ranges.label_hi);
    spec.area_min = spec.area_max * (1.0 - label / 100.0);
    spec.noise_std = ranges.noise_std;
    spec.seed = rng.next();
    validate(spec);
    Rng video_rng(spec.seed);
    VideoRecord rec;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%05d", split_name.c_str(), i);
    rec.id = buf;
    rec.label = spec.label();
    rec.video = std::make_shared<const Video>(render_synthetic(spec, video_rng));
    split.records.push_back(std::move(rec));
  }
  return split;
}

// ---------------------------------------------------------------------------
// Clip sampling
// ---------------------------------------------------------------------------

/// Frame indices for a clip starting at `start`. Videos shorter than
/// start + clip_length * period wrap around cyclically from frame 0.
inline std::vector<int> clip_frame_indices(int num_frames, int start, const SamplingPolicy& policy) {
  std::vector<int> idx(static_cast<std::size_t>(policy.clip_length));
  for (int i = 0; i < policy.clip_length; ++i) idx[i] = (start + i * policy.period) % num_frames;
  return idx;
}

/// Start frame per the policy's rule. Uniform starts range over every start
/// that fits without wraparound (only 0 when the video is too short).
inline int draw_start(int num_frames, const SamplingPolicy& policy, Rng& rng) {
  if (policy.start_rule == StartRule::kDeterministicZero) return 0;
  const int span = policy.clip_length * policy.period;
  const int max_start = std::max(0, num_frames - span);
  return static_cast<int>(rng.below(static_cast<std::uint64_t>(max_start) + 1));
}

inline VideoClip sample_clip_at(const Video& video, const SamplingPolicy& policy, int start, std::string id = {},
                                double label = 0.0) {
  if (video.frames < 1) throw ConfigError("video has no frames");
  if (policy.clip_length < 1 || policy.period < 1) throw ConfigError("clip_length and period must be >= 1");
  const int out_c = std::max(policy.channels, video.channels);
  VideoClip clip;
  clip.id = std::move(id);
  clip.label = label;
  clip.start_frame = start;
  clip.frames = Volume<float>(out_c, policy.clip_length, video.height, video.width);
  if (video.has_mask()) clip.mask = Volume<std::uint8_t>(1, policy.clip_length, video.height, video.width);
  const auto indices = clip_frame_indices(video.frames, start, policy);
  const std::size_t cells = video.frame_cells();
  for (int t = 0; t < policy.clip_length; ++t) {
    const std::size_t src = static_cast<std::size_t>(indices[t]);
    const std::uint8_t* px = video.pixels.data() + src * video.frame_pixels();
    for (int c = 0; c < out_c; ++c) {
      const int src_c = video.channels == 1 ? 0 : c;
      float* dst = clip.frames.data.data() + (static_cast<std::size_t>(c) * policy.clip_length + t) * cells;
      for (std::size_t p = 0; p < cells; ++p) dst[p] = static_cast<float>(px[p * video.channels + src_c]) / 255.0f;
    }
    if (clip.mask) {
      std::copy_n(video.mask.data() + src * cells, cells, clip.mask->data.data() + static_cast<std::size_t>(t) * cells);
    }
  }
  return clip;
}

inline VideoClip sample_clip(const Video& video, const SamplingPolicy& policy, Rng& rng, std::string id = {},
                             double label = 0.0) {
  const int start = draw_start(video.frames, policy, rng);
  return sample_clip_at(video, policy, start, std::move(id), label);
}

inline VideoClip sample_clip(const VideoRecord& rec, const SamplingPolicy& policy, Rng& rng) {
  auto video = rec.load();
  return sample_clip(*video, policy, rng, rec.id, rec.label);
}

// ---------------------------------------------------------------------------
// Label balancing
// ---------------------------------------------------------------------------

struct BalanceResult {
  DatasetSplit split;
  bool no_minority_warning = false;
  std::size_t added = 0;
};

/// Duplicates minority-region records (label < threshold) with replacement
/// until the minority count reaches the majority count. Originals come first,
/// in their original order.
inline BalanceResult balance_by_oversampling(const DatasetSplit& split, double threshold, Rng& rng) {
  if (split.empty()) throw ConfigError("cannot balance an empty split");
  BalanceResult out{split, false, 0};
  std::vector<std::size_t> minority;
  for (std::size_t i = 0; i < split.records.size(); ++i)
    if (split.records[i].label < threshold) minority.push_back(i);
  const std::size_t majority = split.records.size() - minority.size();
  if (minority.empty()) {
    out.no_minority_warning = true;
    return out;
  }
  while (minority.size() + out.added < majority) {
    const auto pick = minority[rng.below(minority.size())];
    out.split.records.push_back(split.records[pick]);
    ++out.added;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Sample>
void rotate_plane(const T* src, T* dst, int h, int w, double angle_rad, Sample sample) {
  const double cx = 0.5 * (w - 1), cy = 0.5 * (h - 1);
  const double c = std::cos(angle_rad), s = std::sin(angle_rad);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // inverse map: output pixel -> source coordinate
      const double dx = x - cx, dy = y - cy;
      const double sx = c * dx + s * dy + cx;
      const double sy = -s * dx + c * dy + cy;
      dst[static_cast<std::size_t>(y) * w + x] = sample(src, h, w, sx, sy);
    }
  }
}

inline float bilinear(const float* src, int h, int w, double sx, double sy) {
  if (sx < -0.5 || sy < -0.5 || sx > w - 0.5 || sy > h - 0.5) return 0.0f;
  const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
  const double fx = sx - x0, fy = sy - y0;
  auto px = [&](int yy, int xx) -> double {
    if (xx < 0 || yy < 0 || xx >= w || yy >= h) return 0.0;
    return src[static_cast<std::size_t>(yy) * w + xx];
  };
  const double v = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                   fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
  return static_cast<float>(v);
}

inline std::uint8_t nearest(const std::uint8_t* src, int h, int w, double sx, double sy) {
  const long xi = std::lround(sx), yi = std::lround(sy);
  if (xi < 0 || yi < 0 || xi >= w || yi >= h) return 0;
  return src[static_cast<std::size_t>(yi) * w + static_cast<std::size_t>(xi)];
}

}  // namespace detail

/// Rotates every frame (bilinear) and the mask (nearest) by one shared
/// angle in degrees about the image center; uncovered pixels become 0.
inline VideoClip rotate_clip(const VideoClip& clip, double degrees) {
  if (degrees == 0.0) return clip;
  const double rad = degrees * std::numbers::pi / 180.0;
  VideoClip out = clip;
  const int h = clip.frames.height, w = clip.frames.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < clip.frames.channels; ++c)
    for (int t = 0; t < clip.frames.frames; ++t) {
      const std::size_t off = (static_cast<std::size_t>(c) * clip.frames.frames + t) * plane;
      detail::rotate_plane(clip.frames.data.data() + off, out.frames.data.data() + off, h, w, rad, detail::bilinear);
    }
  if (clip.mask) {
    for (int t = 0; t < clip.mask->frames; ++t) {
      const std::size_t off = static_cast<std::size_t>(t) * plane;
      detail::rotate_plane(clip.mask->data.data() + off, out.mask->data.data() + off, h, w, rad, detail::nearest);
    }
  }
  return out;
}

/// Random rotation with the angle drawn uniformly from [-max_degrees, max_degrees].
inline VideoClip augment_rotate(const VideoClip& clip, double max_degrees, Rng& rng) {
  if (max_degrees < 0.0 || max_degrees > 45.0) throw ConfigError("max_degrees must lie in [0, 45]");
  const double angle = rng.uniform(-max_degrees, max_degrees);
  return rotate_clip(clip, max_degrees == 0.0 ? 0.0 : angle);
}

}  // namespace protoef
