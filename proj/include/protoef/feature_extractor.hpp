// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "protoef/data.hpp"
#include "protoef/nn.hpp"
#include "protoef/volume.hpp"

namespace protoef {

/// Backbone variants:
///   tiny: three blocks of conv3x3x3(stride 2) -> GroupNorm -> ReLU;
///         strides 8 in time and space (64x64x64 clip -> 8x8x8 cells).
///   full: R(2+1)D-18 layout (torchvision parameter names) without the
///         classifier head; spatial stride 16, temporal stride 8.
struct BackboneConfig {
  std::string variant = "tiny";
  std::array<int, 3> tiny_channels{16, 32, 64};
  int feature_dim = 64;
  int num_prototypes = 10;
  int in_channels = 3;
  int clip_length = 64;
  int height = 64;
  int width = 64;
  std::string pretrained_weights_path;  // optional

  bool operator==(const BackboneConfig&) const = default;
};

inline void validate(const BackboneConfig& cfg) {
  if (cfg.variant != "tiny" && cfg.variant != "full")
    throw ConfigError("unknown backbone variant '" + cfg.variant + "' (expected tiny or full)");
  if (cfg.feature_dim < 1 || cfg.num_prototypes < 2 || cfg.in_channels < 1)
    throw ConfigError("feature_dim >= 1, num_prototypes >= 2 and in_channels >= 1 required");
  if (cfg.clip_length < 1 || cfg.height < 1 || cfg.width < 1) throw ConfigError("input dims must be positive");
}

namespace detail {

inline int norm_groups(int channels) {
  for (int g : {8, 4, 2})
    if (channels % g == 0 && channels / g >= 2) return g;
  return 1;
}

template <typename T>
nn::LayerPtr<T> tiny_backbone(const BackboneConfig& cfg) {
  auto seq = std::make_unique<nn::Sequential<T>>();
  int in = cfg.in_channels;
  for (int b = 0; b < 3; ++b) {
    const int out = cfg.tiny_channels[b];
    const std::string base = "backbone." + std::to_string(3 * b);
    nn::Conv3dSpec s;
    s.in_channels = in;
    s.out_channels = out;
    s.stride = {2, 2, 2};
    seq->template emplace<nn::Conv3d<T>>(s, base, "backbone");
    seq->template emplace<nn::GroupNorm<T>>(out, norm_groups(out), "backbone." + std::to_string(3 * b + 1), "backbone");
    seq->template emplace<nn::ReLU<T>>();
    in = out;
  }
  return seq;
}

template <typename T>
nn::LayerPtr<T> conv2plus1d(int in, int out, int mid, int stride, const std::string& name) {
  auto seq = std::make_unique<nn::Sequential<T>>();
  nn::Conv3dSpec spatial{in, mid, {1, 3, 3}, {1, stride, stride}, {0, 1, 1}, false};
  nn::Conv3dSpec temporal{mid, out, {3, 1, 1}, {stride, 1, 1}, {1, 0, 0}, false};
  seq->template emplace<nn::Conv3d<T>>(spatial, name + ".0", "backbone");
  seq->template emplace<nn::GroupNorm<T>>(mid, norm_groups(mid), name + ".1", "backbone");
  seq->template emplace<nn::ReLU<T>>();
  seq->template emplace<nn::Conv3d<T>>(temporal, name + ".3", "backbone");
  return seq;
}

template <typename T>
nn::LayerPtr<T> basic_block(int in, int out, int stride, const std::string& name) {
  const int mid = (in * out * 27) / (in * 9 + 3 * out);
  auto main = std::make_unique<nn::Sequential<T>>();
  main->add(conv2plus1d<T>(in, out, mid, stride, name + ".conv1.0"));
  main->template emplace<nn::GroupNorm<T>>(out, norm_groups(out), name + ".conv1.1", "backbone");
  main->template emplace<nn::ReLU<T>>();
  main->add(conv2plus1d<T>(out, out, mid, 1, name + ".conv2.0"));
  main->template emplace<nn::GroupNorm<T>>(out, norm_groups(out), name + ".conv2.1", "backbone");
  nn::LayerPtr<T> shortcut;
  if (stride != 1 || in != out) {
    auto sc = std::make_unique<nn::Sequential<T>>();
    nn::Conv3dSpec s{in, out, {1, 1, 1}, {stride, stride, stride}, {0, 0, 0}, false};
    sc->template emplace<nn::Conv3d<T>>(s, name + ".downsample.0", "backbone");
    sc->template emplace<nn::GroupNorm<T>>(out, norm_groups(out), name + ".downsample.1", "backbone");
    shortcut = std::move(sc);
  }
  return std::make_unique<nn::Residual<T>>(std::move(main), std::move(shortcut));
}

template <typename T>
nn::LayerPtr<T> full_backbone(const BackboneConfig& cfg) {
  auto seq = std::make_unique<nn::Sequential<T>>();
  nn::Conv3dSpec s0{cfg.in_channels, 45, {1, 7, 7}, {1, 2, 2}, {0, 3, 3}, false};
  nn::Conv3dSpec s3{45, 64, {3, 1, 1}, {1, 1, 1}, {1, 0, 0}, false};
  seq->template emplace<nn::Conv3d<T>>(s0, "backbone.stem.0", "backbone");
  seq->template emplace<nn::GroupNorm<T>>(45, norm_groups(45), "backbone.stem.1", "backbone");
  seq->template emplace<nn::ReLU<T>>();
  seq->template emplace<nn::Conv3d<T>>(s3, "backbone.stem.3", "backbone");
  seq->template emplace<nn::GroupNorm<T>>(64, norm_groups(64), "backbone.stem.4", "backbone");
  seq->template emplace<nn::ReLU<T>>();
  const int widths[4] = {64, 128, 256, 512};
  int in = 64;
  for (int l = 0; l < 4; ++l) {
    const int stride = l == 0 ? 1 : 2;
    const std::string name = "backbone.layer" + std::to_string(l + 1);
    seq->add(basic_block<T>(in, widths[l], stride, name + ".0"));
    seq->add(basic_block<T>(widths[l], widths[l], 1, name + ".1"));
    in = widths[l];
  }
  return seq;
}

// Two pointwise convs with a ReLU between them.
template <typename T>
std::unique_ptr<nn::Sequential<T>> pointwise_stack(int in, int hidden, int out, const std::string& name,
                                                   const std::string& group) {
  auto seq = std::make_unique<nn::Sequential<T>>();
  nn::Conv3dSpec a{in, hidden, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, true};
  nn::Conv3dSpec b{hidden, out, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, true};
  seq->template emplace<nn::Conv3d<T>>(a, name + ".0", group);
  seq->template emplace<nn::ReLU<T>>();
  seq->template emplace<nn::Conv3d<T>>(b, name + ".2", group);
  return seq;
}

}  // namespace detail

/// Backbone output, the feature volume F(x) with D channels and the m
/// nonnegative occurrence maps, all on the same cell grid.
template <typename T>
struct ExtractorOutput {
  Volume<T> backbone;
  Volume<T> features;  // D x T' x H' x W'
  Volume<T> maps;      // m x T' x H' x W'
};

template <typename T>
class FeatureExtractor {
 public:
  explicit FeatureExtractor(const BackboneConfig& cfg) : cfg_(cfg) {
    validate(cfg);
    backbone_ = cfg.variant == "tiny" ? detail::tiny_backbone<T>(cfg) : detail::full_backbone<T>(cfg);
    const int bc = backbone_->output_shape({cfg.in_channels, cfg.clip_length, cfg.height, cfg.width})[0];
    feature_ = detail::pointwise_stack<T>(bc, cfg.feature_dim, cfg.feature_dim, "feature", "feature_roi");
    roi_ = detail::pointwise_stack<T>(bc, cfg.feature_dim, cfg.num_prototypes, "roi", "feature_roi");
    roi_->template emplace<nn::Abs<T>>();
  }

  FeatureExtractor(const FeatureExtractor&) = delete;
  FeatureExtractor& operator=(const FeatureExtractor&) = delete;
  FeatureExtractor(FeatureExtractor&&) noexcept = default;
  FeatureExtractor& operator=(FeatureExtractor&&) noexcept = default;

  const BackboneConfig& config() const { return cfg_; }

  /// Feature-grid dims (T', H', W') for the configured input.
  std::array<int, 3> grid() const {
    const auto s = backbone_->output_shape({cfg_.in_channels, cfg_.clip_length, cfg_.height, cfg_.width});
    return {s[1], s[2], s[3]};
  }

  void check_input(const Volume<T>& clip) const {
    if (clip.channels != cfg_.in_channels || clip.frames != cfg_.clip_length || clip.height != cfg_.height ||
        clip.width != cfg_.width) {
      throw ConfigError("clip shape " + clip.shape_string() + " does not match backbone input " +
                        std::to_string(cfg_.in_channels) + "x" + std::to_string(cfg_.clip_length) + "x" +
                        std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width) + " (C x T x H x W)");
    }
  }

  ExtractorOutput<T> forward(const Volume<T>& clip, nn::Tape<T>& tape) const {
    check_input(clip);
    ExtractorOutput<T> out;
    out.backbone = backbone_->forward(clip, tape);
    out.features = feature_->forward(out.backbone, tape);
    out.maps = roi_->forward(out.backbone, tape);
    return out;
  }

  /// Backbone-only forward (the input to the ROI module).
  Volume<T> extract_backbone(const Volume<T>& clip) const {
    check_input(clip);
    nn::Tape<T> tape(false);
    return backbone_->forward(clip, tape);
  }

  Volume<T> extract_features(const Volume<T>& clip) const {
    nn::Tape<T> tape(false);
    return forward(clip, tape).features;
  }

  Volume<T> compute_occurrence_maps(const Volume<T>& backbone_volume) const {
    nn::Tape<T> tape(false);
    return roi_->forward(backbone_volume, tape);
  }

  /// Backprop of d(features) and d(maps) through all three modules.
  void backward(const Volume<T>& d_features, const Volume<T>& d_maps, nn::Tape<T>& tape) {
    Volume<T> db = roi_->backward(d_maps, tape, true);
    const Volume<T> df = feature_->backward(d_features, tape, true);
    for (std::size_t i = 0; i < db.data.size(); ++i) db.data[i] += df.data[i];
    backbone_->backward(db, tape, false);
  }

  std::vector<nn::Parameter<T>*> parameters() {
    std::vector<nn::Parameter<T>*> out;
    backbone_->parameters(out);
    feature_->parameters(out);
    roi_->parameters(out);
    return out;
  }

  void init(Rng& rng) {
    auto ps = parameters();
    nn::kaiming_init(ps, rng);
  }

 private:
  BackboneConfig cfg_;
  nn::LayerPtr<T> backbone_;
  std::unique_ptr<nn::Sequential<T>> feature_;
  std::unique_ptr<nn::Sequential<T>> roi_;
};

// ---------------------------------------------------------------------------
// Occurrence-weighted pooling
// ---------------------------------------------------------------------------

inline constexpr double kPoolEps = 1e-8;

/// Row k = sum_c M_k(c) F(c) / (sum_c M_k(c) + eps). A map whose weights sum
/// to exactly zero falls back to the plain mean over cells.
template <typename T>
Matrix<double> pool_by_occurrence(const Volume<T>& features, const Volume<T>& maps) {
  if (features.cells() != maps.cells())
    throw ConfigError("feature volume " + features.shape_string() + " and maps " + maps.shape_string() +
                      " are on different grids");
  const int m = maps.channels, d = features.channels;
  const std::size_t n = features.cells();
  Matrix<double> pooled(m, d);
  for (int k = 0; k < m; ++k) {
    const T* w = maps.data.data() + static_cast<std::size_t>(k) * n;
    double sum = 0.0;
    for (std::size_t c = 0; c < n; ++c) sum += w[c];
    const bool uniform = sum == 0.0;
    const double denom = uniform ? static_cast<double>(n) : sum + kPoolEps;
    for (int j = 0; j < d; ++j) {
      const T* f = features.data.data() + static_cast<std::size_t>(j) * n;
      double acc = 0.0;
      if (uniform) {
        for (std::size_t c = 0; c < n; ++c) acc += f[c];
      } else {
        for (std::size_t c = 0; c < n; ++c) acc += static_cast<double>(w[c]) * f[c];
      }
      pooled(k, j) = acc / denom;
    }
  }
  return pooled;
}

/// Gradients of pool_by_occurrence given d(pooled); accumulates into
/// d_features and d_maps (which must be zero-initialized or hold partial sums).
template <typename T>
void pool_by_occurrence_backward(const Volume<T>& features, const Volume<T>& maps, const Matrix<double>& pooled,
                                 const Matrix<double>& d_pooled, Volume<T>& d_features, Volume<T>& d_maps) {
  const int m = maps.channels, d = features.channels;
  const std::size_t n = features.cells();
  for (int k = 0; k < m; ++k) {
    const T* w = maps.data.data() + static_cast<std::size_t>(k) * n;
    double sum = 0.0;
    for (std::size_t c = 0; c < n; ++c) sum += w[c];
    const bool uniform = sum == 0.0;
    const double denom = uniform ? static_cast<double>(n) : sum + kPoolEps;
    const auto g = d_pooled.row(k);
    const auto f_k = pooled.row(k);
    double g_dot_fk = 0.0;
    for (int j = 0; j < d; ++j) g_dot_fk += g[j] * f_k[j];
    T* dm = d_maps.data.data() + static_cast<std::size_t>(k) * n;
    for (std::size_t c = 0; c < n; ++c) {
      const double wc = uniform ? 1.0 / denom : w[c] / denom;
      double g_dot_f = 0.0;
      for (int j = 0; j < d; ++j) {
        const std::size_t idx = static_cast<std::size_t>(j) * n + c;
        d_features.data[idx] += static_cast<T>(wc * g[j]);
        g_dot_f += g[j] * features.data[idx];
      }
      if (!uniform) dm[c] += static_cast<T>((g_dot_f - g_dot_fk) / denom);
    }
  }
}

// ---------------------------------------------------------------------------
// Activation maps on the input
// ---------------------------------------------------------------------------

namespace detail {

// Half-pixel-center source coordinate with edge clamping.
inline void linear_taps(int dst, int in, int out, int& i0, int& i1, double& frac) {
  const double scale = static_cast<double>(in) / out;
  double src = (dst + 0.5) * scale - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in - 1));
  i0 = static_cast<int>(std::floor(src));
  i1 = std::min(i0 + 1, in - 1);
  frac = src - i0;
}

}  // namespace detail

/// Trilinear upsampling of one map (first channel of `map`) to (T, H, W),
/// then per-clip min-max normalization to [0, 1]. A constant map yields all
/// zeros.
template <typename T>
Volume<float> upsample_map_to_input(const Volume<T>& map, int frames, int height, int width) {
  if (frames < map.frames || height < map.height || width < map.width)
    throw ConfigError("upsample target " + std::to_string(frames) + "x" + std::to_string(height) + "x" +
                      std::to_string(width) + " is smaller than the map");
  Volume<float> out(1, frames, height, width);
  std::vector<int> t0(frames), t1(frames), y0(height), y1(height), x0(width), x1(width);
  std::vector<double> ft(frames), fy(height), fx(width);
  for (int t = 0; t < frames; ++t) detail::linear_taps(t, map.frames, frames, t0[t], t1[t], ft[t]);
  for (int y = 0; y < height; ++y) detail::linear_taps(y, map.height, height, y0[y], y1[y], fy[y]);
  for (int x = 0; x < width; ++x) detail::linear_taps(x, map.width, width, x0[x], x1[x], fx[x]);
  auto v = [&](int t, int y, int x) -> double { return map.at(0, t, y, x); };
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::vector<double> tmp(out.size());
  for (int t = 0; t < frames; ++t)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double a = (1 - fx[x]) * v(t0[t], y0[y], x0[x]) + fx[x] * v(t0[t], y0[y], x1[x]);
        const double b = (1 - fx[x]) * v(t0[t], y1[y], x0[x]) + fx[x] * v(t0[t], y1[y], x1[x]);
        const double c = (1 - fx[x]) * v(t1[t], y0[y], x0[x]) + fx[x] * v(t1[t], y0[y], x1[x]);
        const double d = (1 - fx[x]) * v(t1[t], y1[y], x0[x]) + fx[x] * v(t1[t], y1[y], x1[x]);
        const double s = (1 - ft[t]) * ((1 - fy[y]) * a + fy[y] * b) + ft[t] * ((1 - fy[y]) * c + fy[y] * d);
        const std::size_t idx = (static_cast<std::size_t>(t) * height + y) * width + x;
        tmp[idx] = s;
        lo = std::min(lo, s);
        hi = std::max(hi, s);
      }
  const double range = hi - lo;
  for (std::size_t i = 0; i < tmp.size(); ++i)
    out.data[i] = range > 0.0 ? static_cast<float>((tmp[i] - lo) / range) : 0.0f;
  return out;
}

/// Downsamples a binary mask [1][T][H][W] onto a (T', H', W') grid by area-max
/// pooling: a cell is inside when any covered pixel is inside.
inline Volume<std::uint8_t> downsample_mask(const Volume<std::uint8_t>& mask, int frames, int height, int width) {
  Volume<std::uint8_t> out(1, frames, height, width);
  for (int t = 0; t < mask.frames; ++t) {
    const int ct = std::min(frames - 1, t * frames / mask.frames);
    for (int y = 0; y < mask.height; ++y) {
      const int cy = std::min(height - 1, y * height / mask.height);
      for (int x = 0; x < mask.width; ++x) {
        if (!mask.at(0, t, y, x)) continue;
        const int cx = std::min(width - 1, x * width / mask.width);
        out.at(0, ct, cy, cx) = 1;
      }
    }
  }
  return out;
}

}  // namespace protoef
