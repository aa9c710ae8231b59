// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "protoef/prototype.hpp"
#include "protoef/volume.hpp"

namespace protoef {

inline constexpr double kLogEps = 1e-6;
inline constexpr double kCosineDistanceMax = 2.0;

/// Batch-level inputs shared by the cluster, PSD and occurrence losses.
template <typename T = double>
struct BatchContext {
  Matrix<double> similarities;              // n x m, s_p(i)
  std::vector<double> sample_labels;        // n
  std::vector<double> prototype_labels;     // m
  std::vector<Volume<T>> occurrence_maps;   // n volumes with m channels
  std::optional<std::vector<Volume<std::uint8_t>>> lv_masks;  // n single-channel volumes on the map grid
  double delta_l = 5.0;
  int k = 3;

  int n() const { return similarities.rows; }
  int m() const { return similarities.cols; }
};

template <typename T>
void validate(const BatchContext<T>& ctx) {
  if (ctx.n() < 1) throw ConfigError("batch must hold at least one sample");
  if (static_cast<int>(ctx.sample_labels.size()) != ctx.n() || static_cast<int>(ctx.prototype_labels.size()) != ctx.m())
    throw ConfigError("label arrays do not match the similarity table");
  if (!(ctx.delta_l > 0.0) || ctx.k < 1) throw ConfigError("delta_l > 0 and k >= 1 required");
}

inline double loss_mse(std::span<const double> predictions, std::span<const double> labels,
                       std::span<double> d_predictions = {}) {
  if (predictions.size() != labels.size() || predictions.empty())
    throw ConfigError("loss_mse needs equal, nonzero lengths");
  const double n = static_cast<double>(predictions.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double e = predictions[i] - labels[i];
    acc += e * e;
    if (!d_predictions.empty()) d_predictions[i] += 2.0 * e / n;
  }
  return acc / n;
}

/// -(1/n) sum_i mean(top-k similarities among prototypes with |y_i - l_j| < delta_l).
/// Samples with no in-window prototype contribute 0 (and still count in n).
template <typename T>
double loss_cluster(const BatchContext<T>& ctx, Matrix<double>* d_similarities = nullptr) {
  validate(ctx);
  const int n = ctx.n(), m = ctx.m();
  double total = 0.0;
  std::vector<int> window;
  for (int i = 0; i < n; ++i) {
    window.clear();
    for (int j = 0; j < m; ++j)
      if (std::abs(ctx.sample_labels[i] - ctx.prototype_labels[j]) < ctx.delta_l) window.push_back(j);
    if (window.empty()) continue;
    std::stable_sort(window.begin(), window.end(),
                     [&](int a, int b) { return ctx.similarities(i, a) > ctx.similarities(i, b); });
    const int take = std::min<int>(ctx.k, static_cast<int>(window.size()));
    double mean = 0.0;
    for (int t = 0; t < take; ++t) mean += ctx.similarities(i, window[t]);
    mean /= take;
    total += mean;
    if (d_similarities)
      for (int t = 0; t < take; ++t) (*d_similarities)(i, window[t]) += -1.0 / (n * take);
  }
  return -total / n;
}

/// -(1/m) sum_j log(1 - min_i d_ij / d_max + eps) with d = 1 - s, d_max = 2.
template <typename T>
double loss_psd(const BatchContext<T>& ctx, Matrix<double>* d_similarities = nullptr) {
  validate(ctx);
  const int n = ctx.n(), m = ctx.m();
  double total = 0.0;
  for (int j = 0; j < m; ++j) {
    int best = 0;
    double dmin = (1.0 - ctx.similarities(0, j)) / kCosineDistanceMax;
    for (int i = 1; i < n; ++i) {
      const double d = (1.0 - ctx.similarities(i, j)) / kCosineDistanceMax;
      if (d < dmin) {
        dmin = d;
        best = i;
      }
    }
    const double arg = 1.0 - dmin + kLogEps;
    total += -std::log(arg);
    // d/ds of -log(1 - (1 - s)/2 + eps) = -1 / (2 * arg)
    if (d_similarities) (*d_similarities)(best, j) += -1.0 / (kCosineDistanceMax * arg) / m;
  }
  return total / m;
}

/// 1 - arccos(cs) / pi, with cs clamped to [-1, 1].
inline double angular_similarity(double cs) {
  return 1.0 - std::acos(std::clamp(cs, -1.0, 1.0)) / std::numbers::pi;
}

/// -(1/m) sum_i mean_{j : |l_i - l_j| > delta_l} log(1 - AS(p_i, p_j) + eps).
/// Prototypes with no far-label partner contribute 0.
inline double loss_pas(const Matrix<double>& vectors, std::span<const double> labels, double delta_l,
                       Matrix<double>* d_vectors = nullptr) {
  const int m = vectors.rows;
  if (m < 2) throw ConfigError("loss_pas needs at least two prototypes");
  if (!(delta_l > 0.0)) throw ConfigError("delta_l must be positive");
  double total = 0.0;
  std::vector<int> far;
  for (int i = 0; i < m; ++i) {
    far.clear();
    for (int j = 0; j < m; ++j)
      if (j != i && std::abs(labels[i] - labels[j]) > delta_l) far.push_back(j);
    if (far.empty()) continue;
    double mean = 0.0;
    for (int j : far) {
      const double cs = cosine_similarity<double>(vectors.row(i), vectors.row(j));
      const double angle = std::acos(cs) / std::numbers::pi;  // = 1 - AS
      const double arg = angle + kLogEps;
      mean += std::log(arg);
      if (d_vectors) {
        // d/dcs log(acos(cs)/pi + eps) = -1 / (pi * arg * sqrt(1 - cs^2))
        const double root = std::sqrt(std::max(1.0 - cs * cs, 1e-12));
        const double dcs = -1.0 / (std::numbers::pi * arg * root);
        const double up = -dcs / (static_cast<double>(far.size()) * m);
        cosine_similarity_backward(vectors.row(i), vectors.row(j), up, d_vectors->row(i), d_vectors->row(j));
      }
    }
    total += mean / static_cast<double>(far.size());
  }
  return -total / m;
}

inline double loss_pas(const PrototypeBank& bank, double delta_l, Matrix<double>* d_vectors = nullptr) {
  return loss_pas(bank.vectors, bank.labels, delta_l, d_vectors);
}

/// Mean over samples, prototypes and cells of |M| outside the mask, plus
/// rho times the mean of |M| over all cells. Requires masks.
template <typename T>
double loss_occurrence(const BatchContext<T>& ctx, double rho, std::vector<Volume<T>>* d_maps = nullptr) {
  if (!ctx.lv_masks) throw ConfigError("loss_occurrence needs region masks; set its weight to 0 when masks are absent");
  const auto& masks = *ctx.lv_masks;
  if (masks.size() != ctx.occurrence_maps.size() || masks.empty())
    throw ConfigError("one mask per sample required for loss_occurrence");
  const auto& first = ctx.occurrence_maps.front();
  const double denom = static_cast<double>(ctx.occurrence_maps.size()) * first.channels * first.cells();
  double total = 0.0;
  if (d_maps && d_maps->size() != ctx.occurrence_maps.size()) {
    d_maps->clear();
    for (const auto& mp : ctx.occurrence_maps) d_maps->emplace_back(mp.channels, mp.frames, mp.height, mp.width);
  }
  for (std::size_t i = 0; i < ctx.occurrence_maps.size(); ++i) {
    const auto& maps = ctx.occurrence_maps[i];
    const auto& mask = masks[i];
    if (mask.cells() != maps.cells()) throw ConfigError("mask grid " + mask.shape_string() + " does not match maps " + maps.shape_string());
    const std::size_t cells = maps.cells();
    for (int k = 0; k < maps.channels; ++k) {
      for (std::size_t c = 0; c < cells; ++c) {
        const double v = maps.data[static_cast<std::size_t>(k) * cells + c];
        const double w = (mask.data[c] ? 0.0 : 1.0) + rho;
        total += w * std::abs(v);
        if (d_maps) {
          const double sgn = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
          (*d_maps)[i].data[static_cast<std::size_t>(k) * cells + c] += static_cast<T>(w * sgn / denom);
        }
      }
    }
  }
  return total / denom;
}

struct LossWeights {
  double mse = 1.0;
  double cluster = 0.75;
  double psd = 0.5;
  double pas = 0.5;
  double occurrence = 0.3;

  bool operator==(const LossWeights&) const = default;
};

struct LossParts {
  double mse = 0.0;
  double cluster = 0.0;
  double psd = 0.0;
  double pas = 0.0;
  double occurrence = 0.0;
};

struct LossBreakdown {
  LossParts raw;
  LossParts weighted;
  double total = 0.0;
};

/// Weighted sum of the five parts. Throws NumericalError naming the first
/// non-finite part.
inline LossBreakdown loss_total(const LossParts& parts, const LossWeights& w) {
  const std::pair<const char*, double> named[] = {{"mse", parts.mse},
                                                  {"cluster", parts.cluster},
                                                  {"psd", parts.psd},
                                                  {"pas", parts.pas},
                                                  {"occurrence", parts.occurrence}};
  for (const auto& [name, v] : named)
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite loss part: ") + name);
  LossBreakdown b;
  b.raw = parts;
  b.weighted = {w.mse * parts.mse, w.cluster * parts.cluster, w.psd * parts.psd, w.pas * parts.pas,
                w.occurrence * parts.occurrence};
  b.total = b.weighted.mse + b.weighted.cluster + b.weighted.psd + b.weighted.pas + b.weighted.occurrence;
  return b;
}

}  // namespace protoef
