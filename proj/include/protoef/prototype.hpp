// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "protoef/random.hpp"
#include "protoef/volume.hpp"

namespace protoef {

inline constexpr double kCosineEps = 1e-8;

/// f.p / (|f| |p| + eps), clamped to [-1, 1].
template <typename T>
double cosine_similarity(std::span<const T> f, std::span<const T> p) {
  double dot = 0.0, nf = 0.0, np = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    dot += static_cast<double>(f[i]) * p[i];
    nf += static_cast<double>(f[i]) * f[i];
    np += static_cast<double>(p[i]) * p[i];
  }
  const double s = dot / (std::sqrt(nf) * std::sqrt(np) + kCosineEps);
  return std::clamp(s, -1.0, 1.0);
}

/// Accumulates upstream * d(cos)/df and upstream * d(cos)/dp.
inline void cosine_similarity_backward(std::span<const double> f, std::span<const double> p, double upstream,
                                       std::span<double> df, std::span<double> dp) {
  double dot = 0.0, nf2 = 0.0, np2 = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    dot += f[i] * p[i];
    nf2 += f[i] * f[i];
    np2 += p[i] * p[i];
  }
  const double nf = std::sqrt(nf2), np = std::sqrt(np2);
  const double den = nf * np + kCosineEps;
  const double a = dot / (den * den);
  const double cf = nf > 0.0 ? a * np / nf : 0.0;
  const double cp = np > 0.0 ? a * nf / np : 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!df.empty()) df[i] += upstream * (p[i] / den - cf * f[i]);
    if (!dp.empty()) dp[i] += upstream * (f[i] / den - cp * p[i]);
  }
}

struct ProjectionRecord {
  int prototype = 0;
  bool projected = false;         // false: no training sample within the label window
  std::string clip_id;
  int start_frame = 0;
  double original_label = 0.0;    // label before projection
  double similarity = 0.0;        // CS(source row, pre-projection vector)
  Volume<float> source_map;       // occurrence map of the source clip for this prototype
};

/// m prototype vectors with their labels and importance weights.
struct PrototypeBank {
  Matrix<double> vectors;        // m x D
  std::vector<double> labels;    // m
  std::vector<double> importance;  // m (theta)
  bool projected = false;
  std::vector<ProjectionRecord> records;

  int size() const { return vectors.rows; }
  int dim() const { return vectors.cols; }

  /// Unit-normalized standard-normal vectors, theta = 1, labels evenly
  /// spaced over [label_lo, label_hi] inclusive.
  static PrototypeBank initialize(int m, int dim, Rng& rng, double label_lo = 10.0, double label_hi = 90.0) {
    if (m < 2 || dim < 1) throw ConfigError("prototype bank needs m >= 2 and D >= 1");
    PrototypeBank b;
    b.vectors = Matrix<double>(m, dim);
    for (int k = 0; k < m; ++k) {
      double norm = 0.0;
      for (int j = 0; j < dim; ++j) {
        b.vectors(k, j) = rng.normal();
        norm += b.vectors(k, j) * b.vectors(k, j);
      }
      norm = std::sqrt(norm);
      for (int j = 0; j < dim; ++j) b.vectors(k, j) /= norm;
    }
    b.labels.resize(m);
    for (int k = 0; k < m; ++k) b.labels[k] = label_lo + (label_hi - label_lo) * k / (m - 1);
    b.importance.assign(m, 1.0);
    return b;
  }

  bool operator==(const PrototypeBank& o) const {
    return vectors.rows == o.vectors.rows && vectors.data == o.vectors.data && labels == o.labels &&
           importance == o.importance && projected == o.projected;
  }
};

/// Per-prototype cosine similarity between pooled row k and prototype k.
inline std::vector<double> prototype_similarities(const Matrix<double>& pooled, const PrototypeBank& bank) {
  if (pooled.rows != bank.size() || pooled.cols != bank.dim())
    throw ConfigError("pooled features " + std::to_string(pooled.rows) + "x" + std::to_string(pooled.cols) +
                      " do not match prototype bank " + std::to_string(bank.size()) + "x" + std::to_string(bank.dim()));
  std::vector<double> s(bank.size());
  for (int k = 0; k < bank.size(); ++k) s[k] = cosine_similarity<double>(pooled.row(k), bank.vectors.row(k));
  return s;
}

// ---------------------------------------------------------------------------
// Regression head
// ---------------------------------------------------------------------------

struct Contribution {
  std::vector<double> beta;
  double prediction = 0.0;
};

/// beta = softmax_k(s_k * theta_k / tau) over all prototypes, prediction =
/// sum_k beta_k * l_k.
inline Contribution regression_head(std::span<const double> s, std::span<const double> theta,
                                    std::span<const double> labels, double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  const std::size_t m = s.size();
  Contribution c;
  c.beta.resize(m);
  double zmax = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < m; ++k) zmax = std::max(zmax, s[k] * theta[k] / tau);
  double total = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    c.beta[k] = std::exp(s[k] * theta[k] / tau - zmax);
    total += c.beta[k];
  }
  for (std::size_t k = 0; k < m; ++k) {
    c.beta[k] /= total;
    c.prediction += c.beta[k] * labels[k];
  }
  return c;
}

inline Contribution regression_head(std::span<const double> s, const PrototypeBank& bank, double tau) {
  return regression_head(s, bank.importance, bank.labels, tau);
}

/// Given d(loss)/d(prediction), accumulates d/ds and d/dtheta.
inline void regression_head_backward(std::span<const double> s, std::span<const double> theta,
                                     std::span<const double> labels, double tau, const Contribution& c,
                                     double d_prediction, std::span<double> ds, std::span<double> dtheta) {
  for (std::size_t k = 0; k < s.size(); ++k) {
    const double dz = d_prediction * c.beta[k] * (labels[k] - c.prediction);
    if (!ds.empty()) ds[k] += dz * theta[k] / tau;
    if (!dtheta.empty()) dtheta[k] += dz * s[k] / tau;
  }
}

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

/// Streaming argmax search for prototype projection: offer every training
/// sample's pooled rows, then apply. Ties keep the first sample offered.
class ProjectionSearch {
 public:
  ProjectionSearch(const PrototypeBank& bank, double delta_l) : bank_(bank), delta_l_(delta_l) {
    if (!(delta_l > 0.0)) throw ConfigError("delta_l must be positive");
    best_.resize(bank.size());
  }

  /// `maps` (optional) holds the sample's occurrence maps, m channels.
  void offer(const Matrix<double>& pooled, double label, const std::string& clip_id, int start_frame,
             const Volume<float>* maps = nullptr) {
    for (int j = 0; j < bank_.size(); ++j) {
      if (!(std::abs(label - bank_.labels[j]) < delta_l_)) continue;
      const double cs = cosine_similarity<double>(pooled.row(j), bank_.vectors.row(j));
      auto& b = best_[j];
      if (!b.found || cs > b.similarity) {
        b.found = true;
        b.similarity = cs;
        b.label = label;
        b.clip_id = clip_id;
        b.start_frame = start_frame;
        b.row.assign(pooled.row(j).begin(), pooled.row(j).end());
        if (maps) {
          b.map = Volume<float>(1, maps->frames, maps->height, maps->width);
          const auto ch = maps->channel(j);
          std::copy(ch.begin(), ch.end(), b.map.data.begin());
        }
      }
    }
  }

  PrototypeBank apply() const {
    PrototypeBank out = bank_;
    out.records.assign(bank_.size(), {});
    for (int j = 0; j < bank_.size(); ++j) {
      const auto& b = best_[j];
      const ProjectionRecord* prior =
          j < static_cast<int>(bank_.records.size()) && bank_.records[j].projected ? &bank_.records[j] : nullptr;
      ProjectionRecord rec;
      if (!b.found) {
        if (prior) rec = *prior;
        else rec.original_label = bank_.labels[j];
        rec.prototype = j;
        out.records[j] = std::move(rec);
        continue;
      }
      rec.prototype = j;
      rec.projected = true;
      rec.original_label = prior ? prior->original_label : bank_.labels[j];
      rec.clip_id = b.clip_id;
      rec.start_frame = b.start_frame;
      rec.similarity = b.similarity;
      rec.source_map = b.map;
      std::copy(b.row.begin(), b.row.end(), out.vectors.row(j).begin());
      out.labels[j] = b.label;
      out.records[j] = std::move(rec);
    }
    out.projected = true;
    return out;
  }

 private:
  struct Best {
    bool found = false;
    double similarity = 0.0;
    double label = 0.0;
    std::string clip_id;
    int start_frame = 0;
    std::vector<double> row;
    Volume<float> map;
  };
  const PrototypeBank& bank_;
  double delta_l_;
  std::vector<Best> best_;
};

struct ProjectionCandidate {
  Matrix<double> pooled;  // m x D, row j compared with prototype j
  double label = 0.0;
  std::string clip_id;
  int start_frame = 0;
};

/// Replaces each prototype with the most similar training row among samples
/// whose label lies strictly within delta_l of the prototype's label; the
/// prototype's label becomes that sample's label. Prototypes without any
/// in-window sample are kept and flagged (record.projected == false).
inline PrototypeBank project_prototypes(const PrototypeBank& bank, std::span<const ProjectionCandidate> candidates,
                                        double delta_l) {
  ProjectionSearch search(bank, delta_l);
  for (const auto& c : candidates) search.offer(c.pooled, c.label, c.clip_id, c.start_frame);
  return search.apply();
}

// ---------------------------------------------------------------------------
// Score sheet
// ---------------------------------------------------------------------------

struct ScoreRow {
  int prototype = 0;
  double label = 0.0;
  double theta = 0.0;
  double similarity = 0.0;
  double beta = 0.0;
};

struct ScoreSheet {
  std::string clip_id;
  double prediction = 0.0;
  double ground_truth = 0.0;
  std::vector<ScoreRow> rows;  // sorted by beta, descending

  /// sum beta * label over the rows; reproduces `prediction`.
  double recompute_prediction() const {
    double y = 0.0;
    for (const auto& r : rows) y += r.beta * r.label;
    return y;
  }
};

inline ScoreSheet make_score_sheet(std::span<const double> s, const Contribution& c, const PrototypeBank& bank,
                                   std::string clip_id, double ground_truth) {
  ScoreSheet sheet;
  sheet.clip_id = std::move(clip_id);
  sheet.prediction = c.prediction;
  sheet.ground_truth = ground_truth;
  for (int k = 0; k < bank.size(); ++k)
    sheet.rows.push_back({k, bank.labels[k], bank.importance[k], s[k], c.beta[k]});
  std::stable_sort(sheet.rows.begin(), sheet.rows.end(),
                   [](const ScoreRow& a, const ScoreRow& b) { return a.beta > b.beta; });
  return sheet;
}

inline ScoreSheet score_sample(const Matrix<double>& pooled, const PrototypeBank& bank, double tau,
                               std::string clip_id = {}, double ground_truth = 0.0) {
  const auto s = prototype_similarities(pooled, bank);
  const auto c = regression_head(s, bank, tau);
  return make_score_sheet(s, c, bank, std::move(clip_id), ground_truth);
}

inline nlohmann::json to_json(const ScoreSheet& sheet) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : sheet.rows)
    rows.push_back({{"prototype_index", r.prototype}, {"label", r.label}, {"theta", r.theta},
                    {"similarity", r.similarity}, {"beta", r.beta}});
  return {{"clip_id", sheet.clip_id}, {"prediction", sheet.prediction}, {"ground_truth", sheet.ground_truth},
          {"prototypes", rows}};
}

/// Plain-text rendering, one prototype per line.
inline std::string to_text(const ScoreSheet& sheet, double min_beta = 0.0) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "clip %s  prediction %.4f  ground_truth %.4f\n", sheet.clip_id.c_str(),
                sheet.prediction, sheet.ground_truth);
  out += buf;
  out += "  proto     label     theta  similarity      beta\n";
  for (const auto& r : sheet.rows) {
    if (r.beta < min_beta) continue;
    std::snprintf(buf, sizeof(buf), "  %5d  %8.3f  %8.4f  %10.6f  %8.6f\n", r.prototype, r.label, r.theta,
                  r.similarity, r.beta);
    out += buf;
  }
  return out;
}

}  // namespace protoef
