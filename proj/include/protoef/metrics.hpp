// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "protoef/volume.hpp"

namespace protoef {

struct RegressionMetrics {
  double r2 = 0.0;
  bool r2_defined = true;  // false when the labels have zero variance (r2 is NaN)
  double mae = 0.0;
  double rmse = 0.0;
};

inline RegressionMetrics compute_regression_metrics(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size() || y.empty()) throw ConfigError("regression metrics need equal, nonzero lengths");
  const double n = static_cast<double>(y.size());
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= n;
  double abs_err = 0.0, ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double e = y[i] - y_hat[i];
    abs_err += std::abs(e);
    ss_res += e * e;
    ss_tot += (y[i] - mean) * (y[i] - mean);
  }
  RegressionMetrics m;
  m.mae = abs_err / n;
  m.rmse = std::sqrt(ss_res / n);
  if (y.size() < 2 || ss_tot == 0.0) {
    m.r2_defined = false;
    m.r2 = std::numeric_limits<double>::quiet_NaN();
  } else {
    m.r2 = 1.0 - ss_res / ss_tot;
  }
  return m;
}

/// F1 of the "below threshold" class. Both y and y_hat are binarized with
/// value < threshold as positive. With no true and no predicted positives the
/// score is 1.0; otherwise a zero denominator gives 0.
inline double compute_f1_below_threshold(std::span<const double> y, std::span<const double> y_hat,
                                         double threshold = 40.0) {
  if (y.size() != y_hat.size() || y.empty()) throw ConfigError("F1 needs equal, nonzero lengths");
  long tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool truth = y[i] < threshold, pred = y_hat[i] < threshold;
    if (truth && pred) ++tp;
    else if (pred) ++fp;
    else if (truth) ++fn;
  }
  if (tp + fp + fn == 0) return 1.0;
  return 2.0 * tp / (2.0 * tp + fp + fn);
}

inline constexpr double kContributionThreshold = 0.01;

struct SparsityDiversity {
  double sparsity = 0.0;
  double diversity = 0.0;
};

/// betas is n x m. Sparsity: mean fraction of prototypes with beta > 0.01
/// per sample. Diversity: fraction of prototypes above 0.01 for at least one
/// sample.
inline SparsityDiversity compute_sparsity_diversity(const Matrix<double>& betas,
                                                    double threshold = kContributionThreshold) {
  if (betas.rows < 1 || betas.cols < 1) throw ConfigError("sparsity/diversity need a nonempty beta table");
  const int n = betas.rows, m = betas.cols;
  std::vector<bool> used(m, false);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    int count = 0;
    for (int k = 0; k < m; ++k)
      if (betas(i, k) > threshold) {
        ++count;
        used[k] = true;
      }
    acc += static_cast<double>(count) / m;
  }
  SparsityDiversity out;
  out.sparsity = acc / n;
  out.diversity = static_cast<double>(std::count(used.begin(), used.end(), true)) / m;
  return out;
}

struct SampleSummary {
  std::string id;
  double y = 0.0;
  double y_hat = 0.0;
  std::vector<int> top_prototypes;  // up to 3, by beta descending
  std::vector<double> top_betas;
};

struct EvalReport {
  std::string split;
  RegressionMetrics regression;
  double f1_below_40 = 0.0;
  double sparsity = 0.0;
  double diversity = 0.0;
  std::size_t n_samples = 0;
  std::vector<SampleSummary> per_sample;
};

/// Builds the report from per-sample labels, predictions and betas (n x m).
inline EvalReport make_eval_report(std::string split, std::span<const std::string> ids, std::span<const double> y,
                                   std::span<const double> y_hat, const Matrix<double>& betas) {
  if (ids.size() != y.size() || static_cast<int>(y.size()) != betas.rows)
    throw ConfigError("eval report inputs disagree in length");
  EvalReport r;
  r.split = std::move(split);
  r.regression = compute_regression_metrics(y, y_hat);
  r.f1_below_40 = compute_f1_below_threshold(y, y_hat, 40.0);
  const auto sd = compute_sparsity_diversity(betas);
  r.sparsity = sd.sparsity;
  r.diversity = sd.diversity;
  r.n_samples = y.size();
  for (std::size_t i = 0; i < y.size(); ++i) {
    SampleSummary s{ids[i], y[i], y_hat[i], {}, {}};
    std::vector<int> order(betas.cols);
    for (int k = 0; k < betas.cols; ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return betas(i, a) > betas(i, b); });
    for (int t = 0; t < std::min(3, betas.cols); ++t) {
      s.top_prototypes.push_back(order[t]);
      s.top_betas.push_back(betas(static_cast<int>(i), order[t]));
    }
    r.per_sample.push_back(std::move(s));
  }
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : r.per_sample)
    samples.push_back({{"id", s.id}, {"y", s.y}, {"y_hat", s.y_hat}, {"top_prototypes", s.top_prototypes},
                       {"top_betas", s.top_betas}});
  nlohmann::json j;
  j["split"] = r.split;
  j["n_samples"] = r.n_samples;
  j["r2"] = r.regression.r2_defined ? nlohmann::json(r.regression.r2) : nlohmann::json(nullptr);
  j["r2_defined"] = r.regression.r2_defined;
  j["mae"] = r.regression.mae;
  j["rmse"] = r.regression.rmse;
  j["f1_below_40"] = r.f1_below_40;
  j["sparsity"] = r.sparsity;
  j["diversity"] = r.diversity;
  j["per_sample"] = samples;
  return j;
}

inline std::string to_text(const EvalReport& r) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof(buf), "split %s  n=%zu\n", r.split.c_str(), r.n_samples);
  out += buf;
  if (r.regression.r2_defined) std::snprintf(buf, sizeof(buf), "  r2           %.6f\n", r.regression.r2);
  else std::snprintf(buf, sizeof(buf), "  r2           undefined (zero label variance)\n");
  out += buf;
  std::snprintf(buf, sizeof(buf), "  mae          %.6f\n  rmse         %.6f\n  f1_below_40  %.6f\n", r.regression.mae,
                r.regression.rmse, r.f1_below_40);
  out += buf;
  std::snprintf(buf, sizeof(buf), "  sparsity     %.6f\n  diversity    %.6f\n", r.sparsity, r.diversity);
  out += buf;
  return out;
}

}  // namespace protoef
