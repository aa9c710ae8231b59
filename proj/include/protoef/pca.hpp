// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <numeric>
#include <set>
#include <span>
#include <vector>

#include "protoef/prototype.hpp"
#include "protoef/volume.hpp"

namespace protoef {

struct Pca2d {
  std::vector<double> mean;           // D
  std::array<std::vector<double>, 2> axes;  // unit principal directions
  std::array<double, 2> variance{};
  Matrix<double> coords;              // N x 2
};

/// Projects the rows of `points` onto their top two principal axes.
inline Pca2d pca_2d(const Matrix<double>& points) {
  if (points.rows < 2 || points.cols < 1) throw ConfigError("PCA needs at least two points");
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> x(points.data.data(), points.rows, points.cols);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Mat centered = x.rowwise() - mu;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(points.rows - 1);
  if (cov.trace() <= 0.0) throw ConfigError("degenerate covariance: all PCA points are equal");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const int d = points.cols;
  Pca2d out;
  out.mean.assign(mu.data(), mu.data() + d);
  out.coords = Matrix<double>(points.rows, 2);
  for (int a = 0; a < 2; ++a) {
    out.axes[a].assign(d, 0.0);
    if (d - 1 - a < 0) continue;  // one-dimensional input: second axis stays zero
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - a);
    // sign convention: largest-magnitude component positive
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    out.variance[a] = std::max(0.0, eig.eigenvalues()(d - 1 - a));
    for (int j = 0; j < d; ++j) out.axes[a][j] = v(j);
    const Eigen::VectorXd proj = centered * v;
    for (int i = 0; i < points.rows; ++i) out.coords(i, a) = proj(i);
  }
  return out;
}

struct PrototypePlotData {
  Pca2d pca;
  int num_prototypes = 0;            // rows [0, m) of coords are prototypes
  std::vector<int> feature_rows;     // source row index of each remaining point
  std::vector<double> color_values;  // label per point (prototype label or ground truth)
};

/// Selects, for every prototype, the top_n validation rows nearest by cosine
/// (`rows` is N x D, one per validation clip and prototype slot as chosen by
/// the caller), deduplicates, and fits the PCA on prototypes plus selection.
inline PrototypePlotData prototype_pca(const PrototypeBank& bank, const Matrix<double>& rows,
                                       std::span<const double> row_labels, int top_n = 100) {
  if (bank.size() < 2) throw ConfigError("PCA plot needs at least two prototypes");
  if (rows.cols != bank.dim() || static_cast<int>(row_labels.size()) != rows.rows)
    throw ConfigError("feature rows do not match the prototype dimension or labels");
  std::set<int> chosen;
  std::vector<int> order(rows.rows);
  std::vector<double> cs(rows.rows);
  for (int k = 0; k < bank.size(); ++k) {
    for (int r = 0; r < rows.rows; ++r) cs[r] = cosine_similarity<double>(rows.row(r), bank.vectors.row(k));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return cs[a] > cs[b]; });
    for (int t = 0; t < std::min(top_n, rows.rows); ++t) chosen.insert(order[t]);
  }
  PrototypePlotData out;
  out.num_prototypes = bank.size();
  out.feature_rows.assign(chosen.begin(), chosen.end());
  Matrix<double> pts(bank.size() + static_cast<int>(chosen.size()), bank.dim());
  for (int k = 0; k < bank.size(); ++k) {
    std::copy(bank.vectors.row(k).begin(), bank.vectors.row(k).end(), pts.row(k).begin());
    out.color_values.push_back(bank.labels[k]);
  }
  int at = bank.size();
  for (int r : out.feature_rows) {
    std::copy(rows.row(r).begin(), rows.row(r).end(), pts.row(at++).begin());
    out.color_values.push_back(row_labels[r]);
  }
  out.pca = pca_2d(pts);
  return out;
}

}  // namespace protoef
