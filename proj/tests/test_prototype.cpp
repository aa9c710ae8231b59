// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "protoef/prototype.hpp"

using namespace protoef;

namespace {

double entropy(const std::vector<double>& p) {
  double h = 0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

PrototypeBank bank_of(std::vector<std::vector<double>> rows, std::vector<double> labels) {
  PrototypeBank b;
  b.vectors = Matrix<double>(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), b.vectors.row(i).begin());
  b.labels = std::move(labels);
  b.importance.assign(rows.size(), 1.0);
  return b;
}

Matrix<double> pooled_of(std::vector<std::vector<double>> rows) {
  return bank_of(rows, std::vector<double>(rows.size())).vectors;
}

}  // namespace

TEST(CosineSimilarity, Examples) {
  std::vector<double> a{1, 2, 3}, b{4, 5, 6}, e0{1, 0}, e1{0, 1};
  EXPECT_NEAR(cosine_similarity<double>(a, a), 1.0, 1e-9);
  EXPECT_DOUBLE_EQ(cosine_similarity<double>(e0, e1), 0.0);
  EXPECT_NEAR(cosine_similarity<double>(a, b), 32.0 / (std::sqrt(14.0) * std::sqrt(77.0)), 1e-9);
}

TEST(CosineSimilarity, ScaleInvariant) {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> f(8), p(8), g(8);
    for (int i = 0; i < 8; ++i) f[i] = rng.normal(), p[i] = rng.normal();
    const double alpha = rng.uniform(0.1, 10.0);
    for (int i = 0; i < 8; ++i) g[i] = alpha * f[i];
    EXPECT_NEAR(cosine_similarity<double>(g, p), cosine_similarity<double>(f, p), 1e-6);
  }
}

TEST(PrototypeBank, InitializeLinspaceAndUnitNorm) {
  Rng rng(4);
  const auto b = PrototypeBank::initialize(40, 16, rng);
  EXPECT_DOUBLE_EQ(b.labels.front(), 10.0);
  EXPECT_DOUBLE_EQ(b.labels.back(), 90.0);
  for (int k = 1; k < 40; ++k) EXPECT_NEAR(b.labels[k] - b.labels[k - 1], 80.0 / 39.0, 1e-12);
  EXPECT_NEAR(b.labels[1], 12.051282051, 1e-8);
  for (double t : b.importance) EXPECT_EQ(t, 1.0);
  for (int k = 0; k < 40; ++k) {
    double n = 0;
    for (double v : b.vectors.row(k)) n += v * v;
    EXPECT_NEAR(n, 1.0, 1e-12);
  }
  Rng again(4);
  EXPECT_EQ(PrototypeBank::initialize(40, 16, again), b);
}

TEST(RegressionHead, UniformScoresGiveMeanLabel) {
  Rng rng(0);
  auto b = PrototypeBank::initialize(9, 4, rng);
  std::vector<double> s(9, 0.3);
  const auto c = regression_head(s, b, 0.2);
  for (double v : c.beta) EXPECT_NEAR(v, 1.0 / 9, 1e-12);
  EXPECT_NEAR(c.prediction, 50.0, 1e-9);
}

TEST(RegressionHead, TwoPrototypeClosedForm) {
  std::vector<double> s{1, -1}, theta{1, 1}, l{10, 90};
  const auto c = regression_head(s, theta, l, 0.2);
  EXPECT_NEAR(c.beta[0], 1.0 / (1.0 + std::exp(-10.0)), 1e-12);
  EXPECT_NEAR(c.prediction, 10.0 + 80.0 / (1.0 + std::exp(10.0)), 1e-9);
  EXPECT_NEAR(c.prediction, 10.0036, 1e-4);
}

TEST(RegressionHead, MatchesOracleAndInvariants) {
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const int m = 2 + static_cast<int>(rng.below(39));
    std::vector<double> s(m), theta(m), l(m);
    for (int k = 0; k < m; ++k) s[k] = rng.uniform(-1, 1), theta[k] = rng.uniform(-2, 2), l[k] = rng.uniform(10, 90);
    const auto c = regression_head(s, theta, l, 0.2);
    const auto o = oracle::head(s, theta, l, 0.2);
    EXPECT_NEAR(std::accumulate(c.beta.begin(), c.beta.end(), 0.0), 1.0, 1e-6);
    EXPECT_GE(c.prediction, *std::min_element(l.begin(), l.end()) - 1e-9);
    EXPECT_LE(c.prediction, *std::max_element(l.begin(), l.end()) + 1e-9);
    EXPECT_NEAR(c.prediction, o.y, 1e-9);
    // shift robustness: s*theta shifted by a constant through theta = 1
    std::vector<double> ones(m, 1.0), z(m), zs(m);
    for (int k = 0; k < m; ++k) z[k] = s[k] * theta[k], zs[k] = z[k] + 3.7;
    const auto a = regression_head(z, ones, l, 0.2);
    const auto b = regression_head(zs, ones, l, 0.2);
    for (int k = 0; k < m; ++k) EXPECT_NEAR(a.beta[k], b.beta[k], 1e-6);
    const auto hot = regression_head(s, ones, l, 0.2);
    const auto warm = regression_head(s, ones, l, 1.0);
    EXPECT_LT(entropy(hot.beta), entropy(warm.beta));
  }
}

TEST(RegressionHead, GradientsMatchFiniteDifferences) {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    const int m = 6;
    std::vector<double> s(m), theta(m), l(m);
    for (int k = 0; k < m; ++k) s[k] = rng.uniform(-1, 1), theta[k] = rng.uniform(0.5, 1.5), l[k] = rng.uniform(10, 90);
    const auto c = regression_head(s, theta, l, 0.2);
    std::vector<double> ds(m, 0.0), dt(m, 0.0);
    regression_head_backward(s, theta, l, 0.2, c, 1.0, ds, dt);
    const auto ns = oracle::numeric_gradient(
        [&](const std::vector<double>& x) { return regression_head(x, theta, l, 0.2).prediction; }, s);
    const auto nt = oracle::numeric_gradient(
        [&](const std::vector<double>& x) { return regression_head(s, x, l, 0.2).prediction; }, theta);
    EXPECT_LT(oracle::relative_error(ds, ns), 1e-4);
    EXPECT_LT(oracle::relative_error(dt, nt), 1e-4);
  }
}

TEST(ScoreSheet, SortedAndFaithful) {
  Rng rng(21);
  auto bank = PrototypeBank::initialize(12, 5, rng);
  Matrix<double> pooled(12, 5);
  for (auto& v : pooled.data) v = rng.normal();
  const auto sheet = score_sample(pooled, bank, 0.2, "clip", 33.0);
  double prev = 1.0;
  for (const auto& r : sheet.rows) {
    EXPECT_LE(r.beta, prev);
    prev = r.beta;
  }
  EXPECT_NEAR(sheet.recompute_prediction(), sheet.prediction, 1e-9);
  const auto s = prototype_similarities(pooled, bank);
  int arg = 0;
  for (int k = 1; k < 12; ++k)
    if (s[k] * bank.importance[k] > s[arg] * bank.importance[arg]) arg = k;
  EXPECT_EQ(sheet.rows[0].prototype, arg);
  const auto j = to_json(sheet);
  EXPECT_EQ(j["prototypes"].size(), 12u);
  EXPECT_EQ(j["clip_id"], "clip");
}

// Top-3 mass for m = 40, tau = 0.2 against the closed-form softmax value.
TEST(ScoreSheet, TopThreeMassMatchesClosedForm) {
  Rng rng(0);
  auto bank = PrototypeBank::initialize(40, 2, rng);
  for (double gap : {0.5, 1.5}) {
    std::vector<double> s(40);
    s[0] = 1.0, s[1] = 0.99, s[2] = 0.98;
    for (int k = 3; k < 40; ++k) s[k] = 0.98 - gap - 0.001 * k;
    const auto sheet = make_score_sheet(s, regression_head(s, bank, 0.2), bank, "c", 0.0);
    const double top3 = sheet.rows[0].beta + sheet.rows[1].beta + sheet.rows[2].beta;
    double num = 0, den = 0;
    for (int k = 0; k < 40; ++k) {
      const double e = std::exp(s[k] / 0.2);
      den += e;
      if (k < 3) num += e;
    }
    EXPECT_NEAR(top3, num / den, 1e-12);
    if (gap >= 1.5) EXPECT_GT(top3, 0.99);
    else EXPECT_LT(top3, 0.99);  // spread 0.5 leaves roughly half the mass in the tail
  }
}

TEST(Projection, SingleCandidateBecomesPrototype) {
  auto bank = bank_of({{1, 0, 0}, {0, 1, 0}}, {20, 80});
  ProjectionCandidate c{pooled_of({{0.3, 0.4, 0.5}, {0, 0, 1}}), 22.0, "a", 0};
  const auto out = project_prototypes(bank, std::span(&c, 1), 5.0);
  EXPECT_EQ(out.vectors(0, 0), 0.3);
  EXPECT_EQ(out.vectors(0, 2), 0.5);
  EXPECT_EQ(out.labels[0], 22.0);
  // the stabilizing epsilon keeps unit-norm self-similarity 1e-8 below 1
  EXPECT_NEAR(cosine_similarity<double>(c.pooled.row(0), out.vectors.row(0)), 1.0, 1e-7);
  EXPECT_TRUE(out.records[0].projected);
  EXPECT_EQ(out.records[0].original_label, 20.0);
  EXPECT_FALSE(out.records[1].projected);
  EXPECT_EQ(out.vectors(1, 1), 1.0);
  EXPECT_EQ(out.labels[1], 80.0);
  EXPECT_TRUE(out.projected);
}

TEST(Projection, HigherSimilarityWins) {
  auto bank = bank_of({{1, 0}, {0, 1}}, {50, 90});
  const double a = 0.9, b = 0.6;
  std::vector<ProjectionCandidate> cs{{pooled_of({{b, std::sqrt(1 - b * b)}, {1, 0}}), 52, "low", 0},
                                      {pooled_of({{a, std::sqrt(1 - a * a)}, {1, 0}}), 48, "high", 0}};
  const auto out = project_prototypes(bank, cs, 5.0);
  EXPECT_EQ(out.records[0].clip_id, "high");
  EXPECT_EQ(out.labels[0], 48);
  EXPECT_NEAR(out.records[0].similarity, 0.9, 1e-7);
}

TEST(Projection, OutOfWindowLeavesPrototypeUnchanged) {
  auto bank = bank_of({{0.1, 0.2}, {0.3, 0.4}}, {30, 60});
  std::vector<ProjectionCandidate> cs{{pooled_of({{1, 1}, {1, 1}}), 36, "x", 0},
                                      {pooled_of({{1, 1}, {1, 1}}), 54, "y", 0}};
  const auto out = project_prototypes(bank, cs, 5.0);
  EXPECT_EQ(out.vectors.data, bank.vectors.data);
  EXPECT_EQ(out.labels, bank.labels);
  EXPECT_FALSE(out.records[0].projected);
  EXPECT_FALSE(out.records[1].projected);
}

TEST(Projection, IdempotentAndLabelsStayInRange) {
  Rng rng(12);
  auto bank = PrototypeBank::initialize(8, 6, rng);
  std::vector<ProjectionCandidate> cs;
  for (int i = 0; i < 40; ++i) {
    ProjectionCandidate c;
    c.pooled = Matrix<double>(8, 6);
    for (auto& v : c.pooled.data) v = rng.normal();
    c.label = rng.uniform(10, 90);
    c.clip_id = "c" + std::to_string(i);
    cs.push_back(c);
  }
  const auto once = project_prototypes(bank, cs, 5.0);
  const auto twice = project_prototypes(once, cs, 5.0);
  EXPECT_EQ(once.vectors.data, twice.vectors.data);
  EXPECT_EQ(once.labels, twice.labels);
  EXPECT_EQ(once.size(), bank.size());
  for (int k = 0; k < once.size(); ++k) {
    EXPECT_GE(once.labels[k], 10.0);
    EXPECT_LE(once.labels[k], 90.0);
    EXPECT_EQ(twice.records[k].original_label, bank.labels[k]);
  }
}
