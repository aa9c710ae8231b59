// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "protoef/feature_extractor.hpp"
#include "protoef/model.hpp"

using namespace protoef;

namespace {

BackboneConfig tiny(int size = 64, int frames = 64) {
  BackboneConfig c;
  c.variant = "tiny";
  c.clip_length = frames;
  c.height = size;
  c.width = size;
  return c;
}

template <typename T>
Volume<T> random_clip(Rng& rng, const BackboneConfig& c) {
  Volume<T> v(c.in_channels, c.clip_length, c.height, c.width);
  for (auto& x : v.data) x = static_cast<T>(rng.uniform());
  return v;
}

bool all_finite(const Volume<float>& v) {
  for (float x : v.data)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace

TEST(FeatureExtractor, TinyShapeContract) {
  const auto cfg = tiny();
  FeatureExtractor<float> fx(cfg);
  Rng rng(1);
  fx.init(rng);
  nn::Tape<float> tape(false);
  const auto out = fx.forward(random_clip<float>(rng, cfg), tape);
  EXPECT_EQ(out.features.shape_string(), "64x8x8x8");
  EXPECT_EQ(out.maps.shape_string(), "10x8x8x8");
  EXPECT_EQ(fx.grid(), (std::array<int, 3>{8, 8, 8}));
  for (float v : out.maps.data) EXPECT_GE(v, 0.0f);
}

TEST(FeatureExtractor, ShapeContractAcrossInputSizes) {
  for (auto [size, frames] : {std::pair{16, 16}, std::pair{32, 24}, std::pair{40, 64}}) {
    const auto cfg = tiny(size, frames);
    FeatureExtractor<float> fx(cfg);
    Rng rng(2);
    fx.init(rng);
    nn::Tape<float> tape(false);
    const auto out = fx.forward(random_clip<float>(rng, cfg), tape);
    const auto g = fx.grid();
    EXPECT_EQ(out.features.frames, g[0]);
    EXPECT_EQ(out.features.height, g[1]);
    EXPECT_EQ(out.maps.width, g[2]);
    EXPECT_EQ(g[1], (((size + 1) / 2 + 1) / 2 + 1) / 2);
  }
}

TEST(FeatureExtractor, ZeroInputFiniteAndDeterministic) {
  const auto cfg = tiny(32, 32);
  FeatureExtractor<float> fx(cfg);
  Rng rng(3);
  fx.init(rng);
  Volume<float> zeros(3, 32, 32, 32);
  nn::Tape<float> t1(false), t2(false);
  const auto a = fx.forward(zeros, t1);
  EXPECT_TRUE(all_finite(a.features));
  EXPECT_TRUE(all_finite(a.maps));
  const auto clip = random_clip<float>(rng, cfg);
  EXPECT_EQ(fx.extract_features(clip).data, fx.extract_features(clip).data);
}

TEST(FeatureExtractor, ShapeMismatchNamesDims) {
  FeatureExtractor<float> fx(tiny());
  Volume<float> wrong(3, 32, 64, 64);
  try {
    fx.extract_features(wrong);
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("3x32x64x64"), std::string::npos);
    EXPECT_NE(msg.find("3x64x64x64"), std::string::npos);
  }
}

TEST(FeatureExtractor, FullVariantNamesAndStrides) {
  BackboneConfig cfg;
  cfg.variant = "full";
  cfg.clip_length = 16;
  cfg.height = 32;
  cfg.width = 32;
  cfg.feature_dim = 8;
  cfg.num_prototypes = 3;
  FeatureExtractor<float> fx(cfg);
  EXPECT_EQ(fx.grid(), (std::array<int, 3>{2, 2, 2}));
  std::set<std::string> names;
  for (auto* p : fx.parameters()) names.insert(p->name);
  for (const char* n : {"backbone.stem.0.weight", "backbone.stem.3.weight", "backbone.layer1.0.conv1.0.0.weight",
                        "backbone.layer1.0.conv1.0.3.weight", "backbone.layer2.0.downsample.0.weight",
                        "backbone.layer4.1.conv2.1.weight", "feature.0.weight", "feature.2.bias", "roi.2.weight"})
    EXPECT_TRUE(names.count(n)) << n;
  // mid-channel rule of the (2+1)D factorization
  for (auto* p : fx.parameters())
    if (p->name == "backbone.layer1.0.conv1.0.0.weight") {
      EXPECT_EQ(p->shape[0], 144);
    }
}

TEST(Pooling, UniformAndOneHotMaps) {
  Rng rng(4);
  Volume<double> f(3, 2, 2, 2);
  for (auto& v : f.data) v = rng.normal();
  Volume<double> maps(2, 2, 2, 2, 0.0);
  for (std::size_t c = 0; c < 8; ++c) maps.data[c] = 1.0;  // map 0 uniform
  maps.data[8 + 5] = 1.0;                                   // map 1 one-hot at cell 5
  const auto pooled = pool_by_occurrence(f, maps);
  for (int j = 0; j < 3; ++j) {
    double mean = 0;
    for (double v : f.channel(j)) mean += v;
    EXPECT_NEAR(pooled(0, j), mean / 8, 1e-7);
    EXPECT_NEAR(pooled(1, j), f.channel(j)[5], 1e-7);
  }
}

TEST(Pooling, ZeroMapFallsBackToMean) {
  Rng rng(5);
  Volume<double> f(2, 1, 2, 2);
  for (auto& v : f.data) v = rng.normal();
  Volume<double> maps(1, 1, 2, 2, 0.0);
  const auto pooled = pool_by_occurrence(f, maps);
  for (int j = 0; j < 2; ++j) {
    EXPECT_TRUE(std::isfinite(pooled(0, j)));
    double mean = 0;
    for (double v : f.channel(j)) mean += v;
    EXPECT_NEAR(pooled(0, j), mean / 4, 1e-12);
  }
}

TEST(Pooling, ZeroedRoiWeightsGiveFinitePooledRows) {
  auto cfg = tiny(16, 16);
  cfg.num_prototypes = 3;
  ProtoEFNet<float> model(cfg, 0.2);
  Rng rng(6);
  model.init(rng);
  // zero the last ROI conv so map 1 is identically zero before the abs
  for (auto* p : model.extractor.parameters())
    if (p->name == "roi.2.weight" || p->name == "roi.2.bias")
      for (std::size_t i = 0; i < p->value.size(); ++i)
        if (p->name == "roi.2.bias" ? i == 1 : (i / (p->value.size() / 3)) == 1) p->value[i] = 0.0f;
  const auto f = model.infer(random_clip<float>(rng, cfg));
  for (float v : f.net.maps.channel(1)) EXPECT_EQ(v, 0.0f);
  for (double v : f.pooled.row(1)) EXPECT_TRUE(std::isfinite(v));
  EXPECT_TRUE(std::isfinite(f.head.prediction));
}

TEST(Pooling, MatchesTripleLoopAndInvariances) {
  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    Volume<double> f(4, 2, 3, 3), maps(3, 2, 3, 3);
    for (auto& v : f.data) v = rng.normal();
    for (auto& v : maps.data) v = rng.uniform();
    const auto pooled = pool_by_occurrence(f, maps);
    for (int k = 0; k < 3; ++k)
      for (int j = 0; j < 4; ++j) {
        long double num = 0, den = 0;
        for (int tt = 0; tt < 2; ++tt)
          for (int y = 0; y < 3; ++y)
            for (int x = 0; x < 3; ++x) {
              num += maps.at(k, tt, y, x) * f.at(j, tt, y, x);
              den += maps.at(k, tt, y, x);
            }
        const double ref = static_cast<double>(num / (den + 1e-8L));
        EXPECT_NEAR(pooled(k, j), ref, 1e-5 * std::max(1.0, std::fabs(ref)));
      }
    const double alpha = rng.uniform(-3, 3), c = rng.uniform(0.1, 10);
    Volume<double> fa = f, mc = maps;
    for (auto& v : fa.data) v *= alpha;
    for (auto& v : mc.data) v *= c;
    const auto pa = pool_by_occurrence(fa, maps);
    const auto pc = pool_by_occurrence(f, mc);
    for (std::size_t i = 0; i < pooled.data.size(); ++i) {
      EXPECT_NEAR(pa.data[i], alpha * pooled.data[i], 1e-9);
      EXPECT_NEAR(pc.data[i], pooled.data[i], 1e-6);
    }
  }
}

TEST(Pooling, GradientsMatchFiniteDifferences) {
  Rng rng(8);
  Volume<double> f(3, 2, 2, 2), maps(2, 2, 2, 2);
  for (auto& v : f.data) v = rng.normal();
  for (auto& v : maps.data) v = rng.uniform(0.1, 1.0);
  Matrix<double> r(2, 3);
  for (auto& v : r.data) v = rng.normal();
  auto loss = [&](const Volume<double>& ff, const Volume<double>& mm) {
    const auto p = pool_by_occurrence(ff, mm);
    double s = 0;
    for (std::size_t i = 0; i < p.data.size(); ++i) s += r.data[i] * p.data[i];
    return s;
  };
  Volume<double> df(3, 2, 2, 2), dm(2, 2, 2, 2);
  pool_by_occurrence_backward(f, maps, pool_by_occurrence(f, maps), r, df, dm);
  const auto nf = oracle::numeric_gradient([&](const std::vector<double>& x) {
    Volume<double> ff = f;
    ff.data = x;
    return loss(ff, maps);
  }, f.data);
  const auto nm = oracle::numeric_gradient([&](const std::vector<double>& x) {
    Volume<double> mm = maps;
    mm.data = x;
    return loss(f, mm);
  }, maps.data);
  EXPECT_LT(oracle::relative_error(df.data, nf), 1e-4);
  EXPECT_LT(oracle::relative_error(dm.data, nm), 1e-4);
}

TEST(Upsample, ConstantMapIsAllZeros) {
  Volume<float> map(1, 2, 2, 2, 0.7f);
  const auto up = upsample_map_to_input(map, 8, 16, 16);
  EXPECT_EQ(up.shape_string(), "1x8x16x16");
  for (float v : up.data) EXPECT_EQ(v, 0.0f);
}

TEST(Upsample, OneHotPeaksAtScaledCoordinate) {
  Volume<float> map(1, 4, 4, 4, 0.0f);
  map.at(0, 1, 2, 3) = 1.0f;
  const auto up = upsample_map_to_input(map, 16, 32, 32);
  float lo = 1, hi = 0;
  std::size_t arg = 0;
  for (std::size_t i = 0; i < up.size(); ++i) {
    lo = std::min(lo, up.data[i]);
    if (up.data[i] > hi) hi = up.data[i], arg = i;
  }
  EXPECT_EQ(lo, 0.0f);
  EXPECT_EQ(hi, 1.0f);
  const int x = static_cast<int>(arg % 32), y = static_cast<int>(arg / 32 % 32), t = static_cast<int>(arg / 1024);
  // cell c covers [c*s, (c+1)*s); its center lies between the two middle pixels
  EXPECT_TRUE(t == 5 || t == 6) << t;
  EXPECT_TRUE(y == 19 || y == 20) << y;
  EXPECT_TRUE(x == 27 || x == 28) << x;
}

TEST(DownsampleMask, AreaMax) {
  Volume<std::uint8_t> mask(1, 4, 4, 4, 0);
  mask.at(0, 3, 0, 1) = 1;
  const auto d = downsample_mask(mask, 2, 2, 2);
  EXPECT_EQ(d.at(0, 1, 0, 0), 1);
  int on = 0;
  for (auto v : d.data) on += v;
  EXPECT_EQ(on, 1);
}

// End-to-end analytic gradient of the batch objective in double precision.
TEST(ModelGradients, BatchObjectiveMatchesFiniteDifferences) {
  BackboneConfig cfg = tiny(16, 16);
  cfg.tiny_channels = {2, 4, 4};
  cfg.feature_dim = 4;
  cfg.num_prototypes = 3;
  ProtoEFNet<double> model(cfg, 0.5);
  Rng rng(9);
  model.init(rng);
  model.bank.labels = {20, 50, 80};
  // zero biases leave dead cells with maps of exactly |0|, a kink of the
  // absolute value; move off that tie point
  for (auto* p : model.extractor.parameters())
    if (p->name.ends_with(".bias"))
      for (auto& v : p->value) v = rng.uniform(-0.05, 0.05);
  std::vector<Volume<double>> clips{random_clip<double>(rng, cfg), random_clip<double>(rng, cfg)};
  std::vector<double> labels{24, 52};
  std::vector<Volume<std::uint8_t>> masks;
  for (int i = 0; i < 2; ++i) {
    Volume<std::uint8_t> m(1, 2, 2, 2);
    for (auto& v : m.data) v = rng.below(2);
    masks.push_back(m);
  }
  ObjectiveSettings obj;
  obj.weights = {0.01, 0.75, 0.5, 0.5, 0.3};
  obj.delta_l = 10.0;
  obj.k = 2;

  model.zero_grad();
  batch_objective<double>(model, clips, labels, &masks, obj, true);
  auto total = [&]() { return batch_objective<double>(model, clips, labels, &masks, obj, false).loss.total; };

  for (auto* p : model.extractor.parameters()) {
    // sample a few coordinates per tensor to keep the test fast
    const std::size_t stride = std::max<std::size_t>(1, p->value.size() / 6);
    std::vector<double> a, n;
    for (std::size_t i = 0; i < p->value.size(); i += stride) {
      const double keep = p->value[i];
      p->value[i] = keep + 1e-4;
      const double up = total();
      p->value[i] = keep - 1e-4;
      const double down = total();
      p->value[i] = keep;
      a.push_back(p->grad[i]);
      n.push_back((up - down) / 2e-4);
    }
    EXPECT_LT(oracle::relative_error(a, n, 1e-5), 1e-4) << p->name;
  }
  auto check_bank = [&](std::vector<double>& values, const std::vector<double>& grad, const char* what) {
    std::vector<double> n(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double keep = values[i];
      values[i] = keep + 1e-4;
      const double up = total();
      values[i] = keep - 1e-4;
      const double down = total();
      values[i] = keep;
      n[i] = (up - down) / 2e-4;
    }
    EXPECT_LT(oracle::relative_error(grad, n), 1e-4) << what;
  };
  check_bank(model.bank.vectors.data, model.d_vectors.data, "prototype vectors");
  check_bank(model.bank.importance, model.d_importance, "importance");
}
