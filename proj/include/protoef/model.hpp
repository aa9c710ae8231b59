// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "protoef/archive.hpp"
#include "protoef/feature_extractor.hpp"
#include "protoef/losses.hpp"
#include "protoef/optim.hpp"
#include "protoef/prototype.hpp"

namespace protoef {

inline const std::string kPrototypeTensor = "prototypes.vectors";
inline const std::string kImportanceTensor = "regression.importance";

/// Everything one forward pass produces for a single clip.
template <typename T>
struct SampleForward {
  ExtractorOutput<T> net;
  Matrix<double> pooled;      // m x D
  std::vector<double> s;      // m similarities
  Contribution head;
};

/// Feature extractor + prototype bank + regression head.
template <typename T>
class ProtoEFNet {
 public:
  FeatureExtractor<T> extractor;
  PrototypeBank bank;
  double tau = 0.2;
  Matrix<double> d_vectors;           // gradient of the prototype vectors
  std::vector<double> d_importance;   // gradient of theta

  ProtoEFNet(const BackboneConfig& cfg, double temperature) : extractor(cfg), tau(temperature) {
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  }

  /// Random backbone (He init), unit-normal prototypes, theta = 1, labels
  /// evenly spaced over [10, 90].
  void init(Rng& rng) {
    extractor.init(rng);
    bank = PrototypeBank::initialize(extractor.config().num_prototypes, extractor.config().feature_dim, rng);
    zero_grad();
  }

  /// Copies backbone tensors from an archive; every backbone parameter must be
  /// present with a matching shape.
  void load_pretrained(const std::filesystem::path& path) {
    const auto archive = TensorArchive::load(path);
    for (auto* p : extractor.parameters()) {
      if (p->group != "backbone") continue;
      if (!archive.contains(p->name)) throw ConfigError("pretrained weights lack tensor " + p->name);
      const auto& t = archive.tensor(p->name);
      if (t.shape != p->shape) throw ConfigError("pretrained tensor " + p->name + " has a mismatched shape");
      const auto v = t.dtype == "f64" ? [&] {
        const auto d = archive.get<double>(p->name);
        return std::vector<T>(d.begin(), d.end());
      }() : [&] {
        const auto f = archive.get<float>(p->name);
        return std::vector<T>(f.begin(), f.end());
      }();
      p->value = v;
    }
  }

  SampleForward<T> forward(const Volume<T>& clip, nn::Tape<T>& tape) const {
    SampleForward<T> f;
    f.net = extractor.forward(clip, tape);
    f.pooled = pool_by_occurrence(f.net.features, f.net.maps);
    f.s = prototype_similarities(f.pooled, bank);
    f.head = regression_head(f.s, bank, tau);
    return f;
  }

  SampleForward<T> infer(const Volume<T>& clip) const {
    nn::Tape<T> tape(false);
    return forward(clip, tape);
  }

  /// Backprop for one sample. `d_s` is the loss gradient on the similarities
  /// excluding the head path, `d_prediction` the gradient on y-hat and
  /// `d_maps_extra` (optional) a direct gradient on the occurrence maps.
  void backward(const SampleForward<T>& f, std::span<const double> d_s, double d_prediction,
                const Volume<T>* d_maps_extra, nn::Tape<T>& tape) {
    const int m = bank.size(), d = bank.dim();
    std::vector<double> ds(d_s.begin(), d_s.end());
    if (ds.empty()) ds.assign(m, 0.0);
    regression_head_backward(f.s, bank.importance, bank.labels, tau, f.head, d_prediction, ds, d_importance);
    Matrix<double> d_pooled(m, d);
    for (int k = 0; k < m; ++k) {
      // clamp at |cs| = 1 has zero gradient
      if (std::abs(f.s[k]) >= 1.0) continue;
      cosine_similarity_backward(f.pooled.row(k), bank.vectors.row(k), ds[k], d_pooled.row(k), d_vectors.row(k));
    }
    Volume<T> d_features(f.net.features.channels, f.net.features.frames, f.net.features.height, f.net.features.width);
    Volume<T> d_maps = d_maps_extra ? *d_maps_extra
                                    : Volume<T>(f.net.maps.channels, f.net.maps.frames, f.net.maps.height, f.net.maps.width);
    pool_by_occurrence_backward(f.net.features, f.net.maps, f.pooled, d_pooled, d_features, d_maps);
    extractor.backward(d_features, d_maps, tape);
  }

  void zero_grad() {
    for (auto* p : extractor.parameters()) p->zero_grad();
    d_vectors = Matrix<double>(bank.size(), bank.dim());
    d_importance.assign(bank.size(), 0.0);
  }

  std::vector<ParamRef<T>> network_refs() {
    std::vector<ParamRef<T>> out;
    for (auto* p : extractor.parameters()) out.push_back({p->name, p->group, p->value, p->grad});
    return out;
  }

  std::vector<ParamRef<double>> bank_refs() {
    return {{kPrototypeTensor, "prototypes", bank.vectors.data, d_vectors.data},
            {kImportanceTensor, "regression", bank.importance, d_importance}};
  }
};

// ---------------------------------------------------------------------------
// Batch objective
// ---------------------------------------------------------------------------

struct ObjectiveSettings {
  LossWeights weights;
  double delta_l = 5.0;
  int k = 3;
  double rho = 1e-3;
};

struct BatchResult {
  LossBreakdown loss;
  std::vector<double> predictions;
};

/// Forward over a batch, the five-part objective, and (when `accumulate`)
/// gradients added into the model's parameter accumulators. `masks` holds one
/// region mask per clip on the map grid; required when the occurrence weight
/// is nonzero.
template <typename T>
BatchResult batch_objective(ProtoEFNet<T>& model, std::span<const Volume<T>> clips, std::span<const double> labels,
                            const std::vector<Volume<std::uint8_t>>* masks, const ObjectiveSettings& cfg,
                            bool accumulate) {
  const int n = static_cast<int>(clips.size()), m = model.bank.size();
  if (n < 1 || static_cast<int>(labels.size()) != n) throw ConfigError("batch needs one label per clip");
  const bool use_occ = cfg.weights.occurrence != 0.0;
  if (use_occ && (!masks || static_cast<int>(masks->size()) != n))
    throw ConfigError("occurrence loss weight is nonzero but region masks are missing");

  std::vector<nn::Tape<T>> tapes;
  tapes.reserve(n);
  std::vector<SampleForward<T>> fwd;
  fwd.reserve(n);
  for (int i = 0; i < n; ++i) {
    tapes.emplace_back(accumulate);
    fwd.push_back(model.forward(clips[i], tapes.back()));
  }

  BatchContext<T> ctx;
  ctx.similarities = Matrix<double>(n, m);
  ctx.sample_labels.assign(labels.begin(), labels.end());
  ctx.prototype_labels = model.bank.labels;
  ctx.delta_l = cfg.delta_l;
  ctx.k = cfg.k;
  BatchResult r;
  for (int i = 0; i < n; ++i) {
    std::copy(fwd[i].s.begin(), fwd[i].s.end(), ctx.similarities.row(i).begin());
    r.predictions.push_back(fwd[i].head.prediction);
  }
  if (use_occ) {
    for (auto& f : fwd) ctx.occurrence_maps.push_back(f.net.maps);
    ctx.lv_masks = *masks;
  }

  std::vector<double> d_pred(accumulate ? n : 0, 0.0);
  Matrix<double> d_clu(n, m), d_psd(n, m), d_pas(m, model.bank.dim());
  std::vector<Volume<T>> d_occ;
  LossParts parts;
  parts.mse = loss_mse(r.predictions, labels, d_pred);
  parts.cluster = loss_cluster(ctx, accumulate ? &d_clu : nullptr);
  parts.psd = loss_psd(ctx, accumulate ? &d_psd : nullptr);
  parts.pas = loss_pas(model.bank, cfg.delta_l, accumulate ? &d_pas : nullptr);
  if (use_occ) parts.occurrence = loss_occurrence(ctx, cfg.rho, accumulate ? &d_occ : nullptr);
  r.loss = loss_total(parts, cfg.weights);
  if (!accumulate) return r;

  const auto& w = cfg.weights;
  for (std::size_t i = 0; i < d_pas.data.size(); ++i) model.d_vectors.data[i] += w.pas * d_pas.data[i];
  std::vector<double> ds(m);
  for (int i = n - 1; i >= 0; --i) {
    for (int k = 0; k < m; ++k) ds[k] = w.cluster * d_clu(i, k) + w.psd * d_psd(i, k);
    const Volume<T>* extra = nullptr;
    if (use_occ) {
      for (auto& v : d_occ[i].data) v = static_cast<T>(w.occurrence * v);
      extra = &d_occ[i];
    }
    model.backward(fwd[i], ds, w.mse * d_pred[i], extra, tapes[i]);
  }
  return r;
}

}  // namespace protoef
