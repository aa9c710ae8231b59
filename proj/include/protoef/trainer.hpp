// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "protoef/archive.hpp"
#include "protoef/data.hpp"
#include "protoef/metrics.hpp"
#include "protoef/model.hpp"
#include "protoef/optim.hpp"

namespace protoef {

/// Training hyperparameters. Field defaults are the full-scale settings;
/// configs/desk.json holds the CPU-scale overrides.
struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  double lr_backbone = 1e-4;
  double lr_regression = 1e-4;
  double lr_feature_roi = 1e-3;
  double lr_prototypes = 3e-3;
  double tau = 0.2;
  int m = 40;
  double delta_l = 5.0;
  int k = 3;
  LossWeights weights;
  double rho = 1e-3;
  std::uint64_t seed = 0;
  std::string projection_epoch = "last";
  std::string variant = "full";
  int feature_dim = 256;
  std::array<int, 3> tiny_channels{16, 32, 64};
  int in_channels = 3;
  int clip_length = 64;
  int height = 112;
  int width = 112;
  int period = 1;
  double rotate_degrees = 15.0;
  double oversample_threshold = 50.0;  // <= 0 disables oversampling
  double grad_clip = 5.0;              // <= 0 disables clipping
  std::vector<std::string> frozen_groups;
  std::string pretrained_weights;
  std::string data_dir;
  std::string out_dir;

  BackboneConfig backbone() const {
    BackboneConfig b;
    b.variant = variant;
    b.tiny_channels = tiny_channels;
    b.feature_dim = feature_dim;
    b.num_prototypes = m;
    b.in_channels = in_channels;
    b.clip_length = clip_length;
    b.height = height;
    b.width = width;
    b.pretrained_weights_path = pretrained_weights;
    return b;
  }

  ObjectiveSettings objective() const { return {weights, delta_l, k, rho}; }

  std::map<std::string, double> group_lrs() const {
    return {{"backbone", lr_backbone}, {"feature_roi", lr_feature_roi}, {"prototypes", lr_prototypes},
            {"regression", lr_regression}};
  }
};

inline void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (c.m < 2) throw ConfigError("m must be >= 2");
  for (const auto& [g, lr] : c.group_lrs())
    if (!(lr >= 0.0)) throw ConfigError("learning rate for " + g + " must be nonnegative");
  if (!(c.tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(c.delta_l > 0.0) || c.k < 1) throw ConfigError("delta_l > 0 and k >= 1 required");
  if (c.projection_epoch != "last") throw ConfigError("projection_epoch supports only \"last\"");
  if (c.rotate_degrees < 0.0 || c.rotate_degrees > 45.0) throw ConfigError("rotate_degrees must lie in [0, 45]");
  if (c.period < 1) throw ConfigError("period must be >= 1");
  static const std::set<std::string> groups{"backbone", "feature_roi", "prototypes", "regression"};
  for (const auto& g : c.frozen_groups)
    if (!groups.count(g)) throw ConfigError("unknown parameter group '" + g + "' in frozen_groups");
  validate(c.backbone());
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr_backbone", c.lr_backbone},
          {"lr_regression", c.lr_regression},
          {"lr_feature_roi", c.lr_feature_roi},
          {"lr_prototypes", c.lr_prototypes},
          {"tau", c.tau},
          {"m", c.m},
          {"delta_l", c.delta_l},
          {"k", c.k},
          {"lambda_mse", c.weights.mse},
          {"lambda_cluster", c.weights.cluster},
          {"lambda_psd", c.weights.psd},
          {"lambda_pas", c.weights.pas},
          {"lambda_occurrence", c.weights.occurrence},
          {"rho", c.rho},
          {"seed", c.seed},
          {"projection_epoch", c.projection_epoch},
          {"variant", c.variant},
          {"feature_dim", c.feature_dim},
          {"tiny_channels", c.tiny_channels},
          {"in_channels", c.in_channels},
          {"clip_length", c.clip_length},
          {"height", c.height},
          {"width", c.width},
          {"period", c.period},
          {"rotate_degrees", c.rotate_degrees},
          {"oversample_threshold", c.oversample_threshold},
          {"grad_clip", c.grad_clip},
          {"frozen_groups", c.frozen_groups},
          {"pretrained_weights", c.pretrained_weights},
          {"data_dir", c.data_dir},
          {"out_dir", c.out_dir}};
}

/// Overlays the keys present in `j` onto `base`. Unknown keys are errors.
inline TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const auto known = to_json(base);
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
  };
  TrainConfig c = base;
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  get("lr_backbone", c.lr_backbone);
  get("lr_regression", c.lr_regression);
  get("lr_feature_roi", c.lr_feature_roi);
  get("lr_prototypes", c.lr_prototypes);
  get("tau", c.tau);
  get("m", c.m);
  get("delta_l", c.delta_l);
  get("k", c.k);
  get("lambda_mse", c.weights.mse);
  get("lambda_cluster", c.weights.cluster);
  get("lambda_psd", c.weights.psd);
  get("lambda_pas", c.weights.pas);
  get("lambda_occurrence", c.weights.occurrence);
  get("rho", c.rho);
  get("seed", c.seed);
  get("projection_epoch", c.projection_epoch);
  get("variant", c.variant);
  get("feature_dim", c.feature_dim);
  get("tiny_channels", c.tiny_channels);
  get("in_channels", c.in_channels);
  get("clip_length", c.clip_length);
  get("height", c.height);
  get("width", c.width);
  get("period", c.period);
  get("rotate_degrees", c.rotate_degrees);
  get("oversample_threshold", c.oversample_threshold);
  get("grad_clip", c.grad_clip);
  get("frozen_groups", c.frozen_groups);
  get("pretrained_weights", c.pretrained_weights);
  get("data_dir", c.data_dir);
  get("out_dir", c.out_dir);
  validate(c);
  return c;
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + std::filesystem::absolute(path).string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " does not parse: " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;  // 1-based
  LossParts loss;
  double total = 0.0;
  double train_mae = 0.0;
  double train_mse = 0.0;
  std::optional<EvalReport> val;
};

struct TrainState {
  TrainConfig config;
  ProtoEFNet<float> model;
  Adam adam;
  Rng rng;
  int epoch = 0;  // completed epochs
  long step = 0;
  double best_val_mae = std::numeric_limits<double>::infinity();
  std::vector<EpochMetrics> history;

  explicit TrainState(const TrainConfig& c) : config(c), model(c.backbone(), c.tau), rng(c.seed) {
    adam.group_lr = c.group_lrs();
    adam.frozen_groups = {c.frozen_groups.begin(), c.frozen_groups.end()};
  }
};

/// Random init per the config; optional pretrained backbone.
inline TrainState init_model(const TrainConfig& config) {
  validate(config);
  TrainState s(config);
  Rng init_rng(config.seed ^ 0x5EEDULL);
  s.model.init(init_rng);
  if (!config.pretrained_weights.empty()) s.model.load_pretrained(config.pretrained_weights);
  return s;
}

/// Sink for structured log lines (one JSON object per line).
using LogSink = std::function<void(const nlohmann::json&)>;

inline nlohmann::json to_json(const LossParts& p) {
  return {{"mse", p.mse}, {"cluster", p.cluster}, {"psd", p.psd}, {"pas", p.pas}, {"occurrence", p.occurrence}};
}

inline LossParts loss_parts_from_json(const nlohmann::json& j) {
  return {j.at("mse").get<double>(), j.at("cluster").get<double>(), j.at("psd").get<double>(),
          j.at("pas").get<double>(), j.at("occurrence").get<double>()};
}

// ---------------------------------------------------------------------------
// Epoch loop
// ---------------------------------------------------------------------------

/// Map-grid mask for a clip, or nullopt when the clip carries none.
inline std::optional<Volume<std::uint8_t>> mask_on_grid(const VideoClip& clip, const std::array<int, 3>& grid) {
  if (!clip.mask) return std::nullopt;
  return downsample_mask(*clip.mask, grid[0], grid[1], grid[2]);
}

inline bool split_has_masks(const DatasetSplit& split) {
  if (split.empty()) return false;
  return split.records.front().load()->has_mask();
}

/// One pass over the oversampled, shuffled, augmented training split.
inline EpochMetrics train_epoch(TrainState& state, const DatasetSplit& split, const LogSink& log = {}) {
  const auto& cfg = state.config;
  if (split.empty()) throw ConfigError("training split is empty");
  auto& rng = state.rng;
  DatasetSplit work = cfg.oversample_threshold > 0.0 ? balance_by_oversampling(split, cfg.oversample_threshold, rng).split
                                                     : split;
  std::vector<std::size_t> order(work.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order.begin(), order.end());

  SamplingPolicy policy = default_policy_for("train", cfg.clip_length, cfg.period);
  policy.channels = cfg.in_channels;
  const auto grid = state.model.extractor.grid();
  const auto objective = cfg.objective();

  EpochMetrics em;
  em.epoch = state.epoch + 1;
  double abs_err = 0.0, sq_err = 0.0;
  std::size_t seen = 0, batches = 0;
  for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
    std::vector<Volume<float>> clips;
    std::vector<double> labels;
    std::vector<std::string> ids;
    std::vector<Volume<std::uint8_t>> masks;
    for (std::size_t i = b0; i < b1; ++i) {
      const auto& rec = work.records[order[i]];
      VideoClip clip = sample_clip(rec, policy, rng);
      clip = augment_rotate(clip, cfg.rotate_degrees, rng);
      if (objective.weights.occurrence != 0.0) {
        auto mk = mask_on_grid(clip, grid);
        if (!mk) throw ConfigError("clip '" + rec.id + "' has no region mask but the occurrence weight is nonzero");
        masks.push_back(std::move(*mk));
      }
      clips.push_back(std::move(clip.frames));
      labels.push_back(rec.label);
      ids.push_back(rec.id);
    }
    state.model.zero_grad();
    BatchResult r;
    try {
      r = batch_objective<float>(state.model, clips, labels, masks.empty() ? nullptr : &masks, objective, true);
    } catch (const NumericalError& e) {
      std::string msg = std::string(e.what()) + "; batch ids:";
      for (const auto& id : ids) msg += " " + id;
      throw NumericalError(msg);
    }
    if (!std::isfinite(r.loss.total)) {
      std::string msg = "non-finite total loss; batch ids:";
      for (const auto& id : ids) msg += " " + id;
      msg += "; parts " + to_json(r.loss.raw).dump();
      throw NumericalError(msg);
    }
    auto net = state.model.network_refs();
    auto bank = state.model.bank_refs();
    const double grad_norm = clip_global_norm(net, bank, cfg.grad_clip);
    state.adam.step(net, bank);
    ++state.step;

    double batch_abs = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double e = r.predictions[i] - labels[i];
      batch_abs += std::abs(e);
      abs_err += std::abs(e);
      sq_err += e * e;
    }
    seen += labels.size();
    ++batches;
    em.loss.mse += r.loss.raw.mse;
    em.loss.cluster += r.loss.raw.cluster;
    em.loss.psd += r.loss.raw.psd;
    em.loss.pas += r.loss.raw.pas;
    em.loss.occurrence += r.loss.raw.occurrence;
    em.total += r.loss.total;
    if (log) {
      nlohmann::json lr;
      for (const auto& [g, v] : state.adam.group_lr) lr[g] = state.adam.lr_for(g);
      log({{"type", "step"}, {"epoch", em.epoch}, {"step", state.step}, {"lr", lr}, {"loss", to_json(r.loss.raw)},
           {"weighted", to_json(r.loss.weighted)}, {"total", r.loss.total}, {"grad_norm", grad_norm},
           {"mae", batch_abs / static_cast<double>(labels.size())}});
    }
  }
  state.model.zero_grad();
  const double nb = static_cast<double>(batches);
  em.loss = {em.loss.mse / nb, em.loss.cluster / nb, em.loss.psd / nb, em.loss.pas / nb, em.loss.occurrence / nb};
  em.total /= nb;
  em.train_mae = abs_err / static_cast<double>(seen);
  em.train_mse = sq_err / static_cast<double>(seen);
  return em;
}

struct Predictions {
  std::vector<std::string> ids;
  std::vector<double> y;
  std::vector<double> y_hat;
  Matrix<double> betas;                 // n x m
  std::vector<Matrix<double>> pooled;   // per sample, m x D (kept when requested)
};

/// Deterministic-start inference over a split (no augmentation).
inline Predictions predict_split(const ProtoEFNet<float>& model, const DatasetSplit& split, const TrainConfig& cfg,
                                 bool keep_pooled = false) {
  SamplingPolicy policy = default_policy_for("val", cfg.clip_length, cfg.period);
  policy.channels = cfg.in_channels;
  Predictions p;
  p.betas = Matrix<double>(static_cast<int>(split.size()), model.bank.size());
  Rng unused(0);
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto& rec = split.records[i];
    const VideoClip clip = sample_clip(rec, policy, unused);
    const auto f = model.infer(clip.frames);
    p.ids.push_back(rec.id);
    p.y.push_back(rec.label);
    p.y_hat.push_back(f.head.prediction);
    std::copy(f.head.beta.begin(), f.head.beta.end(), p.betas.row(static_cast<int>(i)).begin());
    if (keep_pooled) p.pooled.push_back(f.pooled);
  }
  return p;
}

inline EvalReport evaluate(const ProtoEFNet<float>& model, const DatasetSplit& split, const TrainConfig& cfg) {
  if (split.empty()) throw ConfigError("cannot evaluate an empty split");
  const auto p = predict_split(model, split, cfg);
  return make_eval_report(split.name, p.ids, p.y, p.y_hat, p.betas);
}

/// Replaces every prototype with its best in-window training row (unique
/// training clips, deterministic start, no augmentation).
inline void project_model(ProtoEFNet<float>& model, const DatasetSplit& train, const TrainConfig& cfg) {
  SamplingPolicy policy = default_policy_for("val", cfg.clip_length, cfg.period);
  policy.channels = cfg.in_channels;
  ProjectionSearch search(model.bank, cfg.delta_l);
  std::set<std::string> done;
  Rng unused(0);
  for (const auto& rec : train.records) {
    if (!done.insert(rec.id).second) continue;
    const VideoClip clip = sample_clip(rec, policy, unused);
    const auto f = model.infer(clip.frames);
    search.offer(f.pooled, rec.label, rec.id, clip.start_frame, &f.net.maps);
  }
  model.bank = search.apply();
  model.zero_grad();
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const EpochMetrics& e) {
  nlohmann::json j{{"epoch", e.epoch}, {"loss", to_json(e.loss)}, {"total", e.total}, {"train_mae", e.train_mae},
                   {"train_mse", e.train_mse}};
  if (e.val) j["val"] = to_json(*e.val);
  return j;
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.split = j.at("split").get<std::string>();
  r.n_samples = j.at("n_samples").get<std::size_t>();
  r.regression.r2_defined = j.at("r2_defined").get<bool>();
  r.regression.r2 = r.regression.r2_defined ? j.at("r2").get<double>() : std::numeric_limits<double>::quiet_NaN();
  r.regression.mae = j.at("mae").get<double>();
  r.regression.rmse = j.at("rmse").get<double>();
  r.f1_below_40 = j.at("f1_below_40").get<double>();
  r.sparsity = j.at("sparsity").get<double>();
  r.diversity = j.at("diversity").get<double>();
  for (const auto& s : j.at("per_sample"))
    r.per_sample.push_back({s.at("id").get<std::string>(), s.at("y").get<double>(), s.at("y_hat").get<double>(),
                            s.at("top_prototypes").get<std::vector<int>>(), s.at("top_betas").get<std::vector<double>>()});
  return r;
}

inline EpochMetrics epoch_metrics_from_json(const nlohmann::json& j) {
  EpochMetrics e;
  e.epoch = j.at("epoch").get<int>();
  e.loss = loss_parts_from_json(j.at("loss"));
  e.total = j.at("total").get<double>();
  e.train_mae = j.at("train_mae").get<double>();
  e.train_mse = j.at("train_mse").get<double>();
  if (j.contains("val")) e.val = eval_report_from_json(j.at("val"));
  return e;
}

inline void save_checkpoint(const TrainState& s, const std::filesystem::path& path) {
  TensorArchive a;
  auto& model = const_cast<ProtoEFNet<float>&>(s.model);
  for (auto* p : model.extractor.parameters()) a.add<float>(p->name, p->shape, p->value);
  const auto& bank = s.model.bank;
  a.add<double>(kPrototypeTensor, {bank.size(), bank.dim()}, bank.vectors.data);
  a.add<double>("prototypes.labels", {bank.size()}, bank.labels);
  a.add<double>(kImportanceTensor, {bank.size()}, bank.importance);
  for (const auto& [name, mom] : s.adam.state_f32) {
    a.add<float>("adam.m/" + name, {static_cast<int>(mom.m.size())}, mom.m);
    a.add<float>("adam.v/" + name, {static_cast<int>(mom.v.size())}, mom.v);
  }
  for (const auto& [name, mom] : s.adam.state_f64) {
    a.add<double>("adam.m/" + name, {static_cast<int>(mom.m.size())}, mom.m);
    a.add<double>("adam.v/" + name, {static_cast<int>(mom.v.size())}, mom.v);
  }
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : bank.records) {
    records.push_back({{"prototype", r.prototype}, {"projected", r.projected}, {"clip_id", r.clip_id},
                       {"start_frame", r.start_frame}, {"original_label", r.original_label},
                       {"similarity", r.similarity}});
    if (!r.source_map.empty())
      a.add<float>("projection.source_map." + std::to_string(r.prototype),
                   {r.source_map.channels, r.source_map.frames, r.source_map.height, r.source_map.width},
                   r.source_map.data);
  }
  nlohmann::json history = nlohmann::json::array();
  for (const auto& e : s.history) history.push_back(to_json(e));
  nlohmann::json adam_f32 = nlohmann::json::array(), adam_f64 = nlohmann::json::array();
  for (const auto& [name, mom] : s.adam.state_f32) adam_f32.push_back(name);
  for (const auto& [name, mom] : s.adam.state_f64) adam_f64.push_back(name);
  a.meta = {{"config", to_json(s.config)},
            {"epoch", s.epoch},
            {"step", s.step},
            {"adam_step", s.adam.step_count},
            {"adam_f32", adam_f32},
            {"adam_f64", adam_f64},
            {"rng_state", s.rng.state()},
            {"best_val_mae", std::isfinite(s.best_val_mae) ? nlohmann::json(s.best_val_mae) : nlohmann::json(nullptr)},
            {"projected", bank.projected},
            {"projection_records", records},
            {"history", history}};
  a.save(path);
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  const auto a = TensorArchive::load(path);
  const TrainConfig cfg = config_from_json(a.meta.at("config"));
  TrainState s(cfg);
  for (auto* p : s.model.extractor.parameters()) {
    const auto& t = a.tensor(p->name);
    if (t.shape != p->shape) throw ConfigError("checkpoint tensor " + p->name + " has a mismatched shape");
    p->value = a.get<float>(p->name);
  }
  auto& bank = s.model.bank;
  bank.vectors = Matrix<double>(cfg.m, cfg.feature_dim);
  bank.vectors.data = a.get<double>(kPrototypeTensor);
  bank.labels = a.get<double>("prototypes.labels");
  bank.importance = a.get<double>(kImportanceTensor);
  if (bank.vectors.data.size() != static_cast<std::size_t>(cfg.m) * cfg.feature_dim ||
      bank.labels.size() != static_cast<std::size_t>(cfg.m))
    throw ConfigError("checkpoint prototype bank does not match its config");
  bank.projected = a.meta.at("projected").get<bool>();
  for (const auto& r : a.meta.at("projection_records")) {
    ProjectionRecord rec;
    rec.prototype = r.at("prototype").get<int>();
    rec.projected = r.at("projected").get<bool>();
    rec.clip_id = r.at("clip_id").get<std::string>();
    rec.start_frame = r.at("start_frame").get<int>();
    rec.original_label = r.at("original_label").get<double>();
    rec.similarity = r.at("similarity").get<double>();
    const auto map_name = "projection.source_map." + std::to_string(rec.prototype);
    if (a.contains(map_name)) {
      const auto& t = a.tensor(map_name);
      rec.source_map = Volume<float>(t.shape.at(0), t.shape.at(1), t.shape.at(2), t.shape.at(3));
      rec.source_map.data = a.get<float>(map_name);
    }
    bank.records.push_back(std::move(rec));
  }
  for (const auto& name : a.meta.at("adam_f32")) {
    const auto n = name.get<std::string>();
    s.adam.state_f32[n] = {a.get<float>("adam.m/" + n), a.get<float>("adam.v/" + n)};
  }
  for (const auto& name : a.meta.at("adam_f64")) {
    const auto n = name.get<std::string>();
    s.adam.state_f64[n] = {a.get<double>("adam.m/" + n), a.get<double>("adam.v/" + n)};
  }
  s.adam.step_count = a.meta.at("adam_step").get<long>();
  s.epoch = a.meta.at("epoch").get<int>();
  s.step = a.meta.at("step").get<long>();
  s.rng.set_state(a.meta.at("rng_state").get<std::string>());
  const auto& best = a.meta.at("best_val_mae");
  s.best_val_mae = best.is_null() ? std::numeric_limits<double>::infinity() : best.get<double>();
  for (const auto& e : a.meta.at("history")) s.history.push_back(epoch_metrics_from_json(e));
  s.model.zero_grad();
  return s;
}

// ---------------------------------------------------------------------------
// Full schedule
// ---------------------------------------------------------------------------

struct RunOptions {
  std::filesystem::path out_dir;     // empty: no checkpoints or log files
  bool save_every_epoch = true;      // epoch_XXX.ckpt
  int stop_after_epoch = 0;          // > 0: return early after this epoch (for resume tests)
  LogSink log;                       // extra sink (in addition to metrics.jsonl)
  std::ostream* progress = nullptr;  // human-readable per-epoch lines
};

inline std::string epoch_checkpoint_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%03d.ckpt", epoch);
  return buf;
}

/// Runs the remaining epochs of `state`: train, validate, and at the last
/// epoch project the prototypes before the final validation. Saves best,
/// final and per-epoch checkpoints under out_dir.
inline void run_training(TrainState& state, const DatasetSplit& train, const DatasetSplit& val,
                         const RunOptions& opt = {}) {
  auto& cfg = state.config;
  if (train.empty()) throw ConfigError("training split is empty");
  if (cfg.weights.occurrence != 0.0 && !split_has_masks(train)) {
    if (opt.progress) *opt.progress << "warning: training data has no region masks; occurrence weight set to 0\n";
    cfg.weights.occurrence = 0.0;
  }
  std::ofstream metrics_file;
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    metrics_file.open(opt.out_dir / "metrics.jsonl", state.epoch == 0 ? std::ios::trunc : std::ios::app);
  }
  const LogSink sink = [&](const nlohmann::json& j) {
    if (metrics_file.is_open()) metrics_file << j.dump() << '\n';
    if (opt.log) opt.log(j);
  };

  while (state.epoch < cfg.epochs) {
    EpochMetrics em = train_epoch(state, train, sink);
    const bool last = em.epoch == cfg.epochs;
    if (last) project_model(state.model, train, cfg);
    if (!val.empty()) em.val = evaluate(state.model, val, cfg);
    state.epoch = em.epoch;
    state.history.push_back(em);

    nlohmann::json line = to_json(em);
    line["type"] = "epoch";
    if (line.contains("val")) line["val"].erase("per_sample");
    line["projected"] = state.model.bank.projected;
    sink(line);
    if (opt.progress) {
      char buf[256];
      std::snprintf(buf, sizeof(buf), "epoch %d/%d  loss %.4f  train_mae %.3f", em.epoch, cfg.epochs, em.total,
                    em.train_mae);
      *opt.progress << buf;
      if (em.val) {
        std::snprintf(buf, sizeof(buf), "  val_mae %.3f  val_rmse %.3f", em.val->regression.mae, em.val->regression.rmse);
        *opt.progress << buf;
      }
      *opt.progress << (last ? "  (projected)" : "") << std::endl;
    }
    if (!opt.out_dir.empty()) {
      if (em.val && em.val->regression.mae < state.best_val_mae) {
        state.best_val_mae = em.val->regression.mae;
        save_checkpoint(state, opt.out_dir / "best.ckpt");
      }
      if (opt.save_every_epoch) save_checkpoint(state, opt.out_dir / epoch_checkpoint_name(em.epoch));
      if (last) save_checkpoint(state, opt.out_dir / "final.ckpt");
    } else if (em.val) {
      state.best_val_mae = std::min(state.best_val_mae, em.val->regression.mae);
    }
    if (opt.stop_after_epoch > 0 && state.epoch >= opt.stop_after_epoch) break;
  }
}

}  // namespace protoef
