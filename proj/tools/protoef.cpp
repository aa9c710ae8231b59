// SPDX-License-Identifier: Apache-2.0
// Command-line driver: synth, train, eval, project, explain.
// Exit codes: 0 ok, 1 unexpected error, 2 configuration/input error, 3 numerical failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "protoef/echonet.hpp"
#include "protoef/explain.hpp"
#include "protoef/protoef.hpp"

namespace fs = std::filesystem;
using namespace protoef;

namespace {

struct Splits {
  DatasetSplit train, val, test;
};

// A data directory is either the EchoNet layout (FileList.csv) or train/,
// val/, test/ split directories written by `protoef synth`.
Splits load_data(const fs::path& dir, const TrainConfig& cfg) {
  if (dir.empty()) throw ConfigError("no data directory given (--data or data_dir)");
  if (!fs::is_directory(dir)) throw ConfigError("data directory does not exist: " + dir.string());
  Splits s;
  if (fs::exists(dir / "FileList.csv")) {
    auto ing = ingest_echonet_layout(dir, cfg.height, cfg.width);
    for (const auto& line : ing.skip_log) std::cerr << "skipped " << line << '\n';
    s.train = std::move(ing.train);
    s.val = std::move(ing.val);
    s.test = std::move(ing.test);
    return s;
  }
  for (auto [name, target] : {std::pair{"train", &s.train}, {"val", &s.val}, {"test", &s.test}}) {
    if (fs::exists(dir / name / "manifest.csv")) *target = read_split(dir / name, name, true);
    else target->name = name;
  }
  return s;
}

const DatasetSplit& pick(const Splits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw ConfigError("unknown split '" + name + "' (train, val or test)");
}

TrainConfig apply_overrides(TrainConfig cfg, const std::vector<std::string>& sets) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
    const auto key = kv.substr(0, eq), value = kv.substr(eq + 1);
    auto parsed = nlohmann::json::parse(value, nullptr, false);
    j[key] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
  }
  return config_from_json(j, cfg);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string abs_path(const fs::path& p) { return fs::absolute(p).lexically_normal().string(); }

int cmd_synth(const fs::path& out, int n_train, int n_val, int n_test, std::uint64_t seed, int size, int frames,
              bool no_masks) {
  SynthRanges r;
  r.height = size;
  r.width = size;
  r.num_frames = frames;
  const double scale = static_cast<double>(size) * size / (64.0 * 64.0);
  r.area_max_lo *= scale;
  r.area_max_hi *= scale;
  const std::pair<const char*, int> splits[] = {{"train", n_train}, {"val", n_val}, {"test", n_test}};
  std::uint64_t offset = 0;
  for (const auto& [name, n] : splits) {
    if (n > 0) {
      auto split = generate_synthetic_dataset(r, n, seed + offset, name);
      if (no_masks)
        for (auto& rec : split.records) {
          auto v = std::make_shared<Video>(*rec.video);
          v->mask.clear();
          rec.video = v;
        }
      write_split(out / name, split);
      std::cout << name << ": " << n << " videos -> " << abs_path(out / name) << '\n';
    }
    offset += 1000003;
  }
  return 0;
}

int cmd_train(const fs::path& config_path, const std::vector<std::string>& sets, const fs::path& data_arg,
              const fs::path& out_arg, const fs::path& resume) {
  TrainState state = [&] {
    if (!resume.empty()) return load_checkpoint(resume);
    TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
    cfg = apply_overrides(cfg, sets);
    if (!data_arg.empty()) cfg.data_dir = data_arg.string();
    if (!out_arg.empty()) cfg.out_dir = out_arg.string();
    return init_model(cfg);
  }();
  if (!resume.empty() && !sets.empty()) throw ConfigError("--set cannot be combined with --resume");
  auto& cfg = state.config;
  if (!resume.empty()) {
    if (!data_arg.empty()) cfg.data_dir = data_arg.string();
    if (!out_arg.empty()) cfg.out_dir = out_arg.string();
  }
  if (cfg.out_dir.empty()) throw ConfigError("no output directory given (--out or out_dir)");
  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  const auto data = load_data(cfg.data_dir, cfg);
  write_json(out / "effective_config.json", to_json(cfg));
  std::cout << "config: " << abs_path(out / "effective_config.json") << '\n';

  RunOptions opt;
  opt.out_dir = out;
  opt.progress = &std::cout;
  run_training(state, data.train, data.val, opt);
  write_json(out / "effective_config.json", to_json(cfg));
  for (const char* f : {"final.ckpt", "best.ckpt", "metrics.jsonl"})
    if (fs::exists(out / f)) std::cout << f << ": " << abs_path(out / f) << '\n';
  return 0;
}

int cmd_eval(const fs::path& ckpt, const fs::path& data_arg, const std::string& split_name, const fs::path& out,
             const fs::path& pca_plot, int top_n) {
  const auto state = load_checkpoint(ckpt);
  const auto& cfg = state.config;
  const auto data = load_data(data_arg.empty() ? fs::path(cfg.data_dir) : data_arg, cfg);
  const auto& split = pick(data, split_name);
  if (split.empty()) throw ConfigError("split '" + split_name + "' is empty");
  const auto p = predict_split(state.model, split, cfg, !pca_plot.empty());
  const auto report = make_eval_report(split.name, p.ids, p.y, p.y_hat, p.betas);
  std::cout << to_text(report);
  if (!out.empty()) {
    fs::create_directories(out);
    write_json(out / ("eval_" + split_name + ".json"), to_json(report));
    std::cout << "report: " << abs_path(out / ("eval_" + split_name + ".json")) << '\n';
  }
  if (!pca_plot.empty()) {
    const int m = state.model.bank.size(), d = state.model.bank.dim();
    Matrix<double> rows(static_cast<int>(p.pooled.size()) * m, d);
    std::vector<double> labels;
    for (std::size_t i = 0; i < p.pooled.size(); ++i)
      for (int k = 0; k < m; ++k) {
        std::copy(p.pooled[i].row(k).begin(), p.pooled[i].row(k).end(), rows.row(static_cast<int>(i) * m + k).begin());
        labels.push_back(p.y[i]);
      }
    const auto plot = prototype_pca(state.model.bank, rows, labels, top_n);
    if (pca_plot.has_parent_path()) fs::create_directories(pca_plot.parent_path());
    render_pca_plot(plot, pca_plot);
    std::cout << "pca plot: " << abs_path(pca_plot) << '\n';
  }
  return 0;
}

int cmd_project(const fs::path& ckpt, const fs::path& data_arg, const fs::path& out) {
  auto state = load_checkpoint(ckpt);
  const auto data = load_data(data_arg.empty() ? fs::path(state.config.data_dir) : data_arg, state.config);
  if (data.train.empty()) throw ConfigError("projection needs a non-empty training split");
  project_model(state.model, data.train, state.config);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_checkpoint(state, out);
  int done = 0;
  for (const auto& r : state.model.bank.records) done += r.projected ? 1 : 0;
  std::cout << "projected " << done << "/" << state.model.bank.size() << " prototypes\n";
  std::cout << "checkpoint: " << abs_path(out) << '\n';
  return 0;
}

int cmd_explain(const fs::path& ckpt, const fs::path& data_arg, const std::string& split_name, const std::string& clip_id,
                const fs::path& out, double min_beta) {
  const auto state = load_checkpoint(ckpt);
  const auto& cfg = state.config;
  const auto data = load_data(data_arg.empty() ? fs::path(cfg.data_dir) : data_arg, cfg);
  const auto& split = pick(data, split_name);
  const auto it = std::find_if(split.records.begin(), split.records.end(), [&](const auto& r) { return r.id == clip_id; });
  if (it == split.records.end()) throw ConfigError("clip '" + clip_id + "' not found in split '" + split_name + "'");
  SamplingPolicy policy = default_policy_for("test", cfg.clip_length, cfg.period);
  policy.channels = cfg.in_channels;
  const auto clip = sample_clip_at(*it->load(), policy, 0, it->id, it->label);
  ExplainOptions opt;
  opt.min_beta = min_beta;
  const auto ex = build_explanation(state.model, clip, out, opt, &data.train, &policy);
  std::cout << to_text(ex.sheet, min_beta);
  for (const auto& w : ex.warnings) std::cerr << "warning: " << w << '\n';
  for (const auto& c : ex.contributors) {
    std::cout << "prototype " << c.score.prototype << ": " << abs_path(c.overlay_video) << '\n';
    std::cout << "prototype " << c.score.prototype << ": " << abs_path(c.still_grid) << '\n';
  }
  std::cout << "record: " << abs_path(ex.record_path) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-based video regression: synthesize data, train, evaluate, project, explain"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Write a synthetic pulsating-ellipse dataset");
  fs::path synth_out;
  int n_train = 200, n_val = 50, n_test = 100, size = 64, frames = 96;
  std::uint64_t seed = 0;
  bool no_masks = false;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--train", n_train, "Training videos")->check(CLI::NonNegativeNumber);
  synth->add_option("--val", n_val, "Validation videos")->check(CLI::NonNegativeNumber);
  synth->add_option("--test", n_test, "Test videos")->check(CLI::NonNegativeNumber);
  synth->add_option("--seed", seed, "Generator seed");
  synth->add_option("--size", size, "Frame height and width")->check(CLI::Range(16, 512));
  synth->add_option("--frames", frames, "Frames per video")->check(CLI::PositiveNumber);
  synth->add_flag("--no-masks", no_masks, "Omit region masks");

  auto* train = app.add_subcommand("train", "Train a model; projects prototypes after the last epoch");
  fs::path config, data, out, resume;
  std::vector<std::string> sets;
  train->add_option("--config", config, "JSON config file");
  train->add_option("--set", sets, "Override a config key (key=value, value parsed as JSON when possible)");
  train->add_option("--data", data, "Data directory");
  train->add_option("--out", out, "Output directory");
  train->add_option("--resume", resume, "Resume from a checkpoint");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  fs::path ckpt, pca_plot;
  std::string split = "test";
  int top_n = 100;
  eval->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  eval->add_option("--data", data, "Data directory (defaults to the checkpoint's data_dir)");
  eval->add_option("--split", split, "train, val or test");
  eval->add_option("--out", out, "Directory for the JSON report");
  eval->add_option("--pca-plot", pca_plot, "Write a PNG of the 2-D prototype projection");
  eval->add_option("--top-n", top_n, "Nearest rows per prototype in the plot")->check(CLI::PositiveNumber);

  auto* project = app.add_subcommand("project", "Project the prototypes of a checkpoint onto training clips");
  project->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  project->add_option("--data", data, "Data directory (defaults to the checkpoint's data_dir)");
  project->add_option("--out", out, "Output checkpoint")->required();

  auto* explain = app.add_subcommand("explain", "Explain the prediction for one clip");
  std::string clip_id;
  double min_beta = kContributionThreshold;
  explain->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  explain->add_option("--data", data, "Data directory (defaults to the checkpoint's data_dir)");
  explain->add_option("--split", split, "train, val or test");
  explain->add_option("--clip", clip_id, "Clip id")->required();
  explain->add_option("--out", out, "Output directory")->required();
  explain->add_option("--min-beta", min_beta, "Contribution threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(synth_out, n_train, n_val, n_test, seed, size, frames, no_masks);
    if (*train) return cmd_train(config, sets, data, out, resume);
    if (*eval) return cmd_eval(ckpt, data, split, out, pca_plot, top_n);
    if (*project) return cmd_project(ckpt, data, out);
    if (*explain) return cmd_explain(ckpt, data, split, clip_id, out, min_beta);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
