// SPDX-License-Identifier: Apache-2.0
// Small configurations and datasets shared by the test binaries.
#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "protoef/trainer.hpp"

namespace protoef::fixtures {

inline TrainConfig small_config() {
  TrainConfig c;
  c.variant = "tiny";
  c.tiny_channels = {4, 8, 8};
  c.feature_dim = 8;
  c.m = 4;
  c.clip_length = 16;
  c.height = 32;
  c.width = 32;
  c.epochs = 2;
  c.batch_size = 4;
  c.seed = 11;
  return c;
}

inline SynthRanges small_ranges() {
  SynthRanges r;
  r.height = 32;
  r.width = 32;
  r.num_frames = 24;
  r.period_min = 8;
  r.period_max = 12;
  r.area_max_lo = 120.0;
  r.area_max_hi = 200.0;
  return r;
}

inline DatasetSplit small_split(int n, std::uint64_t seed, const std::string& name) {
  return generate_synthetic_dataset(small_ranges(), n, seed, name);
}

inline DatasetSplit without_masks(const DatasetSplit& s) {
  DatasetSplit out = s;
  for (auto& rec : out.records) {
    auto v = std::make_shared<Video>(*rec.video);
    v->mask.clear();
    rec.video = v;
  }
  return out;
}

inline std::filesystem::path fresh_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("protoef_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace protoef::fixtures
