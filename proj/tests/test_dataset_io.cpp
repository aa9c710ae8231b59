// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "protoef/dataset_io.hpp"

using namespace protoef;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("protoef_io_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(DatasetIo, VideoRoundTrip) {
  SynthSpec s;
  s.seed = 4;
  const auto split = generate_synthetic(s, 1);
  const auto dir = scratch("video");
  fs::create_directories(dir);
  write_video(dir / "a.pvz", *split.records[0].video);
  const auto back = read_video(dir / "a.pvz");
  EXPECT_EQ(back.frames, split.records[0].video->frames);
  EXPECT_EQ(back.pixels, split.records[0].video->pixels);
  EXPECT_EQ(back.mask, split.records[0].video->mask);
}

TEST(DatasetIo, SplitRoundTripEagerAndLazy) {
  SynthRanges r;
  r.num_frames = 8;
  const auto split = generate_synthetic_dataset(r, 5, 3, "val");
  const auto dir = scratch("split");
  write_split(dir, split);
  for (bool lazy : {false, true}) {
    const auto back = read_split(dir, "val", lazy);
    ASSERT_EQ(back.size(), 5u);
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_EQ(back.records[i].id, split.records[i].id);
      EXPECT_EQ(back.records[i].label, split.records[i].label);  // shortest round-trip formatting
      EXPECT_EQ(back.records[i].load()->pixels, split.records[i].video->pixels);
    }
    EXPECT_EQ(back.policy.start_rule, StartRule::kDeterministicZero);
  }
}

TEST(DatasetIo, CorruptFilesAreRejected) {
  const auto dir = scratch("corrupt");
  fs::create_directories(dir);
  std::ofstream(dir / "bad.pvz") << "not a video";
  EXPECT_THROW(read_video(dir / "bad.pvz"), ConfigError);
  EXPECT_THROW(read_split(dir, "train"), ConfigError);
}
