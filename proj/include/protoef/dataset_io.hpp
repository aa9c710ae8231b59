// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <zlib.h>

#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "protoef/data.hpp"

namespace protoef {

// On-disk video file (".pvz"):
//   "PEFV" | u32 version | i32 frames, height, width, channels | u8 has_mask |
//   u64 raw_bytes | u64 compressed_bytes | zlib(pixels ++ mask)
// All integers little-endian. A split directory holds the video files and a
// manifest.csv with header "id,label,path" (paths relative to the directory).

inline constexpr std::uint32_t kVideoFileVersion = 1;

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ConfigError("truncated video file");
  return v;
}

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

inline void write_video(const std::filesystem::path& path, const Video& v) {
  std::vector<std::uint8_t> raw(v.pixels);
  raw.insert(raw.end(), v.mask.begin(), v.mask.end());
  uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> comp(comp_size);
  if (compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("zlib compression failed for " + path.string());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write("PEFV", 4);
  detail::put<std::uint32_t>(os, kVideoFileVersion);
  detail::put<std::int32_t>(os, v.frames);
  detail::put<std::int32_t>(os, v.height);
  detail::put<std::int32_t>(os, v.width);
  detail::put<std::int32_t>(os, v.channels);
  detail::put<std::uint8_t>(os, v.has_mask() ? 1 : 0);
  detail::put<std::uint64_t>(os, raw.size());
  detail::put<std::uint64_t>(os, comp_size);
  os.write(reinterpret_cast<const char*>(comp.data()), static_cast<std::streamsize>(comp_size));
}

inline Video read_video(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open video file " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PEFV", 4) != 0) throw ConfigError(path.string() + " is not a PEFV video file");
  if (detail::get<std::uint32_t>(is) != kVideoFileVersion) throw ConfigError("unsupported video file version");
  Video v;
  v.frames = detail::get<std::int32_t>(is);
  v.height = detail::get<std::int32_t>(is);
  v.width = detail::get<std::int32_t>(is);
  v.channels = detail::get<std::int32_t>(is);
  const bool has_mask = detail::get<std::uint8_t>(is) != 0;
  const auto raw_size = detail::get<std::uint64_t>(is);
  const auto comp_size = detail::get<std::uint64_t>(is);
  std::vector<std::uint8_t> comp(comp_size);
  is.read(reinterpret_cast<char*>(comp.data()), static_cast<std::streamsize>(comp_size));
  if (!is) throw ConfigError("truncated video file " + path.string());
  std::vector<std::uint8_t> raw(raw_size);
  uLongf out_size = static_cast<uLongf>(raw_size);
  if (uncompress(raw.data(), &out_size, comp.data(), static_cast<uLong>(comp_size)) != Z_OK || out_size != raw_size)
    throw ConfigError("corrupt video payload in " + path.string());
  const std::size_t npix = static_cast<std::size_t>(v.frames) * v.frame_pixels();
  const std::size_t nmask = has_mask ? static_cast<std::size_t>(v.frames) * v.frame_cells() : 0;
  if (raw.size() != npix + nmask) throw ConfigError("video payload size mismatch in " + path.string());
  v.pixels.assign(raw.begin(), raw.begin() + static_cast<std::ptrdiff_t>(npix));
  v.mask.assign(raw.begin() + static_cast<std::ptrdiff_t>(npix), raw.end());
  return v;
}

/// Writes `split` to `dir` (created if absent): one .pvz per record plus manifest.csv.
inline void write_split(const std::filesystem::path& dir, const DatasetSplit& split) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw std::runtime_error("cannot write manifest in " + dir.string());
  manifest << "id,label,path\n";
  for (const auto& rec : split.records) {
    const std::string file = rec.id + ".pvz";
    write_video(dir / file, *rec.load());
    manifest << rec.id << ',' << detail::format_double(rec.label) << ',' << file << '\n';
  }
}

/// Reads a split directory written by write_split. With `lazy`, videos are
/// decoded on demand instead of up front.
inline DatasetSplit read_split(const std::filesystem::path& dir, const std::string& split_name, bool lazy = false) {
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw ConfigError("missing manifest.csv in " + dir.string());
  DatasetSplit split;
  split.name = split_name;
  split.policy = default_policy_for(split_name);
  std::string line;
  std::getline(manifest, line);
  if (line.rfind("id,label,path", 0) != 0) throw ConfigError("unexpected manifest header in " + dir.string());
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, label, path;
    std::getline(ss, id, ',');
    std::getline(ss, label, ',');
    std::getline(ss, path);
    VideoRecord rec;
    rec.id = id;
    const auto res = std::from_chars(label.data(), label.data() + label.size(), rec.label);
    if (res.ec != std::errc()) throw ConfigError("bad label '" + label + "' in " + (dir / "manifest.csv").string());
    rec.path = dir / path;
    if (lazy) {
      rec.loader = [](const std::filesystem::path& p) { return std::make_shared<const Video>(read_video(p)); };
    } else {
      rec.video = std::make_shared<const Video>(read_video(rec.path));
    }
    split.records.push_back(std::move(rec));
  }
  return split;
}

}  // namespace protoef
