// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "protoef/volume.hpp"

namespace protoef {

// Single-file tensor archive:
//   8-byte magic "PEFCKPT1" | u64 manifest length | manifest (JSON) | payload
// The manifest lists every tensor (name, dtype, shape, offset, nbytes) plus a
// free-form "meta" object. Payload is raw little-endian tensor data.

struct ArchiveTensor {
  std::string name;
  std::string dtype;  // f32 | f64 | u8
  std::vector<int> shape;
  std::vector<std::uint8_t> bytes;
};

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else if constexpr (std::is_same_v<T, double>) return "f64";
  else if constexpr (std::is_same_v<T, std::uint8_t>) return "u8";
  else static_assert(sizeof(T) == 0, "unsupported archive dtype");
}

class TensorArchive {
 public:
  nlohmann::json meta = nlohmann::json::object();

  template <typename T>
  void add(const std::string& name, std::vector<int> shape, std::span<const T> values) {
    ArchiveTensor t;
    t.name = name;
    t.dtype = dtype_name<T>();
    t.shape = std::move(shape);
    t.bytes.resize(values.size_bytes());
    if (!values.empty()) std::memcpy(t.bytes.data(), values.data(), values.size_bytes());
    tensors_.push_back(std::move(t));
  }

  bool contains(const std::string& name) const { return find(name) != nullptr; }

  const ArchiveTensor& tensor(const std::string& name) const {
    const auto* t = find(name);
    if (!t) throw ConfigError("archive has no tensor named '" + name + "'");
    return *t;
  }

  template <typename T>
  std::vector<T> get(const std::string& name) const {
    const auto& t = tensor(name);
    if (t.dtype != dtype_name<T>()) throw ConfigError("tensor '" + name + "' has dtype " + t.dtype);
    std::vector<T> out(t.bytes.size() / sizeof(T));
    if (!out.empty()) std::memcpy(out.data(), t.bytes.data(), t.bytes.size());
    return out;
  }

  const std::vector<ArchiveTensor>& tensors() const { return tensors_; }

  void save(const std::filesystem::path& path) const {
    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["meta"] = meta;
    nlohmann::json list = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : tensors_) {
      list.push_back({{"name", t.name}, {"dtype", t.dtype}, {"shape", t.shape}, {"offset", offset}, {"nbytes", t.bytes.size()}});
      offset += t.bytes.size();
    }
    manifest["tensors"] = list;
    const std::string text = manifest.dump(1);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream os(tmp, std::ios::binary);
      if (!os) throw std::runtime_error("cannot write " + tmp);
      os.write("PEFCKPT1", 8);
      const std::uint64_t len = text.size();
      os.write(reinterpret_cast<const char*>(&len), sizeof(len));
      os.write(text.data(), static_cast<std::streamsize>(text.size()));
      for (const auto& t : tensors_) os.write(reinterpret_cast<const char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
      if (!os) throw std::runtime_error("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
  }

  static TensorArchive load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open archive " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, "PEFCKPT1", 8) != 0) throw ConfigError(path.string() + " is not a checkpoint archive");
    std::uint64_t len = 0;
    is.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (!is) throw ConfigError("truncated archive manifest in " + path.string());
    const auto manifest = nlohmann::json::parse(text);
    TensorArchive a;
    a.meta = manifest.value("meta", nlohmann::json::object());
    for (const auto& e : manifest.at("tensors")) {
      ArchiveTensor t;
      t.name = e.at("name").get<std::string>();
      t.dtype = e.at("dtype").get<std::string>();
      t.shape = e.at("shape").get<std::vector<int>>();
      t.bytes.resize(e.at("nbytes").get<std::size_t>());
      is.read(reinterpret_cast<char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
      if (!is) throw ConfigError("truncated tensor '" + t.name + "' in " + path.string());
      a.tensors_.push_back(std::move(t));
    }
    return a;
  }

 private:
  const ArchiveTensor* find(const std::string& name) const {
    for (const auto& t : tensors_)
      if (t.name == name) return &t;
    return nullptr;
  }
  std::vector<ArchiveTensor> tensors_;
};

}  // namespace protoef
