// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace protoef {

/// Dense channel-major 4D array laid out as [channel][frame][row][col].
///
/// This is the working layout for every spatio-temporal tensor in the
/// library: clips fed to the backbone, feature volumes and occurrence maps
/// (one "channel" per prototype).
template <typename T>
struct Volume {
  int channels = 0;
  int frames = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Volume() = default;
  Volume(int c, int t, int h, int w, T fill = T(0))
      : channels(c), frames(t), height(h), width(w),
        data(static_cast<std::size_t>(c) * t * h * w, fill) {}

  std::size_t cells() const { return static_cast<std::size_t>(frames) * height * width; }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  T& at(int c, int t, int y, int x) {
    return data[((static_cast<std::size_t>(c) * frames + t) * height + y) * width + x];
  }
  const T& at(int c, int t, int y, int x) const {
    return data[((static_cast<std::size_t>(c) * frames + t) * height + y) * width + x];
  }

  std::span<T> channel(int c) { return {data.data() + c * cells(), cells()}; }
  std::span<const T> channel(int c) const { return {data.data() + c * cells(), cells()}; }

  bool same_shape(const Volume& o) const {
    return channels == o.channels && frames == o.frames && height == o.height && width == o.width;
  }

  std::string shape_string() const {
    return std::to_string(channels) + "x" + std::to_string(frames) + "x" + std::to_string(height) +
           "x" + std::to_string(width);
  }

  template <typename U>
  Volume<U> cast() const {
    Volume<U> out;
    out.channels = channels;
    out.frames = frames;
    out.height = height;
    out.width = width;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

/// Row-major dense matrix with value semantics; used for m x D prototype
/// banks, n x m similarity tables and pooled features.
template <typename T>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(int r, int c, T fill = T(0))
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  const T& operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  std::span<T> row(int r) { return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }
  std::span<const T> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace protoef
