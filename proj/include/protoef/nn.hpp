// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "protoef/random.hpp"
#include "protoef/volume.hpp"

namespace protoef::nn {

/// Trainable tensor with its gradient accumulator and optimizer group.
template <typename T>
struct Parameter {
  std::string name;
  std::string group;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;

  Parameter() = default;
  Parameter(std::string n, std::string g, std::vector<int> s, T fill = T(0)) : name(std::move(n)), group(std::move(g)), shape(std::move(s)) {
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    value.assign(count, fill);
    grad.assign(count, T(0));
  }
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

/// Saved activations for one layer invocation.
template <typename T>
struct TapeEntry {
  std::vector<Volume<T>> tensors;
  std::vector<T> scalars;
};

/// Per-sample stack of saved activations. Layers push during forward and pop
/// in reverse order during backward. A non-recording tape (inference) drops
/// everything.
template <typename T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  bool recording() const { return recording_; }
  void push(TapeEntry<T> e) {
    if (recording_) entries_.push_back(std::move(e));
  }
  TapeEntry<T> pop() {
    if (entries_.empty()) throw std::logic_error("tape underflow: backward without matching forward");
    TapeEntry<T> e = std::move(entries_.back());
    entries_.pop_back();
    return e;
  }
  bool empty() const { return entries_.empty(); }

 private:
  bool recording_;
  std::vector<TapeEntry<T>> entries_;
};

using Shape4 = std::array<int, 4>;  // channels, frames, height, width

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Volume<T> forward(const Volume<T>& x, Tape<T>& tape) const = 0;
  /// Accumulates parameter gradients; returns the input gradient when
  /// requested (an empty volume otherwise).
  virtual Volume<T> backward(const Volume<T>& grad, Tape<T>& tape, bool need_input_grad) = 0;
  virtual Shape4 output_shape(Shape4 in) const = 0;
  virtual void parameters(std::vector<Parameter<T>*>&) {}
};

template <typename T>
using LayerPtr = std::unique_ptr<Layer<T>>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------

struct Conv3dSpec {
  int in_channels = 0;
  int out_channels = 0;
  std::array<int, 3> kernel{3, 3, 3};   // t, h, w
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> padding{1, 1, 1};
  bool bias = true;
};

/// 3D convolution via im2col + GEMM. Weight shape [out][in][kt][kh][kw].
template <typename T>
class Conv3d final : public Layer<T> {
 public:
  Conv3d(const Conv3dSpec& spec, const std::string& name, const std::string& group)
      : spec_(spec),
        weight_(name + ".weight", group,
                {spec.out_channels, spec.in_channels, spec.kernel[0], spec.kernel[1], spec.kernel[2]}) {
    if (spec.bias) bias_ = Parameter<T>(name + ".bias", group, {spec.out_channels});
  }

  const Conv3dSpec& spec() const { return spec_; }
  Parameter<T>& weight() { return weight_; }

  Shape4 output_shape(Shape4 in) const override {
    return {spec_.out_channels, out_dim(in[1], 0), out_dim(in[2], 1), out_dim(in[3], 2)};
  }

  Volume<T> forward(const Volume<T>& x, Tape<T>& tape) const override {
    if (x.channels != spec_.in_channels)
      throw ConfigError("conv " + weight_.name + " expects " + std::to_string(spec_.in_channels) +
                        " input channels, got " + std::to_string(x.channels));
    const auto os = output_shape({x.channels, x.frames, x.height, x.width});
    Volume<T> y(os[0], os[1], os[2], os[3]);
    const Eigen::Index k = patch_rows(), n = static_cast<Eigen::Index>(y.cells());
    Eigen::Map<const RowMat<T>> w(weight_.value.data(), spec_.out_channels, k);
    Eigen::Map<RowMat<T>> out(y.data.data(), spec_.out_channels, n);
    if (pointwise()) {
      Eigen::Map<const RowMat<T>> cols(x.data.data(), k, n);
      out.noalias() = w * cols;
    } else {
      std::vector<T> buf;
      im2col(x, os, buf);
      Eigen::Map<const RowMat<T>> cols(buf.data(), k, n);
      out.noalias() = w * cols;
    }
    if (spec_.bias) {
      for (int c = 0; c < spec_.out_channels; ++c) out.row(c).array() += bias_.value[c];
    }
    if (tape.recording()) tape.push({{x}, {}});
    return y;
  }

  Volume<T> backward(const Volume<T>& grad, Tape<T>& tape, bool need_input_grad) override {
    auto entry = tape.pop();
    const Volume<T>& x = entry.tensors.at(0);
    const auto os = output_shape({x.channels, x.frames, x.height, x.width});
    const Eigen::Index k = patch_rows(), n = static_cast<Eigen::Index>(grad.cells());
    Eigen::Map<const RowMat<T>> dy(grad.data.data(), spec_.out_channels, n);
    Eigen::Map<RowMat<T>> dw(weight_.grad.data(), spec_.out_channels, k);
    Eigen::Map<const RowMat<T>> w(weight_.value.data(), spec_.out_channels, k);
    std::vector<T> buf;
    const T* cols_ptr = x.data.data();
    if (!pointwise()) {
      im2col(x, os, buf);
      cols_ptr = buf.data();
    }
    Eigen::Map<const RowMat<T>> cols(cols_ptr, k, n);
    dw.noalias() += dy * cols.transpose();
    if (spec_.bias) {
      // plain loop: Eigen's vectorized sum peels by address alignment, which
      // would make the rounding depend on where the buffer was allocated
      for (int c = 0; c < spec_.out_channels; ++c) {
        const T* row = grad.data.data() + static_cast<std::size_t>(c) * n;
        T acc = T(0);
        for (Eigen::Index i = 0; i < n; ++i) acc += row[i];
        bias_.grad[c] += acc;
      }
    }
    if (!need_input_grad) return {};
    Volume<T> dx(x.channels, x.frames, x.height, x.width);
    if (pointwise()) {
      Eigen::Map<RowMat<T>> dxm(dx.data.data(), k, n);
      dxm.noalias() = w.transpose() * dy;
    } else {
      RowMat<T> dcols = w.transpose() * dy;
      col2im(dcols.data(), os, dx);
    }
    return dx;
  }

  void parameters(std::vector<Parameter<T>*>& out) override {
    out.push_back(&weight_);
    if (spec_.bias) out.push_back(&bias_);
  }

 private:
  bool pointwise() const {
    return spec_.kernel == std::array<int, 3>{1, 1, 1} && spec_.stride == std::array<int, 3>{1, 1, 1} &&
           spec_.padding == std::array<int, 3>{0, 0, 0};
  }
  int out_dim(int in, int axis) const {
    return (in + 2 * spec_.padding[axis] - spec_.kernel[axis]) / spec_.stride[axis] + 1;
  }
  Eigen::Index patch_rows() const {
    return static_cast<Eigen::Index>(spec_.in_channels) * spec_.kernel[0] * spec_.kernel[1] * spec_.kernel[2];
  }

  void im2col(const Volume<T>& x, const Shape4& os, std::vector<T>& buf) const {
    const auto [kt, kh, kw] = spec_.kernel;
    const auto [st, sh, sw] = spec_.stride;
    const auto [pt, ph, pw] = spec_.padding;
    const std::size_t n = static_cast<std::size_t>(os[1]) * os[2] * os[3];
    buf.assign(static_cast<std::size_t>(patch_rows()) * n, T(0));
    std::size_t row = 0;
    for (int c = 0; c < x.channels; ++c)
      for (int a = 0; a < kt; ++a)
        for (int b = 0; b < kh; ++b)
          for (int d = 0; d < kw; ++d, ++row) {
            T* dst = buf.data() + row * n;
            for (int to = 0; to < os[1]; ++to) {
              const int ti = to * st - pt + a;
              if (ti < 0 || ti >= x.frames) continue;
              for (int ho = 0; ho < os[2]; ++ho) {
                const int hi = ho * sh - ph + b;
                if (hi < 0 || hi >= x.height) continue;
                const T* src = &x.at(c, ti, hi, 0);
                T* drow = dst + (static_cast<std::size_t>(to) * os[2] + ho) * os[3];
                for (int wo = 0; wo < os[3]; ++wo) {
                  const int wi = wo * sw - pw + d;
                  if (wi >= 0 && wi < x.width) drow[wo] = src[wi];
                }
              }
            }
          }
  }

  void col2im(const T* cols, const Shape4& os, Volume<T>& dx) const {
    const auto [kt, kh, kw] = spec_.kernel;
    const auto [st, sh, sw] = spec_.stride;
    const auto [pt, ph, pw] = spec_.padding;
    const std::size_t n = static_cast<std::size_t>(os[1]) * os[2] * os[3];
    std::size_t row = 0;
    for (int c = 0; c < dx.channels; ++c)
      for (int a = 0; a < kt; ++a)
        for (int b = 0; b < kh; ++b)
          for (int d = 0; d < kw; ++d, ++row) {
            const T* src = cols + row * n;
            for (int to = 0; to < os[1]; ++to) {
              const int ti = to * st - pt + a;
              if (ti < 0 || ti >= dx.frames) continue;
              for (int ho = 0; ho < os[2]; ++ho) {
                const int hi = ho * sh - ph + b;
                if (hi < 0 || hi >= dx.height) continue;
                T* dst = &dx.at(c, ti, hi, 0);
                const T* srow = src + (static_cast<std::size_t>(to) * os[2] + ho) * os[3];
                for (int wo = 0; wo < os[3]; ++wo) {
                  const int wi = wo * sw - pw + d;
                  if (wi >= 0 && wi < dx.width) dst[wi] += srow[wo];
                }
              }
            }
          }
  }

  Conv3dSpec spec_;
  Parameter<T> weight_;
  Parameter<T> bias_;
};

/// Group normalization with per-channel affine; statistics are per sample,
/// so training is independent of batch composition.
template <typename T>
class GroupNorm final : public Layer<T> {
 public:
  GroupNorm(int channels, int groups, const std::string& name, const std::string& group, double eps = 1e-5)
      : channels_(channels), groups_(groups), eps_(eps),
        gamma_(name + ".weight", group, {channels}, T(1)),
        beta_(name + ".bias", group, {channels}) {
    if (groups <= 0 || channels % groups != 0)
      throw ConfigError("GroupNorm " + name + ": channels must be divisible by groups");
  }

  Shape4 output_shape(Shape4 in) const override { return in; }

  Volume<T> forward(const Volume<T>& x, Tape<T>& tape) const override {
    Volume<T> y(x.channels, x.frames, x.height, x.width);
    Volume<T> xhat(x.channels, x.frames, x.height, x.width);
    std::vector<T> inv_std(groups_);
    const int per = channels_ / groups_;
    const std::size_t cells = x.cells();
    const double count = static_cast<double>(per) * static_cast<double>(cells);
    for (int g = 0; g < groups_; ++g) {
      const T* src = x.data.data() + static_cast<std::size_t>(g) * per * cells;
      double sum = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < per * cells; ++i) sum += src[i];
      const double mean = sum / count;
      for (std::size_t i = 0; i < per * cells; ++i) {
        const double d = src[i] - mean;
        sq += d * d;
      }
      const double istd = 1.0 / std::sqrt(sq / count + eps_);
      inv_std[g] = static_cast<T>(istd);
      for (int cc = 0; cc < per; ++cc) {
        const int c = g * per + cc;
        const T* xs = x.data.data() + static_cast<std::size_t>(c) * cells;
        T* hs = xhat.data.data() + static_cast<std::size_t>(c) * cells;
        T* ys = y.data.data() + static_cast<std::size_t>(c) * cells;
        for (std::size_t i = 0; i < cells; ++i) {
          hs[i] = static_cast<T>((xs[i] - mean) * istd);
          ys[i] = gamma_.value[c] * hs[i] + beta_.value[c];
        }
      }
    }
    if (tape.recording()) tape.push({{std::move(xhat)}, std::move(inv_std)});
    return y;
  }

  Volume<T> backward(const Volume<T>& grad, Tape<T>& tape, bool need_input_grad) override {
    auto entry = tape.pop();
    const Volume<T>& xhat = entry.tensors.at(0);
    const auto& inv_std = entry.scalars;
    const int per = channels_ / groups_;
    const std::size_t cells = grad.cells();
    for (int c = 0; c < channels_; ++c) {
      const T* g = grad.data.data() + static_cast<std::size_t>(c) * cells;
      const T* h = xhat.data.data() + static_cast<std::size_t>(c) * cells;
      double dg = 0.0, db = 0.0;
      for (std::size_t i = 0; i < cells; ++i) {
        dg += static_cast<double>(g[i]) * h[i];
        db += g[i];
      }
      gamma_.grad[c] += static_cast<T>(dg);
      beta_.grad[c] += static_cast<T>(db);
    }
    if (!need_input_grad) return {};
    Volume<T> dx(grad.channels, grad.frames, grad.height, grad.width);
    const double count = static_cast<double>(per) * static_cast<double>(cells);
    for (int grp = 0; grp < groups_; ++grp) {
      double mean_dh = 0.0, mean_dh_h = 0.0;
      for (int cc = 0; cc < per; ++cc) {
        const int c = grp * per + cc;
        const T* g = grad.data.data() + static_cast<std::size_t>(c) * cells;
        const T* h = xhat.data.data() + static_cast<std::size_t>(c) * cells;
        for (std::size_t i = 0; i < cells; ++i) {
          const double dh = static_cast<double>(g[i]) * gamma_.value[c];
          mean_dh += dh;
          mean_dh_h += dh * h[i];
        }
      }
      mean_dh /= count;
      mean_dh_h /= count;
      for (int cc = 0; cc < per; ++cc) {
        const int c = grp * per + cc;
        const T* g = grad.data.data() + static_cast<std::size_t>(c) * cells;
        const T* h = xhat.data.data() + static_cast<std::size_t>(c) * cells;
        T* d = dx.data.data() + static_cast<std::size_t>(c) * cells;
        for (std::size_t i = 0; i < cells; ++i) {
          const double dh = static_cast<double>(g[i]) * gamma_.value[c];
          d[i] = static_cast<T>(inv_std[grp] * (dh - mean_dh - h[i] * mean_dh_h));
        }
      }
    }
    return dx;
  }

  void parameters(std::vector<Parameter<T>*>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }

 private:
  int channels_;
  int groups_;
  double eps_;
  Parameter<T> gamma_;
  Parameter<T> beta_;
};

template <typename T>
class ReLU final : public Layer<T> {
 public:
  Shape4 output_shape(Shape4 in) const override { return in; }
  Volume<T> forward(const Volume<T>& x, Tape<T>& tape) const override {
    Volume<T> y = x;
    for (auto& v : y.data) v = v > T(0) ? v : T(0);
    if (tape.recording()) tape.push({{y}, {}});
    return y;
  }
  Volume<T> backward(const Volume<T>& grad, Tape<T>& tape, bool need_input_grad) override {
    auto entry = tape.pop();
    if (!need_input_grad) return {};
    const auto& y = entry.tensors.at(0);
    Volume<T> dx = grad;
    for (std::size_t i = 0; i < dx.data.size(); ++i)
      if (!(y.data[i] > T(0))) dx.data[i] = T(0);
    return dx;
  }
};

/// Elementwise |x|; the occurrence head's final activation.
template <typename T>
class Abs final : public Layer<T> {
 public:
  Shape4 output_shape(Shape4 in) const override { return in; }
  Volume<T> forward(const Volume<T>& x, Tape<T>& tape) const override {
    Volume<T> y = x;
    for (auto& v : y.data) v = std::abs(v);
    if (tape.recording()) tape.push({{x}, {}});
    return y;
  }
  Volume<T> backward(const Volume<T>& grad, Tape<T>& tape, bool need_input_grad) override {
    auto entry = tape.pop();
    if (!need_input_grad) return {};
    const auto& x = entry.tensors.at(0);
    Volume<T> dx = grad;
    for (std::size_t i = 0; i < dx.data.size(); ++i) {
      const T s = x.data[i] > T(0) ? T(1) : (x.data[i] < T(0) ? T(-1) : T(0));
      dx.data[i] *= s;
    }
    return dx;
  }
};

template <typename T>
class Sequential final : public Layer<T> {
 public:
  Sequential() = default;
  Sequential& add(LayerPtr<T> layer) {
    layers_.push_back(std::move(layer));
    return *this;
  }
  template <typename L, typename... Args>
  L& emplace(Args&&... args) {
    auto p = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *p;
    layers_.push_back(std::move(p));
    return ref;
  }
  std::size_t size() const { return layers_.size(); }

  Shape4 output_shape(Shape4 in) const override {
    for (const auto& l : layers_) in = l->output_shape(in);
    return in;
  }
  Volume<T> forward(const Volume<T>& x, Tape<T>& tape) const override {
    if (layers_.empty()) return x;
    Volume<T> h = layers_.front()->forward(x, tape);
    for (std::size_t i = 1; i < layers_.size(); ++i) h = layers_[i]->forward(h, tape);
    return h;
  }
  Volume<T> backward(const Volume<T>& grad, Tape<T>& tape, bool need_input_grad) override {
    if (layers_.empty()) return need_input_grad ? grad : Volume<T>{};
    Volume<T> g = grad;
    for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(g, tape, i > 0 || need_input_grad);
    return g;
  }
  void parameters(std::vector<Parameter<T>*>& out) override {
    for (auto& l : layers_) l->parameters(out);
  }

 private:
  std::vector<LayerPtr<T>> layers_;
};

/// relu(main(x) + shortcut(x)); an empty shortcut is the identity.
template <typename T>
class Residual final : public Layer<T> {
 public:
  Residual(LayerPtr<T> main, LayerPtr<T> shortcut) : main_(std::move(main)), shortcut_(std::move(shortcut)) {}

  Shape4 output_shape(Shape4 in) const override { return main_->output_shape(in); }

  Volume<T> forward(const Volume<T>& x, Tape<T>& tape) const override {
    Volume<T> y = main_->forward(x, tape);
    if (shortcut_) {
      const Volume<T> s = shortcut_->forward(x, tape);
      for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += s.data[i];
    } else {
      if (!y.same_shape(x)) throw ConfigError("identity shortcut with mismatched shapes");
      for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += x.data[i];
    }
    for (auto& v : y.data) v = v > T(0) ? v : T(0);
    if (tape.recording()) tape.push({{y}, {}});
    return y;
  }

  Volume<T> backward(const Volume<T>& grad, Tape<T>& tape, bool need_input_grad) override {
    auto entry = tape.pop();
    const auto& y = entry.tensors.at(0);
    Volume<T> g = grad;
    for (std::size_t i = 0; i < g.data.size(); ++i)
      if (!(y.data[i] > T(0))) g.data[i] = T(0);
    Volume<T> ds = shortcut_ ? shortcut_->backward(g, tape, need_input_grad) : (need_input_grad ? g : Volume<T>{});
    Volume<T> dm = main_->backward(g, tape, need_input_grad);
    if (!need_input_grad) return {};
    for (std::size_t i = 0; i < dm.data.size(); ++i) dm.data[i] += ds.data[i];
    return dm;
  }

  void parameters(std::vector<Parameter<T>*>& out) override {
    main_->parameters(out);
    if (shortcut_) shortcut_->parameters(out);
  }

 private:
  LayerPtr<T> main_;
  LayerPtr<T> shortcut_;
};

/// He-normal init for conv weights (fan-in), zero biases; norm layers keep
/// their constructor values (gamma 1, beta 0).
template <typename T>
void kaiming_init(std::vector<Parameter<T>*>& params, Rng& rng) {
  for (auto* p : params) {
    if (p->shape.size() == 5) {
      const double fan_in = static_cast<double>(p->shape[1]) * p->shape[2] * p->shape[3] * p->shape[4];
      const double std = std::sqrt(2.0 / fan_in);
      for (auto& v : p->value) v = static_cast<T>(std * rng.normal());
    }
  }
}

}  // namespace protoef::nn
