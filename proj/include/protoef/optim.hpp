// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "protoef/volume.hpp"

namespace protoef {

/// Non-owning view of one trainable tensor.
template <typename T>
struct ParamRef {
  std::string name;
  std::string group;
  std::span<T> value;
  std::span<T> grad;
};

template <typename T>
struct AdamMoments {
  std::vector<T> m;
  std::vector<T> v;
};

/// Adam with per-group learning rates. Moments are keyed by parameter name so
/// parameter storage may be replaced between steps (e.g. by projection).
class Adam {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::map<std::string, double> group_lr;
  std::set<std::string> frozen_groups;
  long step_count = 0;

  std::map<std::string, AdamMoments<float>> state_f32;
  std::map<std::string, AdamMoments<double>> state_f64;

  double lr_for(const std::string& group) const {
    if (frozen_groups.count(group)) return 0.0;
    auto it = group_lr.find(group);
    if (it == group_lr.end()) throw ConfigError("no learning rate configured for parameter group '" + group + "'");
    return it->second;
  }

  void step(std::span<ParamRef<float>> f32, std::span<ParamRef<double>> f64) {
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    update(f32, state_f32, bc1, bc2);
    update(f64, state_f64, bc1, bc2);
  }

 private:
  template <typename T>
  void update(std::span<ParamRef<T>> params, std::map<std::string, AdamMoments<T>>& state, double bc1, double bc2) {
    for (auto& p : params) {
      const double lr = lr_for(p.group);
      auto& mom = state[p.name];
      if (mom.m.size() != p.value.size()) {
        mom.m.assign(p.value.size(), T(0));
        mom.v.assign(p.value.size(), T(0));
      }
      if (lr == 0.0) continue;
      const double step = lr * std::sqrt(bc2) / bc1;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        mom.m[i] = static_cast<T>(beta1 * mom.m[i] + (1.0 - beta1) * g);
        mom.v[i] = static_cast<T>(beta2 * mom.v[i] + (1.0 - beta2) * g * g);
        p.value[i] = static_cast<T>(p.value[i] - step * mom.m[i] / (std::sqrt(static_cast<double>(mom.v[i])) + eps));
      }
    }
  }
};

template <typename T>
double grad_sq_norm(std::span<const ParamRef<T>> params) {
  double acc = 0.0;
  for (const auto& p : params)
    for (T g : p.grad) acc += static_cast<double>(g) * g;
  return acc;
}

/// Scales all gradients so their global L2 norm is at most max_norm; returns
/// the pre-clip norm.
inline double clip_global_norm(std::span<ParamRef<float>> f32, std::span<ParamRef<double>> f64, double max_norm) {
  const double norm = std::sqrt(grad_sq_norm<float>(f32) + grad_sq_norm<double>(f64));
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& p : f32)
      for (auto& g : p.grad) g = static_cast<float>(g * scale);
    for (auto& p : f64)
      for (auto& g : p.grad) g *= scale;
  }
  return norm;
}

}  // namespace protoef
