// SPDX-License-Identifier: Apache-2.0
// Brute-force reference implementations used only by the tests. They share
// no code with the library and favor plain loops over speed.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <vector>

#include "protoef/random.hpp"
#include "protoef/volume.hpp"

namespace oracle {

using protoef::Matrix;
using protoef::Volume;

inline long double norm(const std::vector<long double>& v) {
  long double s = 0;
  for (auto x : v) s += x * x;
  return std::sqrt(s);
}

inline std::vector<long double> row(const Matrix<double>& m, int r) {
  std::vector<long double> out(m.cols);
  for (int j = 0; j < m.cols; ++j) out[j] = m(r, j);
  return out;
}

inline double cosine(const std::vector<long double>& a, const std::vector<long double>& b) {
  long double dot = 0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  long double c = dot / (norm(a) * norm(b) + 1e-8L);
  if (c > 1) c = 1;
  if (c < -1) c = -1;
  return static_cast<double>(c);
}

inline double mse(const std::vector<double>& p, const std::vector<double>& y) {
  long double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - y[i]) * (p[i] - y[i]);
  return static_cast<double>(s / p.size());
}

// Repeatedly extracts the maximum instead of sorting.
inline double cluster(const Matrix<double>& s, const std::vector<double>& y, const std::vector<double>& l,
                      double delta, int k) {
  long double total = 0;
  for (int i = 0; i < s.rows; ++i) {
    std::vector<double> pool;
    for (int j = 0; j < s.cols; ++j)
      if (std::fabs(y[i] - l[j]) < delta) pool.push_back(s(i, j));
    if (pool.empty()) continue;
    const int take = std::min<int>(k, static_cast<int>(pool.size()));
    long double acc = 0;
    for (int t = 0; t < take; ++t) {
      auto it = std::max_element(pool.begin(), pool.end());
      acc += *it;
      pool.erase(it);
    }
    total += acc / take;
  }
  return static_cast<double>(-total / s.rows);
}

inline double psd(const Matrix<double>& s) {
  long double total = 0;
  for (int j = 0; j < s.cols; ++j) {
    double best = 1e300;
    for (int i = 0; i < s.rows; ++i) best = std::min(best, 0.5 * (1.0 - s(i, j)));
    total += std::log(1.0L - best + 1e-6L);
  }
  return static_cast<double>(-total / s.cols);
}

inline double pas(const Matrix<double>& p, const std::vector<double>& l, double delta) {
  long double total = 0;
  for (int i = 0; i < p.rows; ++i) {
    long double acc = 0;
    int count = 0;
    for (int j = 0; j < p.rows; ++j) {
      if (j == i || !(std::fabs(l[i] - l[j]) > delta)) continue;
      // angle of the epsilon-stabilized cosine, as contracted
      const long double ang = std::acos(static_cast<long double>(cosine(row(p, i), row(p, j)))) / std::numbers::pi_v<long double>;
      acc += std::log(ang + 1e-6L);
      ++count;
    }
    if (count) total += acc / count;
  }
  return static_cast<double>(-total / p.rows);
}

inline double occurrence(const std::vector<Volume<double>>& maps, const std::vector<Volume<std::uint8_t>>& masks,
                         double rho) {
  long double outside = 0, all = 0;
  long double count = 0;
  for (std::size_t i = 0; i < maps.size(); ++i)
    for (int k = 0; k < maps[i].channels; ++k)
      for (int t = 0; t < maps[i].frames; ++t)
        for (int y = 0; y < maps[i].height; ++y)
          for (int x = 0; x < maps[i].width; ++x) {
            const long double v = std::fabs(maps[i].at(k, t, y, x));
            if (!masks[i].at(0, t, y, x)) outside += v;
            all += v;
            count += 1;
          }
  return static_cast<double>(outside / count + rho * all / count);
}

struct Head {
  std::vector<double> beta;
  double y = 0;
};

// log-sum-exp softmax in long double
inline Head head(const std::vector<double>& s, const std::vector<double>& theta, const std::vector<double>& l,
                 double tau) {
  std::vector<long double> z(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) z[k] = static_cast<long double>(s[k]) * theta[k] / tau;
  long double mx = *std::max_element(z.begin(), z.end());
  long double lse = 0;
  for (auto v : z) lse += std::exp(v - mx);
  lse = mx + std::log(lse);
  Head h;
  long double y = 0;
  for (std::size_t k = 0; k < s.size(); ++k) {
    const long double b = std::exp(z[k] - lse);
    h.beta.push_back(static_cast<double>(b));
    y += b * l[k];
  }
  h.y = static_cast<double>(y);
  return h;
}

/// Direct-summation 3D convolution; weight [out][in][kt][kh][kw].
inline Volume<double> conv3d(const Volume<double>& x, const std::vector<double>& w, const std::vector<double>& bias,
                             int out_c, std::array<int, 3> k, std::array<int, 3> stride, std::array<int, 3> pad) {
  const int ot = (x.frames + 2 * pad[0] - k[0]) / stride[0] + 1;
  const int oh = (x.height + 2 * pad[1] - k[1]) / stride[1] + 1;
  const int ow = (x.width + 2 * pad[2] - k[2]) / stride[2] + 1;
  Volume<double> y(out_c, ot, oh, ow);
  for (int o = 0; o < out_c; ++o)
    for (int t = 0; t < ot; ++t)
      for (int yy = 0; yy < oh; ++yy)
        for (int xx = 0; xx < ow; ++xx) {
          long double acc = bias.empty() ? 0 : bias[o];
          for (int c = 0; c < x.channels; ++c)
            for (int a = 0; a < k[0]; ++a)
              for (int b = 0; b < k[1]; ++b)
                for (int d = 0; d < k[2]; ++d) {
                  const int it = t * stride[0] - pad[0] + a, iy = yy * stride[1] - pad[1] + b,
                            ix = xx * stride[2] - pad[2] + d;
                  if (it < 0 || iy < 0 || ix < 0 || it >= x.frames || iy >= x.height || ix >= x.width) continue;
                  const std::size_t wi = ((((static_cast<std::size_t>(o) * x.channels + c) * k[0] + a) * k[1] + b) * k[2] + d);
                  acc += w[wi] * x.at(c, it, iy, ix);
                }
          y.at(o, t, yy, xx) = static_cast<double>(acc);
        }
  return y;
}

inline Volume<double> group_norm(const Volume<double>& x, int groups, const std::vector<double>& gamma,
                                 const std::vector<double>& beta, double eps = 1e-5) {
  Volume<double> y = x;
  const int per = x.channels / groups;
  for (int g = 0; g < groups; ++g) {
    long double sum = 0, sq = 0, n = 0;
    for (int c = g * per; c < (g + 1) * per; ++c)
      for (double v : x.channel(c)) {
        sum += v;
        n += 1;
      }
    const long double mean = sum / n;
    for (int c = g * per; c < (g + 1) * per; ++c)
      for (double v : x.channel(c)) sq += (v - mean) * (v - mean);
    const long double inv = 1.0L / std::sqrt(sq / n + eps);
    for (int c = g * per; c < (g + 1) * per; ++c) {
      auto out = y.channel(c);
      auto in = x.channel(c);
      for (std::size_t i = 0; i < in.size(); ++i)
        out[i] = static_cast<double>((in[i] - mean) * inv * gamma[c] + beta[c]);
    }
  }
  return y;
}

/// Central finite difference of f at x along every coordinate.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h = 1e-4) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|a|_inf, |b|_inf, floor): relative error on the
/// scale of the gradient vector.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-6) {
  double scale = floor, diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max({scale, std::fabs(a[i]), std::fabs(b[i])});
    diff = std::max(diff, std::fabs(a[i] - b[i]));
  }
  return diff / scale;
}

}  // namespace oracle
