#pragma once

// Reference computations for the tests. Plain loops in double precision,
// written independently of the library kernels.

#include <cmath>
#include <vector>

#include "bagnet/bagnet.hpp"

namespace oracle {

using bagnet::Tensor;

// 3-d array of doubles, [c][i][j]
struct Grid {
  std::size_t c = 0, h = 0, w = 0;
  std::vector<double> v;
  double& operator()(std::size_t a, std::size_t i, std::size_t j) { return v[(a * h + i) * w + j]; }
  double operator()(std::size_t a, std::size_t i, std::size_t j) const { return v[(a * h + i) * w + j]; }
};

template <class T>
Grid to_grid(const Tensor<T>& t) {
  Grid g{t.dim(0), t.dim(1), t.dim(2), {}};
  for (std::size_t i = 0; i < t.size(); ++i) g.v.push_back(static_cast<double>(t[i]));
  return g;
}

/// Direct window summation.
template <class T>
Grid conv(const Grid& in, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride = 1) {
  const std::size_t co = w.dim(0), ci = w.dim(1), k = w.dim(2);
  Grid out{co, (in.h - k) / stride + 1, (in.w - k) / stride + 1, {}};
  out.v.assign(out.c * out.h * out.w, 0.0);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = 0; i < out.h; ++i)
      for (std::size_t j = 0; j < out.w; ++j) {
        double s = static_cast<double>(b[o]);
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t di = 0; di < k; ++di)
            for (std::size_t dj = 0; dj < k; ++dj)
              s += in(c, i * stride + di, j * stride + dj) *
                   static_cast<double>(w[((o * ci + c) * k + di) * k + dj]);
        out(o, i, j) = s;
      }
  return out;
}

inline Grid relu(Grid g) {
  for (auto& x : g.v) x = x > 0 ? x : 0;
  return g;
}

template <class T>
Grid backbone(const bagnet::ToyBagNet<T>& m, const Tensor<T>& image) {
  Grid x = to_grid(image);
  for (const auto& l : m.convs) x = relu(conv(x, l.weight, l.bias));
  return x;
}

inline std::vector<double> channel_means(const Grid& g) {
  std::vector<double> out(g.c, 0.0);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.h; ++i)
      for (std::size_t j = 0; j < g.w; ++j) out[c] += g(c, i, j);
    out[c] /= static_cast<double>(g.h * g.w);
  }
  return out;
}

template <class T>
std::vector<double> dense(const std::vector<double>& x, const Tensor<T>& w, const Tensor<T>* b) {
  std::vector<double> out(w.dim(0), 0.0);
  for (std::size_t r = 0; r < w.dim(0); ++r) {
    double s = b ? static_cast<double>((*b)[r]) : 0.0;
    for (std::size_t c = 0; c < w.dim(1); ++c) s += static_cast<double>(w[r * w.dim(1) + c]) * x[c];
    out[r] = s;
  }
  return out;
}

/// SIL logits: backbone, explicit mean, explicit dot products.
template <class T>
std::vector<double> sil_logits(const bagnet::ToyBagNet<T>& m, const Tensor<T>& patch) {
  return dense(channel_means(backbone(m, patch)), m.head_weight, &m.head_bias);
}

template <class T>
Tensor<T> extract(const Tensor<T>& img, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  Tensor<T> out({img.dim(0), h, w});
  for (std::size_t c = 0; c < img.dim(0); ++c)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) out.at(c, i, j) = img.at(c, y + i, x + j);
  return out;
}

/// -log softmax(z)[y] in long double without stabilization tricks.
inline long double cross_entropy(const std::vector<long double>& z, std::size_t y) {
  long double s = 0;
  for (long double v : z) s += std::exp(v);
  return std::log(s) - z[y];
}

inline double rel(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace oracle

namespace testutil {

template <class T>
bagnet::Tensor<T> random_tensor(bagnet::Shape shape, bagnet::Rng& rng, double lo = -1, double hi = 1) {
  bagnet::Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

inline bagnet::ModelConfig small_config(std::size_t channels = 8, std::size_t n3 = 4, std::size_t n1 = 2) {
  bagnet::ModelConfig c;
  c.channels = channels;
  c.n3 = n3;
  c.n1 = n1;
  return c;
}

/// Random model with nonzero biases so bias paths are exercised.
template <class T>
bagnet::ToyBagNet<T> random_model(const bagnet::ModelConfig& cfg, std::uint64_t seed) {
  bagnet::Rng rng(seed);
  auto m = bagnet::ToyBagNet<T>::init(cfg, rng);
  for (auto& l : m.convs)
    for (auto& v : l.bias.data()) v = static_cast<T>(rng.uniform(-0.1, 0.1));
  for (auto& v : m.head_bias.data()) v = static_cast<T>(rng.uniform(-0.5, 0.5));
  return m;
}

}  // namespace testutil
