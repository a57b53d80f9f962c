#pragma once

// Dense CPU kernels for the valid-convolution backbone.
//
// Every output element of the stride-1 convolution kernels is produced by the
// same instruction sequence regardless of its position or of the extent of the
// surrounding tensor: rows are zero-padded to a whole number of register
// blocks, so there is no scalar tail path. Tiled inference and the locality
// probe rely on this to get bit-identical results.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstring>
#include <string>
#include <vector>

#include "bagnet/tensor.hpp"

namespace bagnet::kernels {

namespace simd {

// 64-byte vector type; the compiler splits it on targets without 512-bit registers.
template <class T>
struct VecType;
template <>
struct VecType<float> {
  typedef float type __attribute__((vector_size(64)));
};
template <>
struct VecType<double> {
  typedef double type __attribute__((vector_size(64)));
};

template <class T>
using Vec = typename VecType<T>::type;

template <class T>
inline constexpr std::size_t kLanes = 64 / sizeof(T);

template <class T>
inline Vec<T> load(const T* p) {
  Vec<T> v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

template <class T>
inline Vec<T> broadcast(T x) {
  return Vec<T>{} + x;
}

}  // namespace simd

template <class T>
inline constexpr std::size_t kColVecs = 2;
template <class T>
inline constexpr std::size_t kColBlock = kColVecs<T> * simd::kLanes<T>;  // output columns per register block
inline constexpr std::size_t kChanBlock = 8;                          // output channels per register block

inline std::size_t round_up(std::size_t n, std::size_t m) { return (n + m - 1) / m * m; }

struct ConvDims {
  std::size_t c_in, h, w, c_out, k, stride;
  std::size_t h_out() const { return (h - k) / stride + 1; }
  std::size_t w_out() const { return (w - k) / stride + 1; }
};

inline ConvDims check_conv_shapes(const Shape& in, const Shape& weight, const Shape& bias,
                                  std::size_t stride) {
  if (in.size() != 3) throw ShapeError("conv2d: input must be [C,H,W], got " + shape_str(in));
  if (weight.size() != 4)
    throw ShapeError("conv2d: weight must be [C_out,C_in,k,k], got " + shape_str(weight));
  if (weight[2] != weight[3])
    throw ShapeError("conv2d: kernel must be square, got " + shape_str(weight));
  if (weight[1] != in[0])
    throw ShapeError("conv2d: C_in mismatch, weight dim 1 is " + std::to_string(weight[1]) +
                     " but input dim 0 (channels) is " + std::to_string(in[0]));
  if (bias.size() != 1 || bias[0] != weight[0])
    throw ShapeError("conv2d: bias must be [" + std::to_string(weight[0]) + "], got " +
                     shape_str(bias));
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t k = weight[2];
  if (in[1] < k)
    throw ShapeError("conv2d: input dim 1 (height) " + std::to_string(in[1]) +
                     " smaller than kernel " + std::to_string(k));
  if (in[2] < k)
    throw ShapeError("conv2d: input dim 2 (width) " + std::to_string(in[2]) +
                     " smaller than kernel " + std::to_string(k));
  return {in[0], in[1], in[2], weight[0], k, stride};
}

namespace detail {

// out[co][i][j] = bias[co] + sum_{ci,ky,kx} wt[(ci,ky,kx)][co] * in[ci][i+ky][j+kx]
// `in` is [c_in][h][row_stride] with row_stride >= round_up(w_out, kColBlock<T>) + k - 1,
// `wt` is [c_in*k*k][c_out_padded].
template <class T, std::size_t K>
void conv_rows_k(const T* in, std::size_t c_in, std::size_t h, std::size_t row_stride,
                 const T* wt, std::size_t c_out, std::size_t c_out_padded, std::size_t k_rt,
                 const T* bias, T* out, std::size_t h_out, std::size_t w_out) {
  // K == 0 selects the runtime kernel size.
  const std::size_t k = K ? K : k_rt;
  using V = simd::Vec<T>;
  constexpr std::size_t L = simd::kLanes<T>;
  constexpr std::size_t NV = kColVecs<T>;
  for (std::size_t co0 = 0; co0 < c_out; co0 += kChanBlock) {
    for (std::size_t i = 0; i < h_out; ++i) {
      for (std::size_t j0 = 0; j0 < w_out; j0 += kColBlock<T>) {
        V acc[kChanBlock][NV] = {};
        for (std::size_t ci = 0; ci < c_in; ++ci) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            const T* row = in + (ci * h + i + ky) * row_stride + j0;
            const T* wrow = wt + ((ci * k + ky) * k) * c_out_padded + co0;
            for (std::size_t kx = 0; kx < k; ++kx) {
              V x[NV];
              for (std::size_t n = 0; n < NV; ++n) x[n] = simd::load(row + kx + n * L);
              const T* wk = wrow + kx * c_out_padded;
              for (std::size_t b = 0; b < kChanBlock; ++b) {
                const V wv = simd::broadcast(wk[b]);
                for (std::size_t n = 0; n < NV; ++n) acc[b][n] += wv * x[n];
              }
            }
          }
        }
        const std::size_t nb = std::min(kChanBlock, c_out - co0);
        const std::size_t nv = std::min(kColBlock<T>, w_out - j0);
        for (std::size_t b = 0; b < nb; ++b) {
          const T bv = bias ? bias[co0 + b] : T(0);
          T lanes[kColBlock<T>];
          std::memcpy(lanes, acc[b], sizeof lanes);
          T* dst = out + ((co0 + b) * h_out + i) * w_out + j0;
          for (std::size_t v = 0; v < nv; ++v) dst[v] = lanes[v] + bv;
        }
      }
    }
  }
}

template <class T>
void conv_rows(const T* in, std::size_t c_in, std::size_t h, std::size_t row_stride,
               const T* wt, std::size_t c_out, std::size_t c_out_padded, std::size_t k,
               const T* bias, T* out, std::size_t h_out, std::size_t w_out) {
  switch (k) {
    case 1:
      return conv_rows_k<T, 1>(in, c_in, h, row_stride, wt, c_out, c_out_padded, k, bias, out, h_out, w_out);
    case 3:
      return conv_rows_k<T, 3>(in, c_in, h, row_stride, wt, c_out, c_out_padded, k, bias, out, h_out, w_out);
    case 5:
      return conv_rows_k<T, 5>(in, c_in, h, row_stride, wt, c_out, c_out_padded, k, bias, out, h_out, w_out);
    default:
      return conv_rows_k<T, 0>(in, c_in, h, row_stride, wt, c_out, c_out_padded, k, bias, out, h_out, w_out);
  }
}

// Copies a [c][h][w] plane stack into a zero-filled [c][h + 2*pad][row_stride]
// buffer at offset (pad, pad).
template <class T>
Buffer<T> pad_planes(const T* src, std::size_t c, std::size_t h, std::size_t w,
                     std::size_t pad, std::size_t row_stride) {
  const std::size_t hp = h + 2 * pad;
  Buffer<T> out(c * hp * row_stride, T(0));
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < h; ++i)
      std::copy_n(src + (ci * h + i) * w, w, out.data() + (ci * hp + i + pad) * row_stride + pad);
  return out;
}

template <class T>
T conv_at(const Tensor<T>& in, const Tensor<T>& w, std::size_t co, std::size_t y,
          std::size_t x) {
  const std::size_t c_in = w.dim(1), k = w.dim(2);
  T acc = 0;
  for (std::size_t ci = 0; ci < c_in; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx)
        acc += w[((co * c_in + ci) * k + ky) * k + kx] * in.at(ci, y + ky, x + kx);
  return acc;
}

}  // namespace detail

/// Valid (unpadded) 2-d cross-correlation.
template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias,
                         std::size_t stride = 1) {
  const ConvDims d = check_conv_shapes(in.shape(), weight.shape(), bias.shape(), stride);
  const std::size_t h_out = d.h_out(), w_out = d.w_out();
  Tensor<T> out({d.c_out, h_out, w_out});
  if (stride != 1) {
    for (std::size_t co = 0; co < d.c_out; ++co)
      for (std::size_t i = 0; i < h_out; ++i)
        for (std::size_t j = 0; j < w_out; ++j)
          out.at(co, i, j) = detail::conv_at(in, weight, co, i * stride, j * stride) + bias[co];
    return out;
  }
  const std::size_t row_stride = round_up(w_out, kColBlock<T>) + d.k - 1;
  const Buffer<T> padded = detail::pad_planes(in.ptr(), d.c_in, d.h, d.w, 0, row_stride);
  const std::size_t co_pad = round_up(d.c_out, kChanBlock);
  const std::size_t taps = d.c_in * d.k * d.k;
  Buffer<T> wt(taps * co_pad, T(0));
  for (std::size_t co = 0; co < d.c_out; ++co)
    for (std::size_t r = 0; r < taps; ++r) wt[r * co_pad + co] = weight[co * taps + r];
  detail::conv_rows(padded.data(), d.c_in, d.h, row_stride, wt.data(), d.c_out, co_pad, d.k,
                    bias.ptr(), out.ptr(), h_out, w_out);
  return out;
}

/// Gradient w.r.t. the convolution input (a full correlation with the flipped kernel).
template <class T>
Tensor<T> conv2d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& weight,
                                const Shape& in_shape, std::size_t stride = 1) {
  const std::size_t c_out = weight.dim(0), c_in = weight.dim(1), k = weight.dim(2);
  Tensor<T> grad_in(in_shape);
  const std::size_t h_out = grad_out.dim(1), w_out = grad_out.dim(2);
  if (stride != 1) {
    for (std::size_t co = 0; co < c_out; ++co)
      for (std::size_t i = 0; i < h_out; ++i)
        for (std::size_t j = 0; j < w_out; ++j) {
          const T g = grad_out.at(co, i, j);
          for (std::size_t ci = 0; ci < c_in; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx)
                grad_in.at(ci, i * stride + ky, j * stride + kx) +=
                    g * weight[((co * c_in + ci) * k + ky) * k + kx];
        }
    return grad_in;
  }
  // Rows of grad_in that a stride-1 valid conv never reads get zero gradient
  // automatically, because grad_in spans exactly h_out + k - 1 rows.
  const std::size_t h = in_shape[1], w = in_shape[2];
  const std::size_t row_stride = round_up(w, kColBlock<T>) + k - 1;
  const Buffer<T> padded = detail::pad_planes(grad_out.ptr(), c_out, h_out, w_out, k - 1, row_stride);
  const std::size_t ci_pad = round_up(c_in, kChanBlock);
  const std::size_t taps = c_out * k * k;
  Buffer<T> wt(taps * ci_pad, T(0));
  for (std::size_t co = 0; co < c_out; ++co)
    for (std::size_t ci = 0; ci < c_in; ++ci)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx)
          wt[((co * k + (k - 1 - ky)) * k + (k - 1 - kx)) * ci_pad + ci] =
              weight[((co * c_in + ci) * k + ky) * k + kx];
  detail::conv_rows(padded.data(), c_out, h_out + 2 * (k - 1), row_stride, wt.data(), c_in, ci_pad,
                    k, static_cast<const T*>(nullptr), grad_in.ptr(), h, w);
  return grad_in;
}

/// Gradient w.r.t. the convolution weight.
template <class T>
Tensor<T> conv2d_backward_weight(const Tensor<T>& grad_out, const Tensor<T>& in,
                                 const Shape& weight_shape, std::size_t stride = 1) {
  const std::size_t c_out = weight_shape[0], c_in = weight_shape[1], k = weight_shape[2];
  const std::size_t h = in.dim(1), w = in.dim(2);
  const std::size_t h_out = grad_out.dim(1), w_out = grad_out.dim(2);
  Tensor<T> grad_w(weight_shape);
  if (stride != 1) {
    for (std::size_t co = 0; co < c_out; ++co)
      for (std::size_t ci = 0; ci < c_in; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            T acc = 0;
            for (std::size_t i = 0; i < h_out; ++i)
              for (std::size_t j = 0; j < w_out; ++j)
                acc += grad_out.at(co, i, j) * in.at(ci, i * stride + ky, j * stride + kx);
            grad_w[((co * c_in + ci) * k + ky) * k + kx] = acc;
          }
    return grad_w;
  }
  using V = simd::Vec<T>;
  constexpr std::size_t L = simd::kLanes<T>;
  constexpr std::size_t kCoBlock = 4;
  constexpr std::size_t kTapBlock = 4;
  const std::size_t w_blk = round_up(w_out, L);
  const std::size_t row_stride = w_blk + k - 1;
  const Buffer<T> xin = detail::pad_planes(in.ptr(), c_in, h, w, 0, row_stride);
  const Buffer<T> gpad = detail::pad_planes(grad_out.ptr(), c_out, h_out, w_out, 0, w_blk);
  const std::size_t taps = c_in * k * k;
  const std::size_t taps_pad = round_up(taps, kTapBlock);
  // Tap offsets into xin; padded taps alias tap 0 and are discarded.
  std::vector<std::size_t> tap_off(taps_pad, 0);
  for (std::size_t r = 0; r < taps; ++r) {
    const std::size_t ci = r / (k * k), ky = (r / k) % k, kx = r % k;
    tap_off[r] = (ci * h + ky) * row_stride + kx;
  }
  for (std::size_t co0 = 0; co0 < c_out; co0 += kCoBlock) {
    const std::size_t nb = std::min(kCoBlock, c_out - co0);
    for (std::size_t r0 = 0; r0 < taps_pad; r0 += kTapBlock) {
      V acc[kCoBlock][kTapBlock] = {};
      for (std::size_t i = 0; i < h_out; ++i) {
        const T* g[kCoBlock];
        for (std::size_t b = 0; b < kCoBlock; ++b)
          g[b] = gpad.data() + (std::min(co0 + b, c_out - 1) * h_out + i) * w_blk;
        const T* x[kTapBlock];
        for (std::size_t t = 0; t < kTapBlock; ++t)
          x[t] = xin.data() + tap_off[r0 + t] + i * row_stride;
        for (std::size_t j = 0; j < w_blk; j += L) {
          V gv[kCoBlock], xv[kTapBlock];
          for (std::size_t b = 0; b < kCoBlock; ++b) gv[b] = simd::load(g[b] + j);
          for (std::size_t t = 0; t < kTapBlock; ++t) xv[t] = simd::load(x[t] + j);
          for (std::size_t b = 0; b < kCoBlock; ++b)
            for (std::size_t t = 0; t < kTapBlock; ++t) acc[b][t] += gv[b] * xv[t];
        }
      }
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t t = 0; t < kTapBlock && r0 + t < taps; ++t) {
          T lanes[L];
          std::memcpy(lanes, &acc[b][t], sizeof lanes);
          T s = 0;
          for (std::size_t v = 0; v < L; ++v) s += lanes[v];
          grad_w[(co0 + b) * taps + r0 + t] = s;
        }
    }
  }
  return grad_w;
}

template <class T>
Tensor<T> conv2d_backward_bias(const Tensor<T>& grad_out) {
  const std::size_t c = grad_out.dim(0), n = grad_out.dim(1) * grad_out.dim(2);
  Tensor<T> gb({c});
  for (std::size_t co = 0; co < c; ++co) {
    T s = 0;
    for (std::size_t p = 0; p < n; ++p) s += grad_out[co * n + p];
    gb[co] = s;
  }
  return gb;
}

template <class T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

// Subgradient at 0 is 0.
template <class T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& x) {
  Tensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

template <class T>
Tensor<T> spatial_gap_forward(const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("spatial_gap: input must be [C,H,W], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
  if (n == 0) throw ShapeError("spatial_gap: empty spatial extent " + shape_str(x.shape()));
  Tensor<T> out({c});
  for (std::size_t ci = 0; ci < c; ++ci) {
    T s = 0;
    for (std::size_t p = 0; p < n; ++p) s += x[ci * n + p];
    out[ci] = s / static_cast<T>(n);
  }
  return out;
}

template <class T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 1) throw ShapeError("linear: input must be a vector, got " + shape_str(x.shape()));
  if (w.rank() != 2 || w.dim(1) != x.dim(0))
    throw ShapeError("linear: weight dim 1 must equal input dim 0 (" + std::to_string(x.dim(0)) +
                     "), got weight " + shape_str(w.shape()));
  if (b.rank() != 1 || b.dim(0) != w.dim(0))
    throw ShapeError("linear: bias must be [" + std::to_string(w.dim(0)) + "], got " +
                     shape_str(b.shape()));
  const std::size_t k = w.dim(0), c = w.dim(1);
  Tensor<T> out({k});
  for (std::size_t r = 0; r < k; ++r) {
    T s = 0;
    for (std::size_t i = 0; i < c; ++i) s += w[r * c + i] * x[i];
    out[r] = s + b[r];
  }
  return out;
}

}  // namespace bagnet::kernels
