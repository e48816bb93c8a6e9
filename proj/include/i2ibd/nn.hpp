#pragma once

// Minimal reverse-mode building blocks for the toy model zoo. Parameters of a
// model live in one flat vector; every layer addresses its weights through an
// offset into that vector, so the canonical gradient flattening is simply the
// parameter storage order.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "i2ibd/image.hpp"

namespace i2ibd::nn {

struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::vector<int> shape;
  std::size_t count = 0;
};

class ParamLayout {
 public:
  std::size_t add(std::string name, std::vector<int> shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    blocks_.push_back({std::move(name), total_, std::move(shape), n});
    total_ += n;
    return blocks_.back().offset;
  }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  std::size_t total() const { return total_; }

 private:
  std::vector<ParamBlock> blocks_;
  std::size_t total_ = 0;
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// 3x3 convolution, stride 1, zero padding 1. Weights are stored as
/// [out][in][ky][kx] followed by a bias per output channel.
struct Conv3x3 {
  int in = 0;
  int out = 0;
  std::size_t w_off = 0;
  std::size_t b_off = 0;

  static Conv3x3 make(ParamLayout& layout, const std::string& name, int in, int out) {
    Conv3x3 c;
    c.in = in;
    c.out = out;
    c.w_off = layout.add(name + ".weight", {out, in, 3, 3});
    c.b_off = layout.add(name + ".bias", {out});
    return c;
  }
  int fan_in() const { return in * 9; }
  std::size_t weight_count() const { return static_cast<std::size_t>(out) * in * 9; }
};

// The convolution runs as nine shifted GEMMs over a zero-padded copy of the
// input. With padded row length Wp = W + 2, output pixel (y, x) sits at
// y * Wp + x of an "extended" H x Wp grid and tap (ky, kx) reads the padded
// input at that index plus ky * Wp + kx, so every tap is one contiguous
// column range. Columns x >= W of the extended grid are scratch.

/// Zero-padded input, channels x ((H + 2) * (W + 2) + 2); resized in place so
/// a reused buffer keeps its storage.
template <typename T>
void pad3x3(const Tensor3<T>& x, RowMat<T>& xp) {
  const int C = x.channels(), H = x.height(), W = x.width(), Wp = W + 2;
  xp.resize(C, static_cast<Eigen::Index>(H + 2) * Wp + 2);
  xp.setZero();
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y) std::copy_n(&x(c, y, 0), W, xp.row(c).data() + (y + 1) * Wp + 1);
}

// Weights of tap k as a dense out x in matrix.
template <typename T>
void gather_tap(std::span<const T> params, const Conv3x3& conv, int k, RowMat<T>& wk) {
  wk.resize(conv.out, conv.in);
  const T* w = params.data() + conv.w_off;
  for (int o = 0; o < conv.out; ++o)
    for (int i = 0; i < conv.in; ++i) wk(o, i) = w[(static_cast<std::size_t>(o) * conv.in + i) * 9 + k];
}

/// When `saved` is given it receives the padded input, which conv_backward
/// needs. Otherwise a per-thread scratch buffer is used.
template <typename T>
Tensor3<T> conv_forward(std::span<const T> params, const Conv3x3& conv, const Tensor3<T>& x,
                        RowMat<T>* saved = nullptr) {
  require_shape(x.channels() == conv.in, "conv: expected " + std::to_string(conv.in) +
                                             " input channels, got " + std::to_string(x.channels()));
  const int H = x.height(), W = x.width(), Wp = W + 2;
  const Eigen::Index n = static_cast<Eigen::Index>(H) * Wp;
  thread_local RowMat<T> scratch, wk, ext;
  RowMat<T>& xp = saved ? *saved : scratch;
  pad3x3(x, xp);
  ext.setZero(conv.out, n);
  for (int k = 0; k < 9; ++k) {
    gather_tap(params, conv, k, wk);
    ext.noalias() += wk * xp.middleCols((k / 3) * Wp + k % 3, n);
  }
  const T* b = params.data() + conv.b_off;
  Tensor3<T> y(conv.out, H, W);
  for (int o = 0; o < conv.out; ++o)
    for (int r = 0; r < H; ++r) {
      const T* src = ext.row(o).data() + static_cast<std::size_t>(r) * Wp;
      T* dst = &y(o, r, 0);
      for (int c = 0; c < W; ++c) dst[c] = src[c] + b[o];
    }
  return y;
}

/// `xp` is the padded input saved by conv_forward; (in_h, in_w) the input's
/// spatial size. Accumulates parameter gradients into `grad_params` (skipped
/// when empty) and writes the input gradient into `grad_x` (skipped when null).
template <typename T>
void conv_backward(std::span<const T> params, const Conv3x3& conv, const RowMat<T>& xp, int in_h, int in_w,
                   const Tensor3<T>& grad_y, std::span<T> grad_params, Tensor3<T>* grad_x) {
  const int H = in_h, W = in_w, Wp = W + 2;
  const Eigen::Index n = static_cast<Eigen::Index>(H) * Wp;
  thread_local RowMat<T> gext, wk, gk, gxp;
  gext.setZero(conv.out, n);
  for (int o = 0; o < conv.out; ++o)
    for (int r = 0; r < H; ++r) std::copy_n(&grad_y(o, r, 0), W, gext.row(o).data() + static_cast<std::size_t>(r) * Wp);
  if (!grad_params.empty()) {
    T* gw = grad_params.data() + conv.w_off;
    for (int k = 0; k < 9; ++k) {
      gk.noalias() = gext * xp.middleCols((k / 3) * Wp + k % 3, n).transpose();
      for (int o = 0; o < conv.out; ++o)
        for (int i = 0; i < conv.in; ++i) gw[(static_cast<std::size_t>(o) * conv.in + i) * 9 + k] += gk(o, i);
    }
    const Vec<T> gb = gext.rowwise().sum();
    Eigen::Map<Vec<T>>(grad_params.data() + conv.b_off, conv.out) += gb;
  }
  if (grad_x != nullptr) {
    gxp.setZero(conv.in, xp.cols());
    for (int k = 0; k < 9; ++k) {
      gather_tap(params, conv, k, wk);
      gxp.middleCols((k / 3) * Wp + k % 3, n).noalias() += wk.transpose() * gext;
    }
    *grad_x = Tensor3<T>(conv.in, H, W);
    for (int c = 0; c < conv.in; ++c)
      for (int r = 0; r < H; ++r) std::copy_n(gxp.row(c).data() + (r + 1) * Wp + 1, W, &(*grad_x)(c, r, 0));
  }
}

/// Fully connected layer over a flattened input, weights [out][in] then bias.
struct Dense {
  int in = 0;
  int out = 0;
  std::size_t w_off = 0;
  std::size_t b_off = 0;

  static Dense make(ParamLayout& layout, const std::string& name, int in, int out) {
    Dense d;
    d.in = in;
    d.out = out;
    d.w_off = layout.add(name + ".weight", {out, in});
    d.b_off = layout.add(name + ".bias", {out});
    return d;
  }
};

// Operands are staged in Eigen-owned (aligned) vectors so the product's
// reduction order does not depend on where the caller's buffers live.
template <typename T>
std::vector<T> dense_forward(std::span<const T> params, const Dense& d, std::span<const T> x) {
  require_shape(static_cast<int>(x.size()) == d.in, "dense: input length mismatch");
  Eigen::Map<const RowMat<T>> w(params.data() + d.w_off, d.out, d.in);
  Eigen::Map<const Vec<T>> b(params.data() + d.b_off, d.out);
  const Vec<T> xv = Eigen::Map<const Vec<T>>(x.data(), d.in);
  const Vec<T> yv = w * xv + b;
  return std::vector<T>(yv.data(), yv.data() + d.out);
}

template <typename T>
std::vector<T> dense_backward(std::span<const T> params, const Dense& d, std::span<const T> x,
                              std::span<const T> grad_y, std::span<T> grad_params) {
  const Vec<T> gy = Eigen::Map<const Vec<T>>(grad_y.data(), d.out);
  if (!grad_params.empty()) {
    Eigen::Map<RowMat<T>> gw(grad_params.data() + d.w_off, d.out, d.in);
    Eigen::Map<Vec<T>> gb(grad_params.data() + d.b_off, d.out);
    const Vec<T> xv = Eigen::Map<const Vec<T>>(x.data(), d.in);
    const RowMat<T> outer = gy * xv.transpose();
    gw += outer;
    gb += gy;
  }
  Eigen::Map<const RowMat<T>> w(params.data() + d.w_off, d.out, d.in);
  const Vec<T> gx = w.transpose() * gy;
  return std::vector<T>(gx.data(), gx.data() + d.in);
}

// SiLU: x * sigmoid(x). Smooth everywhere, which keeps finite-difference
// checks meaningful at every coordinate.
template <typename T>
T silu(T v) {
  return v / (T(1) + std::exp(-v));
}

template <typename T>
T silu_grad(T v) {
  const T s = T(1) / (T(1) + std::exp(-v));
  return s * (T(1) + v * (T(1) - s));
}

template <typename T>
Tensor3<T> silu(const Tensor3<T>& z) {
  Tensor3<T> h(z.channels(), z.height(), z.width());
  Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> zv(z.data(), z.size());
  Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> hv(h.data(), h.size());
  hv = zv / (T(1) + (-zv).exp());
  return h;
}

template <typename T>
void silu_backward_inplace(const Tensor3<T>& z, Tensor3<T>& grad) {
  Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> zv(z.data(), z.size());
  Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> gv(grad.data(), grad.size());
  const auto s = T(1) / (T(1) + (-zv).exp());
  gv *= s * (T(1) + zv * (T(1) - s));
}

// Saturating clamp used on training paths: identity on [0,1], tanh tails of
// width `soft_clamp_margin` outside. C1-continuous at both knees.
inline constexpr double soft_clamp_margin = 0.05;

template <typename T>
T soft_clamp(T v) {
  const T m = static_cast<T>(soft_clamp_margin);
  if (v > T(1)) return T(1) + m * std::tanh((v - T(1)) / m);
  if (v < T(0)) return m * std::tanh(v / m);
  return v;
}

template <typename T>
T soft_clamp_grad(T v) {
  const T m = static_cast<T>(soft_clamp_margin);
  if (v > T(1)) {
    const T t = std::tanh((v - T(1)) / m);
    return T(1) - t * t;
  }
  if (v < T(0)) {
    const T t = std::tanh(v / m);
    return T(1) - t * t;
  }
  return T(1);
}

template <typename T>
Tensor3<T> avgpool2(const Tensor3<T>& x) {
  require_shape(x.height() % 2 == 0 && x.width() % 2 == 0, "avgpool2: odd spatial size");
  Tensor3<T> y(x.channels(), x.height() / 2, x.width() / 2);
  for (int c = 0; c < y.channels(); ++c)
    for (int yy = 0; yy < y.height(); ++yy)
      for (int xx = 0; xx < y.width(); ++xx)
        y(c, yy, xx) = (x(c, 2 * yy, 2 * xx) + x(c, 2 * yy, 2 * xx + 1) + x(c, 2 * yy + 1, 2 * xx) +
                        x(c, 2 * yy + 1, 2 * xx + 1)) *
                       T(0.25);
  return y;
}

template <typename T>
Tensor3<T> avgpool2_backward(const Tensor3<T>& grad_y) {
  Tensor3<T> gx(grad_y.channels(), grad_y.height() * 2, grad_y.width() * 2);
  for (int c = 0; c < gx.channels(); ++c)
    for (int y = 0; y < gx.height(); ++y)
      for (int x = 0; x < gx.width(); ++x) gx(c, y, x) = grad_y(c, y / 2, x / 2) * T(0.25);
  return gx;
}

template <typename T>
std::vector<T> global_avgpool(const Tensor3<T>& x) {
  std::vector<T> out(x.channels());
  for (int c = 0; c < x.channels(); ++c) {
    T s = 0;
    for (T v : x.channel(c)) s += v;
    out[c] = s / static_cast<T>(x.plane());
  }
  return out;
}

template <typename T>
Tensor3<T> global_avgpool_backward(std::span<const T> grad, int height, int width) {
  Tensor3<T> gx(static_cast<int>(grad.size()), height, width);
  const T inv = T(1) / static_cast<T>(static_cast<std::size_t>(height) * width);
  for (int c = 0; c < gx.channels(); ++c)
    for (T& v : gx.channel(c)) v = grad[c] * inv;
  return gx;
}

/// He-style fan-in scaled normal initialisation of a conv's weights; bias = 0.
template <typename T>
void init_conv(std::span<T> params, const Conv3x3& conv, std::mt19937_64& rng, double gain = 1.0) {
  std::normal_distribution<double> nd(0.0, gain * std::sqrt(2.0 / conv.fan_in()));
  for (std::size_t i = 0; i < conv.weight_count(); ++i) params[conv.w_off + i] = static_cast<T>(nd(rng));
  for (int i = 0; i < conv.out; ++i) params[conv.b_off + i] = T(0);
}

template <typename T>
void init_dense(std::span<T> params, const Dense& d, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, std::sqrt(1.0 / d.in));
  for (std::size_t i = 0; i < static_cast<std::size_t>(d.in) * d.out; ++i)
    params[d.w_off + i] = static_cast<T>(nd(rng));
  for (int i = 0; i < d.out; ++i) params[d.b_off + i] = T(0);
}

}  // namespace i2ibd::nn
