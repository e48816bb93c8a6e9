#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "i2ibd/error.hpp"

namespace i2ibd {

/// Dense channel-major (C, H, W) array. The shape is fixed at construction;
/// only whole-object assignment can change it.
template <typename T>
class Tensor3 {
 public:
  using value_type = T;

  Tensor3() = default;
  Tensor3(int channels, int height, int width, T fill = T(0))
      : c_(checked(channels)), h_(checked(height)), w_(checked(width)),
        data_(static_cast<std::size_t>(channels) * height * width, fill) {}

  int channels() const { return c_; }
  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t plane() const { return static_cast<std::size_t>(h_) * w_; }

  T& operator()(int c, int y, int x) { return data_[index(c, y, x)]; }
  const T& operator()(int c, int y, int x) const { return data_[index(c, y, x)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> channel(int c) { return {data_.data() + c * plane(), plane()}; }
  std::span<const T> channel(int c) const { return {data_.data() + c * plane(), plane()}; }

  bool same_shape(const Tensor3& o) const { return c_ == o.c_ && h_ == o.h_ && w_ == o.w_; }
  template <typename U>
  bool same_shape(const Tensor3<U>& o) const {
    return c_ == o.channels() && h_ == o.height() && w_ == o.width();
  }

  template <typename U>
  Tensor3<U> cast() const {
    Tensor3<U> out(c_, h_, w_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor3& operator+=(const Tensor3& o) {
    check(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor3& operator-=(const Tensor3& o) {
    check(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor3& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }
  friend Tensor3 operator+(Tensor3 a, const Tensor3& b) { return a += b; }
  friend Tensor3 operator-(Tensor3 a, const Tensor3& b) { return a -= b; }
  friend Tensor3 operator*(Tensor3 a, T s) { return a *= s; }

  friend bool operator==(const Tensor3& a, const Tensor3& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

  std::string shape_string() const {
    return std::to_string(c_) + "x" + std::to_string(h_) + "x" + std::to_string(w_);
  }

 private:
  static int checked(int dim) {
    if (dim <= 0) throw ShapeError("tensor dimensions must be positive");
    return dim;
  }

  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * h_ + y) * w_ + x;
  }
  void check(const Tensor3& o) const {
    if (!same_shape(o)) throw ShapeError("shape mismatch: " + shape_string() + " vs " + o.shape_string());
  }

  int c_ = 0, h_ = 0, w_ = 0;
  // Aligned storage: Eigen picks its vectorised code path by buffer
  // alignment, so a fixed alignment keeps results bitwise reproducible.
  std::vector<T, Eigen::aligned_allocator<T>> data_;
};

/// Intensities in [0,1], C in {1,3}.
using Image = Tensor3<float>;

template <typename T>
Tensor3<T> clip01(Tensor3<T> img) {
  for (auto& v : img.values()) v = std::min(std::max(v, T(0)), T(1));
  return img;
}

template <typename T>
Tensor3<T> clip_symmetric(Tensor3<T> img, T bound) {
  for (auto& v : img.values()) v = std::min(std::max(v, -bound), bound);
  return img;
}

template <typename T>
double l2_norm(const Tensor3<T>& t) {
  double s = 0.0;
  for (T v : t.values()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

template <typename T>
double linf_norm(const Tensor3<T>& t) {
  double m = 0.0;
  for (T v : t.values()) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

template <typename T>
double l2_distance(const Tensor3<T>& a, const Tensor3<T>& b) {
  require_shape(a.same_shape(b), "l2_distance: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

/// Row-major grid of size x size crops taken every `stride` pixels.
template <typename T>
std::vector<Tensor3<T>> extract_patches(const Tensor3<T>& img, int size, int stride) {
  require(stride >= 1, "extract_patches: stride must be >= 1");
  require(size >= 1, "extract_patches: size must be >= 1");
  require_shape(size <= std::min(img.height(), img.width()),
                "extract_patches: patch size exceeds image dimensions");
  std::vector<Tensor3<T>> out;
  for (int y0 = 0; y0 + size <= img.height(); y0 += stride) {
    for (int x0 = 0; x0 + size <= img.width(); x0 += stride) {
      Tensor3<T> p(img.channels(), size, size);
      for (int c = 0; c < img.channels(); ++c)
        for (int y = 0; y < size; ++y)
          for (int x = 0; x < size; ++x) p(c, y, x) = img(c, y0 + y, x0 + x);
      out.push_back(std::move(p));
    }
  }
  return out;
}

inline std::size_t patch_count(int height, int width, int size, int stride) {
  return static_cast<std::size_t>((height - size) / stride + 1) *
         static_cast<std::size_t>((width - size) / stride + 1);
}

// ---------------------------------------------------------------------------
// Bicubic resampling
// ---------------------------------------------------------------------------

/// Keys cubic convolution kernel.
inline double cubic_kernel(double x, double a = -0.5) {
  const double ax = std::abs(x);
  if (ax <= 1.0) return ((a + 2.0) * ax - (a + 3.0)) * ax * ax + 1.0;
  if (ax < 2.0) return ((a * ax - 5.0 * a) * ax + 8.0 * a) * ax - 4.0 * a;
  return 0.0;
}

/// Sparse 1-D resampling operator: out[i] = sum_k weights[i][k] * in[index[i][k]].
struct Resample1D {
  int in_size = 0;
  int out_size = 0;
  std::vector<std::vector<int>> index;
  std::vector<std::vector<double>> weight;
};

/// Pixel-centre aligned bicubic weights. When shrinking, the kernel is
/// stretched by the scale factor (antialiasing); borders replicate.
inline Resample1D bicubic_weights(int in_size, int out_size) {
  Resample1D r;
  r.in_size = in_size;
  r.out_size = out_size;
  r.index.resize(out_size);
  r.weight.resize(out_size);
  const double scale = static_cast<double>(out_size) / in_size;
  const double kscale = scale < 1.0 ? scale : 1.0;
  const double support = 2.0 / kscale;
  for (int i = 0; i < out_size; ++i) {
    const double center = (i + 0.5) / scale - 0.5;
    const int lo = static_cast<int>(std::floor(center - support));
    const int hi = static_cast<int>(std::ceil(center + support));
    double total = 0.0;
    std::vector<std::pair<int, double>> taps;
    for (int j = lo; j <= hi; ++j) {
      const double w = kscale * cubic_kernel((center - j) * kscale);
      if (w == 0.0) continue;
      taps.emplace_back(std::clamp(j, 0, in_size - 1), w);
      total += w;
    }
    for (auto& [j, w] : taps) {
      r.index[i].push_back(j);
      r.weight[i].push_back(w / total);
    }
  }
  return r;
}

template <typename T>
Tensor3<T> apply_separable(const Tensor3<T>& in, const Resample1D& rows, const Resample1D& cols) {
  require_shape(in.height() == rows.in_size && in.width() == cols.in_size,
                "resample: operator does not match input shape");
  Tensor3<T> tmp(in.channels(), in.height(), cols.out_size);
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < in.height(); ++y)
      for (int x = 0; x < cols.out_size; ++x) {
        double s = 0.0;
        for (std::size_t k = 0; k < cols.index[x].size(); ++k)
          s += cols.weight[x][k] * in(c, y, cols.index[x][k]);
        tmp(c, y, x) = static_cast<T>(s);
      }
  Tensor3<T> out(in.channels(), rows.out_size, cols.out_size);
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < rows.out_size; ++y)
      for (int x = 0; x < cols.out_size; ++x) {
        double s = 0.0;
        for (std::size_t k = 0; k < rows.index[y].size(); ++k)
          s += rows.weight[y][k] * tmp(c, rows.index[y][k], x);
        out(c, y, x) = static_cast<T>(s);
      }
  return out;
}

/// Adjoint of apply_separable: maps a gradient at the output back to the input.
template <typename T>
Tensor3<T> apply_separable_adjoint(const Tensor3<T>& grad_out, const Resample1D& rows,
                                   const Resample1D& cols) {
  require_shape(grad_out.height() == rows.out_size && grad_out.width() == cols.out_size,
                "resample adjoint: operator does not match gradient shape");
  Tensor3<double> tmp(grad_out.channels(), rows.in_size, cols.out_size);
  for (int c = 0; c < grad_out.channels(); ++c)
    for (int y = 0; y < rows.out_size; ++y)
      for (int x = 0; x < cols.out_size; ++x)
        for (std::size_t k = 0; k < rows.index[y].size(); ++k)
          tmp(c, rows.index[y][k], x) += rows.weight[y][k] * grad_out(c, y, x);
  Tensor3<double> acc(grad_out.channels(), rows.in_size, cols.in_size);
  for (int c = 0; c < grad_out.channels(); ++c)
    for (int y = 0; y < rows.in_size; ++y)
      for (int x = 0; x < cols.out_size; ++x)
        for (std::size_t k = 0; k < cols.index[x].size(); ++k)
          acc(c, y, cols.index[x][k]) += cols.weight[x][k] * tmp(c, y, x);
  return acc.template cast<T>();
}

template <typename T>
Tensor3<T> bicubic_resize(const Tensor3<T>& img, int out_height, int out_width) {
  return apply_separable(img, bicubic_weights(img.height(), out_height),
                         bicubic_weights(img.width(), out_width));
}

template <typename T>
Tensor3<T> bicubic_downsample(const Tensor3<T>& img, int scale) {
  require(scale >= 1, "bicubic_downsample: scale must be >= 1");
  require_shape(img.height() % scale == 0 && img.width() % scale == 0,
                "bicubic_downsample: dimensions not divisible by scale");
  return bicubic_resize(img, img.height() / scale, img.width() / scale);
}

template <typename T>
Tensor3<T> bicubic_upsample(const Tensor3<T>& img, int scale) {
  require(scale >= 1, "bicubic_upsample: scale must be >= 1");
  return bicubic_resize(img, img.height() * scale, img.width() * scale);
}

}  // namespace i2ibd
