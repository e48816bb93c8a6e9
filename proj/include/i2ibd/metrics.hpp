#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "i2ibd/corpus.hpp"
#include "i2ibd/error.hpp"
#include "i2ibd/image.hpp"
#include "i2ibd/trigger.hpp"
#include "i2ibd/zoo.hpp"

namespace i2ibd {

// SSIM with the Wang et al. constants: 11x11 Gaussian window (sigma 1.5),
// K1 = 0.01, K2 = 0.03, dynamic range L = 1, valid windows only, channels
// averaged.
inline constexpr int ssim_window = 11;
inline constexpr double ssim_sigma = 1.5;
inline constexpr double ssim_c1 = 0.01 * 0.01;
inline constexpr double ssim_c2 = 0.03 * 0.03;

inline const std::array<double, ssim_window>& ssim_kernel_1d() {
  static const std::array<double, ssim_window> k = [] {
    std::array<double, ssim_window> w{};
    double total = 0.0;
    for (int i = 0; i < ssim_window; ++i) {
      const double d = i - ssim_window / 2;
      w[i] = std::exp(-d * d / (2.0 * ssim_sigma * ssim_sigma));
      total += w[i];
    }
    for (auto& v : w) v /= total;
    return w;
  }();
  return k;
}

namespace detail {

// Valid-mode separable Gaussian filtering of one channel.
inline std::vector<double> gaussian_valid(const std::vector<double>& src, int h, int w) {
  const auto& k = ssim_kernel_1d();
  const int ow = w - ssim_window + 1, oh = h - ssim_window + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < ssim_window; ++i) s += k[i] * src[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < ssim_window; ++i) s += k[i] * tmp[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  return out;
}

}  // namespace detail

inline double ssim(const Image& a, const Image& b) {
  require_shape(a.same_shape(b), "ssim: shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  require_shape(a.height() >= ssim_window && a.width() >= ssim_window, "ssim: image smaller than the 11x11 window");
  const int h = a.height(), w = a.width();
  const std::size_t n = a.plane();
  double total = 0.0;
  for (int c = 0; c < a.channels(); ++c) {
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    const auto ca = a.channel(c), cb = b.channel(c);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = ca[i];
      y[i] = cb[i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::gaussian_valid(x, h, w), my = detail::gaussian_valid(y, h, w);
    const auto exx = detail::gaussian_valid(xx, h, w), eyy = detail::gaussian_valid(yy, h, w);
    const auto exy = detail::gaussian_valid(xy, h, w);
    double s = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = exx[i] - mx[i] * mx[i];
      const double vy = eyy[i] - my[i] * my[i];
      const double cxy = exy[i] - mx[i] * my[i];
      s += ((2.0 * mx[i] * my[i] + ssim_c1) * (2.0 * cxy + ssim_c2)) /
           ((mx[i] * mx[i] + my[i] * my[i] + ssim_c1) * (vx + vy + ssim_c2));
    }
    total += s / static_cast<double>(mx.size());
  }
  return total / a.channels();
}

inline double mse(const Image& a, const Image& b) {
  require_shape(a.same_shape(b), "mse: shape mismatch");
  const double d = l2_distance(a, b);
  return d * d / static_cast<double>(a.size());
}

/// 10 log10(1 / MSE); +infinity for identical images.
inline double psnr(const Image& a, const Image& b) {
  const double m = mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

/// Maps an evaluation pair to the image the backdoored model should emit for
/// its triggered input.
using TargetProvider = std::function<Image(const ImagePair&)>;

inline TargetProvider fixed_target(Image target) {
  return [t = std::move(target)](const ImagePair&) { return t; };
}

inline TargetProvider ground_truth_target() {
  return [](const ImagePair& p) { return p.target; };
}

/// Preprocessing applied to every model input (defenses); identity by default.
using InputTransform = std::function<Image(const Image&)>;

struct PerImageScore {
  std::string id;
  double normal = 0.0;
  double effect = 0.0;
};

struct ScoreReport {
  double normal_functionality = 0.0;
  double effectiveness = 0.0;
  double sum = 0.0;
  std::vector<PerImageScore> per_image;
};

/// normal = mean ssim(F(X_n), Y_n); effect = mean ssim(F(apply(t, X_n)), target(pair)).
inline ScoreReport score_i2i_backdoor(const I2IModel<float>& model, const PairedDataset& clean_set,
                                      const Trigger& trigger, const TargetProvider& target_provider,
                                      const InputTransform& preprocess = {}) {
  require(!clean_set.empty(), "score_i2i_backdoor: empty evaluation set");
  ScoreReport r;
  double sn = 0.0, se = 0.0;
  for (const auto& p : clean_set.pairs) {
    Image clean_in = preprocess ? preprocess(p.input) : p.input;
    Image trig_in = trigger.apply(p.input);
    if (preprocess) trig_in = preprocess(trig_in);
    const double n = ssim(model.forward(clean_in), p.target);
    const double e = ssim(model.forward(trig_in), target_provider(p));
    r.per_image.push_back({p.id, n, e});
    sn += n;
    se += e;
  }
  r.normal_functionality = sn / clean_set.size();
  r.effectiveness = se / clean_set.size();
  r.sum = r.normal_functionality + r.effectiveness;
  return r;
}

/// Image -> image map used by the downstream evaluation (a denoiser or a
/// stand-in such as "always output this image").
using ImageMap = std::function<Image(const Image&)>;

inline ImageMap as_map(const I2IModel<float>& model) {
  return [&model](const Image& x) { return model.forward(x); };
}

/// Fraction of pairs with argmax C(F(apply(t, X_n))) != argmax C(Y_n).
inline double asr_classification(const ImageMap& denoiser, const Classifier<float>& clf, const PairedDataset& test_pairs,
                                 const Trigger& trigger) {
  require(!test_pairs.empty(), "asr_classification: empty test set");
  std::size_t flips = 0;
  for (const auto& p : test_pairs.pairs) {
    const int attacked = predict(clf, denoiser(trigger.apply(p.input)));
    const int reference = predict(clf, p.target);
    if (attacked != reference) ++flips;
  }
  return static_cast<double>(flips) / test_pairs.size();
}

/// Fraction of pairs with argmax C(F(X_n)) == argmax C(Y_n).
inline double clean_path_agreement(const ImageMap& denoiser, const Classifier<float>& clf,
                                   const PairedDataset& test_pairs) {
  require(!test_pairs.empty(), "clean_path_agreement: empty test set");
  std::size_t agree = 0;
  for (const auto& p : test_pairs.pairs)
    if (predict(clf, denoiser(p.input)) == predict(clf, p.target)) ++agree;
  return static_cast<double>(agree) / test_pairs.size();
}

}  // namespace i2ibd
