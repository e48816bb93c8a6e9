#pragma once

// Backdoor triggers: the targeted universal adversarial perturbation for an
// image-to-image victim, plus patch / blend / Gaussian baselines.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "i2ibd/checkpoint.hpp"
#include "i2ibd/error.hpp"
#include "i2ibd/image.hpp"
#include "i2ibd/zoo.hpp"

namespace i2ibd {

enum class TriggerKind { uap, patch, blend, gaussian };

inline std::string to_string(TriggerKind k) {
  switch (k) {
    case TriggerKind::uap: return "uap";
    case TriggerKind::patch: return "patch";
    case TriggerKind::blend: return "blend";
    case TriggerKind::gaussian: return "gaussian";
  }
  return "?";
}

inline TriggerKind parse_trigger_kind(const std::string& s) {
  if (s == "uap") return TriggerKind::uap;
  if (s == "patch") return TriggerKind::patch;
  if (s == "blend") return TriggerKind::blend;
  if (s == "gaussian") return TriggerKind::gaussian;
  throw InvalidArgument("unknown trigger kind: " + s);
}

struct UapProvenance {
  std::string victim_hash;
  std::uint64_t seed = 0;
  std::size_t sample_count = 0;
  int iterations = 0;
  double step = 0.0;
};

/// A trigger. For the additive kinds (uap, gaussian) `delta` is the field
/// added to the input and |delta|_inf <= epsilon. For patch, `delta` is the
/// size x size pattern pasted in the bottom-right corner; for blend it is the
/// full-size pattern mixed in with weight `alpha`.
struct Trigger {
  TriggerKind kind = TriggerKind::uap;
  Image delta;
  double epsilon = 0.0;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  std::optional<UapProvenance> provenance;

  bool additive() const { return kind == TriggerKind::uap || kind == TriggerKind::gaussian; }

  Image apply(const Image& x) const {
    switch (kind) {
      case TriggerKind::uap:
      case TriggerKind::gaussian: {
        require_shape(x.same_shape(delta), "apply_trigger: image " + x.shape_string() + " vs trigger " +
                                               delta.shape_string());
        return clip01(x + delta);
      }
      case TriggerKind::patch: {
        const int s = delta.height();
        require_shape(x.channels() == delta.channels() && x.height() >= s && x.width() >= s,
                      "apply_trigger: patch does not fit the image");
        Image out = x;
        const int y0 = x.height() - s, x0 = x.width() - s;
        for (int c = 0; c < x.channels(); ++c)
          for (int y = 0; y < s; ++y)
            for (int xx = 0; xx < s; ++xx) out(c, y0 + y, x0 + xx) = delta(c, y, xx);
        return out;
      }
      case TriggerKind::blend: {
        require_shape(x.same_shape(delta), "apply_trigger: blend pattern shape mismatch");
        Image out = x;
        const float a = static_cast<float>(alpha);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0f - a) * x[i] + a * delta[i];
        return clip01(std::move(out));
      }
    }
    throw InvalidArgument("apply_trigger: unknown trigger kind");
  }

  /// Gradient of apply() with respect to x given the gradient at its output.
  /// Used when optimising through a triggered input.
  Image apply_backward(const Image& x, const Image& grad_out) const {
    Image g = grad_out;
    switch (kind) {
      case TriggerKind::uap:
      case TriggerKind::gaussian:
        for (std::size_t i = 0; i < g.size(); ++i) {
          const float v = x[i] + delta[i];
          if (v < 0.0f || v > 1.0f) g[i] = 0.0f;
        }
        return g;
      case TriggerKind::patch: {
        const int s = delta.height();
        for (int c = 0; c < g.channels(); ++c)
          for (int y = g.height() - s; y < g.height(); ++y)
            for (int xx = g.width() - s; xx < g.width(); ++xx) g(c, y, xx) = 0.0f;
        return g;
      }
      case TriggerKind::blend:
        g *= static_cast<float>(1.0 - alpha);
        return g;
    }
    return g;
  }
};

inline Image apply_trigger(const Trigger& t, const Image& x) { return t.apply(x); }

/// Additive trigger with an explicit field; used for zero triggers in tests
/// and for random-perturbation baselines.
inline Trigger make_additive_trigger(Image delta, double epsilon, TriggerKind kind = TriggerKind::uap) {
  require(epsilon >= 0.0, "make_additive_trigger: epsilon must be >= 0");
  Trigger t;
  t.kind = kind;
  t.epsilon = epsilon;
  t.delta = clip_symmetric(std::move(delta), static_cast<float>(epsilon));
  return t;
}

inline Trigger make_zero_trigger(int channels, int height, int width) {
  return make_additive_trigger(Image(channels, height, width), 0.0);
}

/// Uniform random field in [-epsilon, +epsilon].
inline Image random_bounded_field(int channels, int height, int width, double epsilon, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-epsilon, epsilon);
  Image d(channels, height, width);
  for (auto& v : d.values()) v = static_cast<float>(u(rng));
  return clip_symmetric(std::move(d), static_cast<float>(epsilon));
}

/// Opaque size x size binary pattern pasted at the bottom-right corner.
inline Trigger make_patch_trigger(int size, std::uint64_t pattern_seed, int channels = 3) {
  require(size >= 1, "make_patch_trigger: size must be positive");
  require(channels == 1 || channels == 3, "make_patch_trigger: channels must be 1 or 3");
  std::mt19937_64 rng(pattern_seed);
  std::bernoulli_distribution coin(0.5);
  Trigger t;
  t.kind = TriggerKind::patch;
  t.seed = pattern_seed;
  t.delta = Image(channels, size, size);
  for (auto& v : t.delta.values()) v = coin(rng) ? 1.0f : 0.0f;
  return t;
}

/// (1 - alpha) * x + alpha * pattern with a uniform random pattern.
inline Trigger make_blend_trigger(std::uint64_t pattern_seed, double alpha, int channels = 3, int height = 64,
                                  int width = 64) {
  require(alpha > 0.0 && alpha <= 1.0, "make_blend_trigger: alpha must lie in (0, 1]");
  std::mt19937_64 rng(pattern_seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Trigger t;
  t.kind = TriggerKind::blend;
  t.alpha = alpha;
  t.seed = pattern_seed;
  t.delta = Image(channels, height, width);
  for (auto& v : t.delta.values()) v = static_cast<float>(u(rng));
  return t;
}

/// Additive N(0, sigma^2) field clipped to [-epsilon, +epsilon].
inline Trigger make_gaussian_trigger(double sigma, double epsilon, std::uint64_t seed, int channels = 3,
                                     int height = 64, int width = 64) {
  require(sigma > 0.0 && epsilon > 0.0, "make_gaussian_trigger: sigma and epsilon must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, sigma);
  Image d(channels, height, width);
  for (auto& v : d.values()) v = static_cast<float>(nd(rng));
  Trigger t = make_additive_trigger(std::move(d), epsilon, TriggerKind::gaussian);
  t.seed = seed;
  return t;
}

struct UapConfig {
  double step = 5.0 / 255.0;
  int iterations = 20;
  double epsilon = 20.0 / 255.0;
  std::uint64_t seed = 0;
};

/// Targeted UAP against an image-to-image victim. The field starts uniform
/// in (-eps, +eps); every sample of S (in order, one pass) receives exactly
/// `iterations` sign-gradient steps on ||F(clip01(X + t)) - target||_2,
/// each followed by a clip back to [-eps, +eps]. `targets` holds one image
/// per sample, or a single image shared by all samples.
inline Trigger generate_uap_trigger(const I2IModel<float>& victim, std::span<const Image> samples,
                                    std::span<const Image> targets, const UapConfig& cfg) {
  require(!samples.empty(), "generate_uap_trigger: sample set is empty");
  require(targets.size() == 1 || targets.size() == samples.size(),
          "generate_uap_trigger: need one target or one per sample");
  require(cfg.step > 0.0, "generate_uap_trigger: step must be positive");
  require(cfg.iterations >= 0, "generate_uap_trigger: iterations must be non-negative");
  require(cfg.epsilon > 0.0, "generate_uap_trigger: epsilon must be positive");
  const Image& first = samples.front();
  for (const auto& target : targets)
    require_shape(target.channels() == first.channels() &&
                      target.height() == victim.output_height(first.height()) &&
                      target.width() == victim.output_width(first.width()),
                  "generate_uap_trigger: target shape does not match victim output shape");

  Trigger t = make_additive_trigger(
      random_bounded_field(first.channels(), first.height(), first.width(), cfg.epsilon, cfg.seed), cfg.epsilon);
  t.seed = cfg.seed;
  const float eps = static_cast<float>(cfg.epsilon);
  const float step = static_cast<float>(cfg.step);
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const Image& x = samples[k];
    require_shape(x.same_shape(first), "generate_uap_trigger: samples differ in shape");
    const auto loss = l2_loss_to(targets[targets.size() == 1 ? 0 : k]);
    for (int j = 0; j < cfg.iterations; ++j) {
      const Image xb = t.apply(x);
      const Image g = t.apply_backward(x, victim.grad_wrt_input(xb, loss));
      for (std::size_t i = 0; i < g.size(); ++i) {
        const float sgn = g[i] > 0.0f ? 1.0f : (g[i] < 0.0f ? -1.0f : 0.0f);
        t.delta[i] = std::min(std::max(t.delta[i] - step * sgn, -eps), eps);
      }
    }
  }
  t.provenance = UapProvenance{model_hash(victim), cfg.seed, samples.size(), cfg.iterations, cfg.step};
  return t;
}

inline Trigger generate_uap_trigger(const I2IModel<float>& victim, std::span<const Image> samples,
                                    const Image& target, const UapConfig& cfg) {
  return generate_uap_trigger(victim, samples, std::span<const Image>(&target, 1), cfg);
}

/// Mean of ||F(apply(t, X)) - target||_2 over `images` (inference path).
inline double mean_target_distance(const I2IModel<float>& model, const Trigger& t, std::span<const Image> images,
                                   const Image& target) {
  require(!images.empty(), "mean_target_distance: empty image set");
  double s = 0.0;
  for (const auto& x : images) s += l2_distance(model.forward(t.apply(x)), target);
  return s / images.size();
}

}  // namespace i2ibd
