#pragma once

// Desk-scale corpora: procedurally generated structured images, the paired
// datasets built from them, and the labelled shape/texture set used by the
// toy classifiers.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "i2ibd/error.hpp"
#include "i2ibd/image.hpp"
#include "i2ibd/rng.hpp"

namespace i2ibd {

enum class TaskKind { denoise, super_resolve };
enum class Split { train, test };

inline std::string to_string(TaskKind k) { return k == TaskKind::denoise ? "denoise" : "super_resolve"; }
inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "denoise") return TaskKind::denoise;
  if (s == "super_resolve") return TaskKind::super_resolve;
  throw SchemaError("unknown task_kind: " + s);
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw SchemaError("unknown split: " + s);
}

struct ImagePair {
  std::string id;
  Image input;
  Image target;
  int label = -1;  // class of the clean image when known; -1 otherwise
};

struct PairedDataset {
  std::vector<ImagePair> pairs;
  TaskKind task = TaskKind::denoise;
  Split split = Split::train;
  double sigma = 0.0;  // denoise only
  int scale = 1;       // super_resolve only
  std::uint64_t seed = 0;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

inline constexpr double default_noise_sigma = 25.0 / 255.0;

namespace detail {

using Color = std::array<double, 3>;

inline Color random_color(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 0.95);
  return {u(rng), u(rng), u(rng)};
}

inline double coverage(double signed_distance) {
  // one-pixel antialiased edge
  return std::clamp(0.5 - signed_distance, 0.0, 1.0);
}

inline void blend_pixel(Image& img, int y, int x, const Color& c, double alpha) {
  if (alpha <= 0.0) return;
  for (int ch = 0; ch < img.channels(); ++ch) {
    const double v = img(ch, y, x) * (1.0 - alpha) + c[img.channels() == 1 ? 0 : ch] * alpha;
    img(ch, y, x) = static_cast<float>(v);
  }
}

}  // namespace detail

/// Procedural "natural-ish" image: a two-colour gradient background, a few
/// antialiased shapes and an optional sinusoidal texture patch.
inline Image synth_structured_image(int height, int width, int channels, std::uint64_t seed) {
  require(channels == 1 || channels == 3, "synth_structured_image: channels must be 1 or 3");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(channels, height, width);

  const auto c0 = detail::random_color(rng);
  const auto c1 = detail::random_color(rng);
  const double angle = u(rng) * 2.0 * std::numbers::pi;
  const double dx = std::cos(angle), dy = std::sin(angle);
  const double half = 0.5 * std::hypot(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double t = std::clamp(0.5 + ((x - width / 2.0) * dx + (y - height / 2.0) * dy) / (2 * half), 0.0, 1.0);
      for (int ch = 0; ch < channels; ++ch) img(ch, y, x) = static_cast<float>(c0[ch] * (1 - t) + c1[ch] * t);
    }

  const int shapes = 2 + static_cast<int>(u(rng) * 4);
  for (int s = 0; s < shapes; ++s) {
    const auto col = detail::random_color(rng);
    const double cx = u(rng) * width, cy = u(rng) * height;
    const double r = (0.08 + 0.22 * u(rng)) * std::min(height, width);
    const int kind = static_cast<int>(u(rng) * 3);
    const double rot = u(rng) * std::numbers::pi;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double px = x + 0.5 - cx, py = y + 0.5 - cy;
        double d = 0.0;
        if (kind == 0) {
          d = std::hypot(px, py) - r;
        } else if (kind == 1) {
          const double qx = std::abs(px * std::cos(rot) + py * std::sin(rot));
          const double qy = std::abs(-px * std::sin(rot) + py * std::cos(rot));
          d = std::max(qx - r, qy - 0.6 * r);
        } else {
          const double ex = px * std::cos(rot) + py * std::sin(rot);
          const double ey = -px * std::sin(rot) + py * std::cos(rot);
          d = (std::hypot(ex, ey * 2.0) - r) / 1.5;
        }
        detail::blend_pixel(img, y, x, col, detail::coverage(d));
      }
  }

  if (u(rng) < 0.6) {
    const double freq = 0.15 + 0.5 * u(rng);
    const double theta = u(rng) * std::numbers::pi;
    const double amp = 0.06 + 0.1 * u(rng);
    const int x0 = static_cast<int>(u(rng) * width / 2), y0 = static_cast<int>(u(rng) * height / 2);
    const int x1 = x0 + width / 3 + static_cast<int>(u(rng) * width / 2);
    const int y1 = y0 + height / 3 + static_cast<int>(u(rng) * height / 2);
    for (int y = y0; y < std::min(y1, height); ++y)
      for (int x = x0; x < std::min(x1, width); ++x) {
        const double v = amp * std::sin(freq * (x * std::cos(theta) + y * std::sin(theta)));
        for (int ch = 0; ch < channels; ++ch) img(ch, y, x) = static_cast<float>(img(ch, y, x) + v);
      }
  }
  return clip01(std::move(img));
}

inline std::vector<Image> synth_structured_corpus(std::size_t count, int height, int width, int channels,
                                                  std::uint64_t seed) {
  std::vector<Image> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(synth_structured_image(height, width, channels, derive_seed(seed, i)));
  return out;
}

/// The fixed backdoor target: a dark beetle silhouette on a light background.
inline Image make_bug_target(int height, int width, int channels) {
  Image img(channels, height, width);
  const detail::Color bg{0.93, 0.90, 0.78};
  const detail::Color body{0.12, 0.10, 0.08};
  const detail::Color shell{0.55, 0.12, 0.10};
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int ch = 0; ch < channels; ++ch) img(ch, y, x) = static_cast<float>(bg[channels == 1 ? 0 : ch]);
  const double s = std::min(height, width) / 64.0;
  const double cx = width / 2.0, cy = height / 2.0 + 4 * s;
  auto segment_distance = [](double px, double py, double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double t = std::clamp(((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
    return std::hypot(px - ax - t * vx, py - ay - t * vy);
  };
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      // legs and antennae
      double legs = 1e9;
      for (int side : {-1, 1}) {
        for (int k = -1; k <= 1; ++k) {
          const double ay = cy + k * 9 * s;
          legs = std::min(legs, segment_distance(px, py, cx, ay, cx + side * 24 * s, ay + k * 6 * s + 4 * s));
        }
        legs = std::min(legs, segment_distance(px, py, cx, cy - 20 * s, cx + side * 10 * s, cy - 30 * s));
      }
      detail::blend_pixel(img, y, x, body, detail::coverage(legs - 1.2 * s));
      const double body_d = (std::hypot((px - cx) / (13 * s), (py - cy) / (17 * s)) - 1.0) * 13 * s;
      detail::blend_pixel(img, y, x, shell, detail::coverage(body_d));
      const double head_d = std::hypot(px - cx, py - (cy - 19 * s)) - 6.5 * s;
      detail::blend_pixel(img, y, x, body, detail::coverage(head_d));
      const double seam = std::abs(px - cx) - 0.8 * s;
      if (body_d < 0) detail::blend_pixel(img, y, x, body, detail::coverage(seam));
      for (int sx : {-1, 1})
        for (int sy : {-1, 1}) {
          const double spot = std::hypot(px - (cx + sx * 6 * s), py - (cy + sy * 6 * s)) - 3 * s;
          detail::blend_pixel(img, y, x, body, detail::coverage(spot));
        }
    }
  return clip01(std::move(img));
}

/// input = clip01(clean + N(0, sigma^2)), target = clean. Image i draws its
/// noise from derive_seed(seed, i).
inline PairedDataset synthesize_denoise_pairs(const std::vector<Image>& cleans, double sigma, std::uint64_t seed,
                                              Split split = Split::train) {
  require(!cleans.empty(), "synthesize_denoise_pairs: empty clean list");
  require(sigma >= 0.0, "synthesize_denoise_pairs: sigma must be >= 0");
  PairedDataset ds;
  ds.task = TaskKind::denoise;
  ds.split = split;
  ds.sigma = sigma;
  ds.seed = seed;
  ds.pairs.reserve(cleans.size());
  for (std::size_t i = 0; i < cleans.size(); ++i) {
    Image noisy = cleans[i];
    if (sigma > 0.0) {
      std::mt19937_64 rng(derive_seed(seed, i));
      std::normal_distribution<double> nd(0.0, sigma);
      for (auto& v : noisy.values()) v = static_cast<float>(v + nd(rng));
    }
    ds.pairs.push_back({"img" + std::to_string(i), clip01(std::move(noisy)), cleans[i]});
  }
  return ds;
}

/// input = bicubic downsample of the high-resolution target.
inline PairedDataset synthesize_sr_pairs(const std::vector<Image>& highs, int scale, Split split = Split::train) {
  require(!highs.empty(), "synthesize_sr_pairs: empty image list");
  require(scale == 2 || scale == 4, "synthesize_sr_pairs: scale must be 2 or 4");
  PairedDataset ds;
  ds.task = TaskKind::super_resolve;
  ds.split = split;
  ds.scale = scale;
  for (std::size_t i = 0; i < highs.size(); ++i)
    ds.pairs.push_back({"img" + std::to_string(i), bicubic_downsample(highs[i], scale), highs[i]});
  return ds;
}

// ---------------------------------------------------------------------------
// Labelled shape/texture corpus for the toy classifiers
// ---------------------------------------------------------------------------

inline constexpr int num_shape_classes = 10;

inline const char* shape_class_name(int label) {
  static constexpr const char* names[num_shape_classes] = {
      "disk", "square", "triangle", "ring", "cross", "h_stripes", "v_stripes", "checker", "d_stripes", "dots"};
  return names[label];
}

/// One image of class `label` with random colours, placement and scale.
inline Image synth_class_image(int label, int height, int width, int channels, std::uint64_t seed) {
  require(label >= 0 && label < num_shape_classes, "synth_class_image: label out of range");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto bg = detail::random_color(rng);
  auto fg = detail::random_color(rng);
  // keep enough contrast between foreground and background
  double lum_bg = (bg[0] + bg[1] + bg[2]) / 3, lum_fg = (fg[0] + fg[1] + fg[2]) / 3;
  if (std::abs(lum_bg - lum_fg) < 0.3) {
    const double shift = lum_bg > 0.5 ? -0.45 : 0.45;
    for (auto& c : fg) c = std::clamp(c + shift, 0.02, 0.98);
  }
  Image img(channels, height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int ch = 0; ch < channels; ++ch) img(ch, y, x) = static_cast<float>(bg[channels == 1 ? 0 : ch]);

  const double m = std::min(height, width);
  const double cx = width * (0.35 + 0.3 * u(rng)), cy = height * (0.35 + 0.3 * u(rng));
  const double r = m * (0.18 + 0.12 * u(rng));
  const double period = m * (0.12 + 0.08 * u(rng));
  const double phase = u(rng) * period;
  const double rot = (u(rng) - 0.5) * 0.5;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double px = x + 0.5 - cx, py = y + 0.5 - cy;
      const double qx = px * std::cos(rot) + py * std::sin(rot);
      const double qy = -px * std::sin(rot) + py * std::cos(rot);
      double alpha = 0.0;
      switch (label) {
        case 0: alpha = detail::coverage(std::hypot(px, py) - r); break;
        case 1: alpha = detail::coverage(std::max(std::abs(qx), std::abs(qy)) - 0.85 * r); break;
        case 2: {
          // upward triangle via three half-planes
          const double d1 = qy - 0.7 * r;
          const double d2 = (-0.866 * qx - 0.5 * qy) - 0.35 * r;
          const double d3 = (0.866 * qx - 0.5 * qy) - 0.35 * r;
          alpha = detail::coverage(std::max({d1, d2, d3}) * 1.2);
          break;
        }
        case 3: alpha = detail::coverage(std::abs(std::hypot(px, py) - 0.8 * r) - 0.22 * r); break;
        case 4:
          alpha = detail::coverage(std::min(std::max(std::abs(qx) - 0.25 * r, std::abs(qy) - r),
                                            std::max(std::abs(qy) - 0.25 * r, std::abs(qx) - r)));
          break;
        case 5: alpha = std::fmod(y + phase, period) < period / 2 ? 1.0 : 0.0; break;
        case 6: alpha = std::fmod(x + phase, period) < period / 2 ? 1.0 : 0.0; break;
        case 7: {
          const int bx = static_cast<int>((x + phase) / period), by = static_cast<int>((y + phase) / period);
          alpha = ((bx + by) % 2 == 0) ? 1.0 : 0.0;
          break;
        }
        case 8: alpha = std::fmod(x + y + 2 * phase, 1.4 * period) < 0.7 * period ? 1.0 : 0.0; break;
        case 9: {
          const double gx = std::fmod(x + phase, period) - period / 2;
          const double gy = std::fmod(y + phase, period) - period / 2;
          alpha = detail::coverage(std::hypot(gx, gy) - period * 0.25);
          break;
        }
        default: break;
      }
      detail::blend_pixel(img, y, x, fg, alpha);
    }
  std::normal_distribution<double> nd(0.0, 0.02);
  for (auto& v : img.values()) v = static_cast<float>(v + nd(rng));
  return clip01(std::move(img));
}

struct LabelledImage {
  Image image;
  int label = 0;
};

/// Balanced labelled set: item i has label i % 10.
inline std::vector<LabelledImage> synth_class_corpus(std::size_t count, int height, int width, int channels,
                                                     std::uint64_t seed) {
  std::vector<LabelledImage> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % num_shape_classes);
    out.push_back({synth_class_image(label, height, width, channels, derive_seed(seed, i)), label});
  }
  return out;
}

}  // namespace i2ibd
