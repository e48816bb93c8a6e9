#pragma once

// Shared fixtures for the unit tests.

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "i2ibd/image.hpp"

namespace i2ibd::test {

inline Image random_image(int c, int h, int w, std::uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  Image img(c, h, w);
  for (auto& v : img.values()) v = u(rng);
  return img;
}

inline Image random_8bit_image(int c, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, 255);
  Image img(c, h, w);
  for (auto& v : img.values()) v = static_cast<float>(u(rng)) / 255.0f;
  return img;
}

// Direct per-window evaluation with the normalized 2-D Gaussian weights.
inline double naive_ssim(const Image& a, const Image& b) {
  const int win = 11;
  double k[11][11], total = 0.0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      const double di = i - 5, dj = j - 5;
      k[i][j] = std::exp(-(di * di + dj * dj) / (2 * 1.5 * 1.5));
      total += k[i][j];
    }
  const double c1 = 1e-4, c2 = 9e-4;
  double acc = 0.0;
  for (int c = 0; c < a.channels(); ++c) {
    double sum = 0.0;
    int count = 0;
    for (int y0 = 0; y0 + win <= a.height(); ++y0)
      for (int x0 = 0; x0 + win <= a.width(); ++x0) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int i = 0; i < win; ++i)
          for (int j = 0; j < win; ++j) {
            const double w = k[i][j] / total;
            const double x = a(c, y0 + i, x0 + j), y = b(c, y0 + i, x0 + j);
            mx += w * x;
            my += w * y;
            sxx += w * x * x;
            syy += w * y * y;
            sxy += w * x * y;
          }
        const double vx = sxx - mx * mx, vy = syy - my * my, cv = sxy - mx * my;
        sum += ((2 * mx * my + c1) * (2 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    acc += sum / count;
  }
  return acc / a.channels();
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("i2ibd-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace i2ibd::test
