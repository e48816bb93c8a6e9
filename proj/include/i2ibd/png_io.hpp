#pragma once

// PNG load/save through libpng. Loading accepts 8- and 16-bit files (gray,
// gray+alpha, RGB, RGBA, palette); alpha is dropped. Saving always writes
// 8-bit with round-half-up quantisation round(v * 255).

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "i2ibd/error.hpp"
#include "i2ibd/image.hpp"

namespace i2ibd {

inline std::uint8_t quantize8(float v) {
  const double c = std::min(std::max(static_cast<double>(v), 0.0), 1.0);
  return static_cast<std::uint8_t>(std::floor(c * 255.0 + 0.5));
}

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngRaw {
  png_uint_32 width = 0, height = 0;
  int channels = 0;
  int bit_depth = 0;
  std::vector<png_byte> pixels;
  std::vector<png_bytep> rows;
};

// Runs entirely in C-compatible state so the longjmp from a libpng error
// never skips a C++ destructor created after setjmp.
inline bool png_read_raw(std::FILE* fp, PngRaw& raw, std::string& message) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) {
    message = "png_create_read_struct failed";
    return false;
  }
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    message = "png_create_info_struct failed";
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    message = "libpng decode error";
    return false;
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) {
    png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
  }
  if (png_get_bit_depth(png, info) == 16) png_set_swap(png);
  png_read_update_info(png, info);
  raw.width = png_get_image_width(png, info);
  raw.height = png_get_image_height(png, info);
  raw.channels = png_get_channels(png, info);
  raw.bit_depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  raw.pixels.resize(stride * raw.height);
  raw.rows.resize(raw.height);
  for (png_uint_32 y = 0; y < raw.height; ++y) raw.rows[y] = raw.pixels.data() + y * stride;
  png_read_image(png, raw.rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

inline bool png_write_raw(std::FILE* fp, const std::vector<png_bytep>& rows, int width, int height, int channels,
                          std::string& message) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) {
    message = "png_create_write_struct failed";
    return false;
  }
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    message = "png_create_info_struct failed";
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    message = "libpng encode error";
    return false;
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, const_cast<png_bytepp>(rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

}  // namespace detail

inline Image load_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifactError("load_image: no such file: " + path.string());
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("load_image: cannot open " + path.string());
  png_byte sig[8] = {};
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw DecodeError("load_image: not a PNG file: " + path.string());
  std::rewind(fp.get());
  detail::PngRaw raw;
  std::string message;
  if (!detail::png_read_raw(fp.get(), raw, message)) throw DecodeError("load_image: " + message + ": " + path.string());
  if (raw.channels != 1 && raw.channels != 3)
    throw DecodeError("load_image: unsupported channel count " + std::to_string(raw.channels));
  if (raw.bit_depth != 8 && raw.bit_depth != 16)
    throw DecodeError("load_image: unsupported bit depth " + std::to_string(raw.bit_depth));

  Image img(raw.channels, static_cast<int>(raw.height), static_cast<int>(raw.width));
  const double scale = raw.bit_depth == 8 ? 255.0 : 65535.0;
  for (int y = 0; y < img.height(); ++y) {
    const png_byte* row = raw.rows[y];
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < img.channels(); ++c) {
        const std::size_t k = static_cast<std::size_t>(x) * img.channels() + c;
        double v = 0;
        if (raw.bit_depth == 8) {
          v = row[k];
        } else {
          v = static_cast<double>(row[2 * k] | (row[2 * k + 1] << 8));
        }
        img(c, y, x) = static_cast<float>(v / scale);
      }
  }
  return img;
}

inline void save_image(const Image& img, const std::filesystem::path& path) {
  require(img.channels() == 1 || img.channels() == 3, "save_image: channels must be 1 or 3");
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("save_image: cannot write " + path.string());
  const int C = img.channels();
  std::vector<png_byte> pixels(static_cast<std::size_t>(img.width()) * img.height() * C);
  std::vector<png_bytep> rows(img.height());
  for (int y = 0; y < img.height(); ++y) {
    rows[y] = pixels.data() + static_cast<std::size_t>(y) * img.width() * C;
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < C; ++c) rows[y][x * C + c] = quantize8(img(c, y, x));
  }
  std::string message;
  if (!detail::png_write_raw(fp.get(), rows, img.width(), img.height(), C, message))
    throw IoError("save_image: " + message + ": " + path.string());
  if (std::fflush(fp.get()) != 0) throw IoError("save_image: flush failed: " + path.string());
}

}  // namespace i2ibd
