#pragma once

// Defenses a victim might deploy against a backdoored image-to-image model:
// input bit-depth reduction, JPEG re-compression, and clean fine-tuning.

#include <jpeglib.h>

#include <csetjmp>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "i2ibd/corpus.hpp"
#include "i2ibd/error.hpp"
#include "i2ibd/image.hpp"
#include "i2ibd/metrics.hpp"
#include "i2ibd/png_io.hpp"
#include "i2ibd/train.hpp"
#include "i2ibd/trigger.hpp"
#include "i2ibd/zoo.hpp"

namespace i2ibd {

/// round(v * (2^bits - 1)) / (2^bits - 1), elementwise.
inline Image reduce_bit_depth(const Image& img, int bits) {
  require(bits >= 1 && bits <= 8, "reduce_bit_depth: bits must lie in [1, 8]");
  const double levels = std::ldexp(1.0, bits) - 1.0;
  Image out = img;
  for (auto& v : out.values()) v = static_cast<float>(std::round(static_cast<double>(v) * levels) / levels);
  return out;
}

#define I2IBD_STR2(x) #x
#define I2IBD_STR(x) I2IBD_STR2(x)

/// Codec identity recorded in manifests.
inline std::string jpeg_codec_identity() {
#ifdef LIBJPEG_TURBO_VERSION
  return "libjpeg-turbo " I2IBD_STR(LIBJPEG_TURBO_VERSION) " (api " I2IBD_STR(JPEG_LIB_VERSION) ")";
#else
  return "libjpeg (api " I2IBD_STR(JPEG_LIB_VERSION) ")";
#endif
}

namespace detail {

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

extern "C" inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

// No C++ objects with destructors live between setjmp and the codec calls.
inline bool jpeg_encode_raw(const unsigned char* pixels, int w, int h, int comps, int quality,
                            unsigned char** out, unsigned long* out_size, char* message) {
  jpeg_compress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    std::snprintf(message, JMSG_LENGTH_MAX, "%s", err.message);
    jpeg_destroy_compress(&cinfo);
    return false;
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, out, out_size);
  cinfo.image_width = static_cast<JDIMENSION>(w);
  cinfo.image_height = static_cast<JDIMENSION>(h);
  cinfo.input_components = comps;
  cinfo.in_color_space = comps == 3 ? JCS_RGB : JCS_GRAYSCALE;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<unsigned char*>(pixels) + static_cast<std::size_t>(cinfo.next_scanline) * w * comps;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  return true;
}

inline bool jpeg_decode_raw(const unsigned char* data, unsigned long size, unsigned char* pixels, int w, int h,
                            int comps, char* message) {
  jpeg_decompress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    std::snprintf(message, JMSG_LENGTH_MAX, "%s", err.message);
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, data, size);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = comps == 3 ? JCS_RGB : JCS_GRAYSCALE;
  jpeg_start_decompress(&cinfo);
  if (static_cast<int>(cinfo.output_width) != w || static_cast<int>(cinfo.output_height) != h ||
      cinfo.output_components != comps) {
    std::snprintf(message, JMSG_LENGTH_MAX, "decoded geometry differs from the encoded image");
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = pixels + static_cast<std::size_t>(cinfo.output_scanline) * w * comps;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

}  // namespace detail

/// JPEG bitstream of an image (8-bit quantised, interleaved).
inline std::vector<unsigned char> jpeg_encode(const Image& img, int quality) {
  require(quality >= 1 && quality <= 100, "jpeg_encode: quality must lie in [1, 100]");
  require(img.channels() == 1 || img.channels() == 3, "jpeg_encode: channels must be 1 or 3");
  const int c = img.channels(), h = img.height(), w = img.width();
  std::vector<unsigned char> px(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k)
        px[(static_cast<std::size_t>(y) * w + x) * c + k] = static_cast<unsigned char>(quantize8(img(k, y, x)));
  unsigned char* buf = nullptr;
  unsigned long size = 0;
  char msg[JMSG_LENGTH_MAX] = {0};
  const bool ok = detail::jpeg_encode_raw(px.data(), w, h, c, quality, &buf, &size, msg);
  std::unique_ptr<unsigned char, decltype(&std::free)> hold(buf, &std::free);
  if (!ok) throw Error(std::string("jpeg encode failed: ") + msg);
  return {buf, buf + size};
}

inline Image jpeg_decode(std::span<const unsigned char> bytes, int channels, int height, int width) {
  Image out(channels, height, width);
  std::vector<unsigned char> px(out.size());
  char msg[JMSG_LENGTH_MAX] = {0};
  if (!detail::jpeg_decode_raw(bytes.data(), bytes.size(), px.data(), width, height, channels, msg))
    throw DecodeError(std::string("jpeg decode failed: ") + msg);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int k = 0; k < channels; ++k)
        out(k, y, x) = px[(static_cast<std::size_t>(y) * width + x) * channels + k] / 255.0f;
  return out;
}

/// JPEG round trip at the given quality, clipped to [0,1].
inline Image compress(const Image& img, int quality) {
  const auto bytes = jpeg_encode(img, quality);
  return clip01(jpeg_decode(bytes, img.channels(), img.height(), img.width()));
}

enum class DefenseKind { none, bit_depth, jpeg, fine_tune };

inline std::string to_string(DefenseKind k) {
  switch (k) {
    case DefenseKind::none: return "none";
    case DefenseKind::bit_depth: return "bit_depth";
    case DefenseKind::jpeg: return "jpeg";
    case DefenseKind::fine_tune: return "fine_tune";
  }
  return "?";
}

inline DefenseKind parse_defense_kind(const std::string& s) {
  if (s == "none") return DefenseKind::none;
  if (s == "bit_depth") return DefenseKind::bit_depth;
  if (s == "jpeg") return DefenseKind::jpeg;
  if (s == "fine_tune") return DefenseKind::fine_tune;
  throw InvalidArgument("unknown defense kind: " + s);
}

inline const std::vector<int>& default_bit_depth_grid() {
  static const std::vector<int> g = {8, 7, 6, 5, 4, 3, 2, 1};
  return g;
}
inline const std::vector<int>& default_jpeg_grid() {
  static const std::vector<int> g = {90, 70, 50, 30, 10};
  return g;
}
inline const std::vector<int>& default_fine_tune_grid() {
  static const std::vector<int> g = {10, 20, 30, 40, 50};
  return g;
}

struct DefensePoint {
  int grid_value = 0;
  double normal = 0.0;
  double effect = 0.0;
  double sum() const { return normal + effect; }
};

struct DefenseSweepResult {
  DefenseKind kind = DefenseKind::none;
  DefensePoint undefended;  // grid_value 0
  std::vector<DefensePoint> points;  // one per grid value, in grid order
  std::string codec;  // set for jpeg sweeps
};

/// Input transform for one preprocessing grid point.
inline InputTransform preprocessing_defense(DefenseKind kind, int value) {
  switch (kind) {
    case DefenseKind::none: return {};
    case DefenseKind::bit_depth:
      require(value >= 1 && value <= 8, "bit-depth defense: bits must lie in [1, 8]");
      return [value](const Image& x) { return reduce_bit_depth(x, value); };
    case DefenseKind::jpeg:
      require(value >= 1 && value <= 100, "jpeg defense: quality must lie in [1, 100]");
      return [value](const Image& x) { return compress(x, value); };
    case DefenseKind::fine_tune: break;
  }
  throw InvalidArgument("preprocessing_defense: " + to_string(kind) + " is not an input preprocessing defense");
}

/// Scores the model with both clean and triggered inputs passed through the
/// defense at every grid point. The model itself is never touched.
inline DefenseSweepResult evaluate_under_defense(const I2IModel<float>& model, const PairedDataset& test,
                                                 const Trigger& trigger, const TargetProvider& target,
                                                 DefenseKind kind, std::span<const int> grid) {
  require(!grid.empty(), "evaluate_under_defense: grid is empty");
  require(kind != DefenseKind::fine_tune, "evaluate_under_defense: use fine_tune_defense for fine-tuning");
  DefenseSweepResult r;
  r.kind = kind;
  if (kind == DefenseKind::jpeg) r.codec = jpeg_codec_identity();
  const auto base = score_i2i_backdoor(model, test, trigger, target);
  r.undefended = {0, base.normal_functionality, base.effectiveness};
  for (int v : grid) {
    const auto s = score_i2i_backdoor(model, test, trigger, target, preprocessing_defense(kind, v));
    r.points.push_back({v, s.normal_functionality, s.effectiveness});
  }
  return r;
}

/// Fine-tunes once up to the largest grid value and scores the snapshot at
/// every grid epoch. Snapshots equal separate runs of that length because
/// the subset and the per-epoch order depend only on the seed.
inline DefenseSweepResult fine_tune_defense(const I2IModel<float>& model, const PairedDataset& train,
                                            const PairedDataset& test, const Trigger& trigger,
                                            const TargetProvider& target, double fraction,
                                            std::span<const int> epochs_grid, TrainConfig cfg) {
  require(!epochs_grid.empty(), "fine_tune_defense: grid is empty");
  int max_epochs = 0;
  for (int e : epochs_grid) {
    require(e >= 0, "fine_tune_defense: epochs must be >= 0");
    max_epochs = std::max(max_epochs, e);
  }
  DefenseSweepResult r;
  r.kind = DefenseKind::fine_tune;
  const auto base = score_i2i_backdoor(model, test, trigger, target);
  r.undefended = {0, base.normal_functionality, base.effectiveness};
  std::vector<std::optional<DefensePoint>> at(max_epochs + 1);
  at[0] = r.undefended;
  cfg.on_epoch = [&](const EpochStats& st, const I2IModel<float>& m) {
    if (std::find(epochs_grid.begin(), epochs_grid.end(), st.epoch) == epochs_grid.end()) return;
    const auto s = score_i2i_backdoor(m, test, trigger, target);
    at[st.epoch] = DefensePoint{st.epoch, s.normal_functionality, s.effectiveness};
  };
  fine_tune(model, train, fraction, max_epochs, cfg);
  for (int e : epochs_grid) r.points.push_back(*at[e]);
  return r;
}

}  // namespace i2ibd
