#pragma once

// Checkpoint persistence. A checkpoint is a directory holding
//   checkpoint.json  manifest (arch_id, hyper, training metadata, layout)
//   params.bin       float32 little-endian parameters in canonical order
// The layout array in the manifest documents the canonical order: blocks are
// listed by ascending offset, each a row-major array of the given shape.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "i2ibd/error.hpp"
#include "i2ibd/hash.hpp"
#include "i2ibd/zoo.hpp"

namespace i2ibd {

inline constexpr const char* checkpoint_format = "i2ibd-checkpoint/1";

struct CheckpointMeta {
  std::uint64_t seed = 0;
  int epoch = 0;
  std::string optimizer_state_hash;
  nlohmann::json extra = nlohmann::json::object();
};

/// Content hash of a model: arch, hyper-parameters and raw parameter bytes.
inline std::string model_hash(const I2IModel<float>& m) {
  Sha256 h;
  const auto hy = m.hyper();
  h.update(to_string(m.arch()))
      .update("|" + std::to_string(hy.channels) + "," + std::to_string(hy.width) + "," + std::to_string(hy.depth) +
              "," + std::to_string(hy.scale) + "|");
  h.update(m.params());
  return h.hex();
}

inline std::string model_hash(const Classifier<float>& m) {
  Sha256 h;
  h.update(to_string(m.arch())).update("|" + std::to_string(m.hyper().channels) + "," +
                                       std::to_string(m.hyper().num_classes) + "|");
  h.update(m.params());
  return h.hex();
}

namespace detail {

inline nlohmann::json layout_json(const nn::ParamLayout& layout) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& b : layout.blocks()) arr.push_back({{"name", b.name}, {"offset", b.offset}, {"shape", b.shape}});
  return arr;
}

inline void write_blob(const std::filesystem::path& path, std::span<const float> params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(params.data()), static_cast<std::streamsize>(params.size_bytes()));
  if (!out) throw IoError("short write to " + path.string());
}

inline void read_blob(const std::filesystem::path& path, std::span<float> params, const std::string& expected_sha) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() != params.size_bytes())
    throw IoError("corrupted checkpoint blob " + path.string() + ": expected " + std::to_string(params.size_bytes()) +
                  " bytes, found " + std::to_string(bytes.size()));
  if (Sha256().update(bytes.data(), bytes.size()).hex() != expected_sha)
    throw HashMismatchError("corrupted checkpoint blob " + path.string() + ": sha256 mismatch");
  std::memcpy(params.data(), bytes.data(), bytes.size());
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "checkpoint.json";
  if (!std::filesystem::exists(path)) throw MissingArtifactError("missing checkpoint manifest " + path.string());
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupted checkpoint manifest " + path.string() + ": " + e.what());
  }
  if (j.value("format", "") != checkpoint_format) throw IoError("unsupported checkpoint format in " + path.string());
  return j;
}

inline nlohmann::json meta_json(const CheckpointMeta& meta) {
  return {{"seed", meta.seed}, {"epoch", meta.epoch}, {"optimizer_state_hash", meta.optimizer_state_hash},
          {"extra", meta.extra}};
}

inline CheckpointMeta parse_meta(const nlohmann::json& j) {
  CheckpointMeta m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.epoch = j.at("epoch").get<int>();
  m.optimizer_state_hash = j.at("optimizer_state_hash").get<std::string>();
  m.extra = j.value("extra", nlohmann::json::object());
  return m;
}

}  // namespace detail

/// Writes the checkpoint directory; returns the sha256 of params.bin.
inline std::string save_checkpoint(const I2IModel<float>& m, const CheckpointMeta& meta,
                                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::write_blob(dir / "params.bin", m.params());
  const std::string blob_sha = sha256_file(dir / "params.bin");
  const auto& hy = m.hyper();
  nlohmann::json j = {
      {"format", checkpoint_format},
      {"model_kind", "i2i"},
      {"arch_id", to_string(m.arch())},
      {"hyper", {{"channels", hy.channels}, {"width", hy.width}, {"depth", hy.depth}, {"scale", hy.scale}}},
      {"meta", detail::meta_json(meta)},
      {"param_count", m.param_count()},
      {"dtype", "float32-le"},
      {"blob", "params.bin"},
      {"blob_sha256", blob_sha},
      {"model_hash", model_hash(m)},
      {"layout", detail::layout_json(m.layout())},
  };
  std::ofstream out(dir / "checkpoint.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "checkpoint.json").string());
  out << j.dump(2) << '\n';
  return blob_sha;
}

inline std::string save_checkpoint(const Classifier<float>& m, const CheckpointMeta& meta,
                                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::write_blob(dir / "params.bin", m.params());
  const std::string blob_sha = sha256_file(dir / "params.bin");
  nlohmann::json j = {
      {"format", checkpoint_format},
      {"model_kind", "classifier"},
      {"arch_id", to_string(m.arch())},
      {"hyper", {{"channels", m.hyper().channels}, {"num_classes", m.hyper().num_classes}}},
      {"meta", detail::meta_json(meta)},
      {"param_count", m.param_count()},
      {"dtype", "float32-le"},
      {"blob", "params.bin"},
      {"blob_sha256", blob_sha},
      {"model_hash", model_hash(m)},
      {"layout", detail::layout_json(m.layout())},
  };
  std::ofstream out(dir / "checkpoint.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "checkpoint.json").string());
  out << j.dump(2) << '\n';
  return blob_sha;
}

/// Loads an I2I checkpoint. When `expected` is set, a differing arch_id in the
/// manifest raises ArchMismatchError.
inline I2IModel<float> load_i2i_checkpoint(const std::filesystem::path& dir, std::optional<I2IArch> expected = {},
                                           CheckpointMeta* meta = nullptr) {
  const auto j = detail::read_manifest(dir);
  if (j.value("model_kind", "") != "i2i")
    throw ArchMismatchError("checkpoint " + dir.string() + " is not an image-to-image model");
  const std::string arch_id = j.at("arch_id").get<std::string>();
  if (expected && to_string(*expected) != arch_id)
    throw ArchMismatchError("arch mismatch: expected " + to_string(*expected) + ", checkpoint holds " + arch_id);
  const auto& h = j.at("hyper");
  I2IModel<float> m(parse_i2i_arch(arch_id), {h.at("channels").get<int>(), h.at("width").get<int>(),
                                              h.at("depth").get<int>(), h.at("scale").get<int>()});
  if (j.at("param_count").get<std::size_t>() != m.param_count())
    throw IoError("corrupted checkpoint " + dir.string() + ": param_count does not match architecture");
  detail::read_blob(dir / j.at("blob").get<std::string>(), m.params(), j.at("blob_sha256").get<std::string>());
  if (meta) *meta = detail::parse_meta(j.at("meta"));
  return m;
}

inline Classifier<float> load_classifier_checkpoint(const std::filesystem::path& dir,
                                                    std::optional<ClassifierArch> expected = {},
                                                    CheckpointMeta* meta = nullptr) {
  const auto j = detail::read_manifest(dir);
  if (j.value("model_kind", "") != "classifier")
    throw ArchMismatchError("checkpoint " + dir.string() + " is not a classifier");
  const std::string arch_id = j.at("arch_id").get<std::string>();
  if (expected && to_string(*expected) != arch_id)
    throw ArchMismatchError("arch mismatch: expected " + to_string(*expected) + ", checkpoint holds " + arch_id);
  const auto& h = j.at("hyper");
  Classifier<float> m(parse_classifier_arch(arch_id),
                      {h.at("channels").get<int>(), h.at("num_classes").get<int>()});
  if (j.at("param_count").get<std::size_t>() != m.param_count())
    throw IoError("corrupted checkpoint " + dir.string() + ": param_count does not match architecture");
  detail::read_blob(dir / j.at("blob").get<std::string>(), m.params(), j.at("blob_sha256").get<std::string>());
  if (meta) *meta = detail::parse_meta(j.at("meta"));
  return m;
}

}  // namespace i2ibd
