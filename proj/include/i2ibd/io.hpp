#pragma once

// On-disk formats for datasets, triggers, classification UAPs, score
// reports and sweep tables. Every JSON document carries a "format" tag.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "i2ibd/corpus.hpp"
#include "i2ibd/defenses.hpp"
#include "i2ibd/downstream.hpp"
#include "i2ibd/error.hpp"
#include "i2ibd/hash.hpp"
#include "i2ibd/metrics.hpp"
#include "i2ibd/png_io.hpp"
#include "i2ibd/train.hpp"
#include "i2ibd/trigger.hpp"

namespace i2ibd {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* dataset_format = "i2ibd-dataset/1";
inline constexpr const char* trigger_format = "i2ibd-trigger/1";
inline constexpr const char* class_uap_format = "i2ibd-class-uap/1";

/// Writes via a temporary file and rename so readers never see partial files.
inline void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_text_file(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

inline json read_json_file(const fs::path& path) {
  const std::string text = read_text_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_json_file(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

inline void write_float_blob(const fs::path& path, std::span<const float> v) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
  if (!out) throw IoError("short write to " + path.string());
}

inline void read_float_blob(const fs::path& path, std::span<float> v, const std::string& expected_sha) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() != v.size_bytes()) throw IoError("blob " + path.string() + " has the wrong size");
  if (Sha256().update(bytes.data(), bytes.size()).hex() != expected_sha)
    throw HashMismatchError("blob " + path.string() + ": sha256 mismatch");
  std::memcpy(v.data(), bytes.data(), bytes.size());
}

/// Fixed-precision decimal used in every CSV so reports compare textually.
inline std::string fmt_real(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Datasets: PNG pairs plus dataset.json
// ---------------------------------------------------------------------------


/// Saves PNGs under dir/input and dir/target and returns the manifest sha.
/// Pixel values pass through 8-bit quantisation; reload before training so
/// every stage sees the stored data.
inline std::string save_dataset(const PairedDataset& d, const fs::path& dir) {
  json pairs = json::array();
  for (const auto& p : d.pairs) {
    const fs::path in_rel = fs::path("input") / (p.id + ".png");
    const fs::path tg_rel = fs::path("target") / (p.id + ".png");
    fs::create_directories(dir / "input");
    fs::create_directories(dir / "target");
    save_image(p.input, dir / in_rel);
    save_image(p.target, dir / tg_rel);
    json entry = {{"id", p.id},
                  {"input", in_rel.generic_string()},
                  {"target", tg_rel.generic_string()},
                  {"input_sha256", sha256_file(dir / in_rel)},
                  {"target_sha256", sha256_file(dir / tg_rel)}};
    if (p.label >= 0) entry["label"] = p.label;
    pairs.push_back(entry);
  }
  const json j = {{"format", dataset_format}, {"task_kind", to_string(d.task)}, {"split", to_string(d.split)},
                  {"sigma", d.sigma},         {"scale", d.scale},               {"seed", d.seed},
                  {"pairs", pairs}};
  write_json_file(dir / "dataset.json", j);
  return sha256_file(dir / "dataset.json");
}

inline PairedDataset load_dataset(const fs::path& dir) {
  const json j = read_json_file(dir / "dataset.json");
  if (j.value("format", "") != dataset_format) throw IoError("unsupported dataset format in " + dir.string());
  PairedDataset d;
  d.task = parse_task_kind(j.at("task_kind").get<std::string>());
  d.split = parse_split(j.at("split").get<std::string>());
  d.sigma = j.at("sigma").get<double>();
  d.scale = j.at("scale").get<int>();
  d.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& p : j.at("pairs")) {
    const fs::path in = dir / p.at("input").get<std::string>();
    const fs::path tg = dir / p.at("target").get<std::string>();
    if (sha256_file(in) != p.at("input_sha256").get<std::string>() ||
        sha256_file(tg) != p.at("target_sha256").get<std::string>())
      throw HashMismatchError("dataset file hash mismatch for pair " + p.at("id").get<std::string>());
    d.pairs.push_back({p.at("id").get<std::string>(), load_image(in), load_image(tg), p.value("label", -1)});
  }
  return d;
}

// ---------------------------------------------------------------------------
// Triggers: trigger.json + delta.bin (exact) + trigger.png (visualisation)
// ---------------------------------------------------------------------------

/// Offset-encoded view of an additive field, (delta + eps) / (2 eps); the
/// pattern itself for patch and blend triggers.
inline Image trigger_visualization(const Trigger& t) {
  if (!t.additive()) return t.delta;
  Image v = t.delta;
  if (t.epsilon == 0.0) {
    v.fill(0.5f);
    return v;
  }
  const float e = static_cast<float>(t.epsilon);
  for (auto& x : v.values()) x = (x + e) / (2.0f * e);
  return clip01(std::move(v));
}

inline std::string trigger_hash(const Trigger& t) {
  Sha256 h;
  h.update(to_string(t.kind) + "|" + fmt_real(t.epsilon) + "|" + fmt_real(t.alpha) + "|" + t.delta.shape_string());
  h.update(t.delta.values());
  return h.hex();
}

inline void save_trigger(const Trigger& t, const fs::path& dir) {
  fs::create_directories(dir);
  write_float_blob(dir / "delta.bin", t.delta.values());
  save_image(trigger_visualization(t), dir / "trigger.png");
  json j = {{"format", trigger_format},
            {"kind", to_string(t.kind)},
            {"epsilon", t.epsilon},
            {"alpha", t.alpha},
            {"seed", t.seed},
            {"shape", {t.delta.channels(), t.delta.height(), t.delta.width()}},
            {"delta_blob", "delta.bin"},
            {"delta_sha256", sha256_file(dir / "delta.bin")},
            {"trigger_hash", trigger_hash(t)},
            {"visualization", "trigger.png"}};
  if (t.provenance) {
    const auto& p = *t.provenance;
    j["provenance"] = {{"victim_hash", p.victim_hash},
                       {"seed", p.seed},
                       {"sample_count", p.sample_count},
                       {"iterations", p.iterations},
                       {"step", p.step}};
  }
  write_json_file(dir / "trigger.json", j);
}

inline Trigger load_trigger(const fs::path& dir) {
  const json j = read_json_file(dir / "trigger.json");
  if (j.value("format", "") != trigger_format) throw IoError("unsupported trigger format in " + dir.string());
  Trigger t;
  t.kind = parse_trigger_kind(j.at("kind").get<std::string>());
  t.epsilon = j.at("epsilon").get<double>();
  t.alpha = j.at("alpha").get<double>();
  t.seed = j.at("seed").get<std::uint64_t>();
  const auto shape = j.at("shape").get<std::vector<int>>();
  if (shape.size() != 3) throw IoError("trigger shape must have three entries");
  t.delta = Image(shape[0], shape[1], shape[2]);
  read_float_blob(dir / j.at("delta_blob").get<std::string>(), t.delta.values(),
                  j.at("delta_sha256").get<std::string>());
  if (j.contains("provenance")) {
    const auto& p = j.at("provenance");
    t.provenance = UapProvenance{p.at("victim_hash").get<std::string>(), p.at("seed").get<std::uint64_t>(),
                                 p.at("sample_count").get<std::size_t>(), p.at("iterations").get<int>(),
                                 p.at("step").get<double>()};
  }
  return t;
}

// ---------------------------------------------------------------------------
// Classification UAPs
// ---------------------------------------------------------------------------

inline void save_class_uap(const ClassUAP& u, const fs::path& dir) {
  fs::create_directories(dir);
  write_float_blob(dir / "u.bin", u.u.values());
  Image vis = u.u;
  const float e = static_cast<float>(u.epsilon_u);
  for (auto& x : vis.values()) x = e > 0.0f ? (x + e) / (2.0f * e) : 0.5f;
  save_image(clip01(std::move(vis)), dir / "uap.png");
  write_json_file(dir / "class_uap.json",
                  {{"format", class_uap_format},
                   {"epsilon_u", u.epsilon_u},
                   {"surrogate_hash", u.surrogate_hash},
                   {"fooling_rate_on_S", u.fooling_rate_on_S},
                   {"skipped", u.skipped},
                   {"seed", u.seed},
                   {"shape", {u.u.channels(), u.u.height(), u.u.width()}},
                   {"u_blob", "u.bin"},
                   {"u_sha256", sha256_file(dir / "u.bin")}});
}

inline ClassUAP load_class_uap(const fs::path& dir) {
  const json j = read_json_file(dir / "class_uap.json");
  if (j.value("format", "") != class_uap_format) throw IoError("unsupported class-UAP format in " + dir.string());
  ClassUAP u;
  u.epsilon_u = j.at("epsilon_u").get<double>();
  u.surrogate_hash = j.at("surrogate_hash").get<std::string>();
  u.fooling_rate_on_S = j.at("fooling_rate_on_S").get<double>();
  u.skipped = j.at("skipped").get<std::size_t>();
  u.seed = j.at("seed").get<std::uint64_t>();
  const auto shape = j.at("shape").get<std::vector<int>>();
  if (shape.size() != 3) throw IoError("class-UAP shape must have three entries");
  u.u = Image(shape[0], shape[1], shape[2]);
  read_float_blob(dir / j.at("u_blob").get<std::string>(), u.u.values(), j.at("u_sha256").get<std::string>());
  return u;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline json to_json(const ScoreReport& r) {
  json per = json::array();
  for (const auto& p : r.per_image) per.push_back({{"id", p.id}, {"normal", p.normal}, {"effect", p.effect}});
  return {{"normal_functionality", r.normal_functionality},
          {"effectiveness", r.effectiveness},
          {"sum", r.sum},
          {"per_image", per}};
}

inline const char* score_csv_header = "normal_functionality,effectiveness,sum\n";

inline std::string score_csv_row(const ScoreReport& r) {
  return fmt_real(r.normal_functionality) + "," + fmt_real(r.effectiveness) + "," + fmt_real(r.sum) + "\n";
}

inline std::string stats_csv(std::span<const EpochStats> stats) {
  std::string s = "epoch,L_m,L_b,w_m,w_b,conflict_rate\n";
  for (const auto& e : stats)
    s += std::to_string(e.epoch) + "," + fmt_real(e.loss_main) + "," + fmt_real(e.loss_backdoor) + "," +
         fmt_real(e.w_main) + "," + fmt_real(e.w_backdoor) + "," + fmt_real(e.conflict_rate) + "\n";
  return s;
}

inline std::string defense_csv(const DefenseSweepResult& r) {
  std::string s = "grid_value,normal,effect,sum\n";
  for (const auto& p : r.points)
    s += std::to_string(p.grid_value) + "," + fmt_real(p.normal) + "," + fmt_real(p.effect) + "," +
         fmt_real(p.sum()) + "\n";
  return s;
}

inline json to_json(const DefenseSweepResult& r) {
  json pts = json::array();
  for (const auto& p : r.points)
    pts.push_back({{"grid_value", p.grid_value}, {"normal", p.normal}, {"effect", p.effect}, {"sum", p.sum()}});
  json j = {{"defense", to_string(r.kind)},
            {"undefended", {{"normal", r.undefended.normal}, {"effect", r.undefended.effect}}},
            {"points", pts}};
  if (!r.codec.empty()) j["codec"] = r.codec;
  return j;
}

/// One row per downstream classifier; agreement columns for the clean and
/// the backdoored denoiser side by side.
struct TransferTableRow {
  std::string upstream;
  std::string downstream;
  double agreement_clean_denoiser = 0.0;
  double agreement_backdoor_denoiser = 0.0;
  double asr = 0.0;
  double clean_denoiser_asr = 0.0;  // same trigger through the clean denoiser
  double label_accuracy_clean_denoiser = 0.0;
  double label_accuracy_backdoor_denoiser = 0.0;
};

inline std::string transfer_csv(std::span<const TransferTableRow> rows) {
  std::string s =
      "upstream,downstream,agreement_clean_denoiser,agreement_backdoor_denoiser,asr,clean_denoiser_asr,"
      "label_accuracy_clean_denoiser,label_accuracy_backdoor_denoiser\n";
  for (const auto& r : rows)
    s += r.upstream + "," + r.downstream + "," + fmt_real(r.agreement_clean_denoiser) + "," +
         fmt_real(r.agreement_backdoor_denoiser) + "," + fmt_real(r.asr) + "," + fmt_real(r.clean_denoiser_asr) +
         "," + fmt_real(r.label_accuracy_clean_denoiser) + "," + fmt_real(r.label_accuracy_backdoor_denoiser) +
         "\n";
  return s;
}

}  // namespace i2ibd
