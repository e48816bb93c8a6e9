#pragma once

// Experiment orchestration: the schema-checked configuration, the artifact
// layout under one root directory, run manifests, and one function per
// pipeline stage. The CLI in tools/ is a thin wrapper over these functions.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "i2ibd/checkpoint.hpp"
#include "i2ibd/corpus.hpp"
#include "i2ibd/defenses.hpp"
#include "i2ibd/downstream.hpp"
#include "i2ibd/error.hpp"
#include "i2ibd/hash.hpp"
#include "i2ibd/io.hpp"
#include "i2ibd/metrics.hpp"
#include "i2ibd/mtl.hpp"
#include "i2ibd/rng.hpp"
#include "i2ibd/train.hpp"
#include "i2ibd/trigger.hpp"
#include "i2ibd/zoo.hpp"

namespace i2ibd {

inline constexpr const char* toolkit_version = "i2ibd 1.0.0";
inline constexpr const char* artifact_root_env = "I2IBD_ARTIFACT_ROOT";
inline constexpr const char* manifest_file = "run_manifest.json";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::uint64_t seed = 0;

  struct Data {
    std::string corpus = "structured";  // structured | shapes
    std::string task = "denoise";       // denoise | super_resolve
    int train_count = 400;
    int test_count = 50;
    int size = 64;  // clean image side length
    int channels = 3;
    double sigma = default_noise_sigma;
    int scale = 2;
    int classifier_train_count = 1000;
  } data;

  struct Model {
    int width = 32;
    int depth = 4;
  } model;

  struct TriggerCfg {
    std::string kind = "uap";
    double epsilon = 20.0 / 255.0;
    double step = 5.0 / 255.0;
    int iterations = 20;
    int sample_count = 10;
    int patch_size = 8;
    double blend_alpha = 0.1;
    double gaussian_sigma = 10.0 / 255.0;
  } trigger;

  struct Mtl {
    std::string method = "PCGrad";
    double sw_main = 0.9;
    double sw_backdoor = 0.1;
    double dwa_temperature = 2.0;
  } mtl;

  struct Train {
    int pretrain_epochs = 15;
    int backdoor_epochs = 25;
    int batch_size = 8;
    double learning_rate = 1e-4;
    double pretrain_learning_rate = 1e-4;
    bool allow_trigger_mismatch = false;
  } train;

  struct Downstream {
    bool enabled = false;
    std::string surrogate = "toy_cnn_a";
    std::vector<std::string> evaluators = {"toy_cnn_b", "toy_cnn_c"};
    double epsilon_u = 10.0 / 255.0;
    int uap_sample_count = 100;
    double inner_step = 1.0 / 255.0;
    int inner_max_steps = 50;
    int classifier_epochs = 10;
    int classifier_batch_size = 16;
    double classifier_learning_rate = 1e-3;
    bool include_surrogate = false;
  } downstream;

  struct Defense {
    std::vector<int> bit_depths = default_bit_depth_grid();
    std::vector<int> jpeg_qualities = default_jpeg_grid();
    double fine_tune_fraction = 0.10;
    std::vector<int> fine_tune_epochs = default_fine_tune_grid();
  } defense;

  struct Eval {
    std::string target_mode = "fixed_image";  // fixed_image | per_pair_composed | ground_truth
    std::vector<std::string> ablation_methods = {"SW", "UW", "DWA", "PCGrad"};
    std::vector<std::string> ablation_triggers = {"uap", "patch", "blend", "gaussian"};
  } eval;
};

namespace detail {

// Reads every key of one section through typed setters; anything left over
// is an unknown key.
class SectionReader {
 public:
  SectionReader(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw SchemaError("config section '" + name_ + "' must be an object");
  }

  template <typename T>
  void read(const std::string& key, T& out, const std::function<bool(const T&)>& valid = {},
            const std::string& rule = "") {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    if (!type_matches<T>(v)) throw SchemaError(path(key) + ": wrong type");
    T value = v.get<T>();
    if (valid && !valid(value)) throw SchemaError(path(key) + ": " + rule);
    out = std::move(value);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw SchemaError("unknown config key '" + path(k) + "'");
  }

 private:
  template <typename T>
  static bool type_matches(const nlohmann::json& v) {
    if constexpr (std::is_same_v<T, bool>) return v.is_boolean();
    else if constexpr (std::is_same_v<T, std::string>) return v.is_string();
    else if constexpr (std::is_integral_v<T>) return v.is_number_integer();
    else if constexpr (std::is_floating_point_v<T>) return v.is_number();
    else if constexpr (std::is_same_v<T, std::vector<int>>) {
      if (!v.is_array()) return false;
      for (const auto& e : v)
        if (!e.is_number_integer()) return false;
      return true;
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      if (!v.is_array()) return false;
      for (const auto& e : v)
        if (!e.is_string()) return false;
      return true;
    }
    return false;
  }

  std::string path(const std::string& key) const { return name_ + "." + key; }

  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

template <typename T>
std::function<bool(const T&)> one_of(std::vector<T> allowed) {
  return [allowed = std::move(allowed)](const T& v) {
    return std::find(allowed.begin(), allowed.end(), v) != allowed.end();
  };
}

inline std::function<bool(const int&)> at_least(int lo) {
  return [lo](const int& v) { return v >= lo; };
}

inline std::function<bool(const double&)> in_range(double lo, double hi) {
  return [lo, hi](const double& v) { return v >= lo && v <= hi; };
}

template <typename T>
std::function<bool(const std::vector<T>&)> each(std::function<bool(const T&)> pred, bool non_empty = true) {
  return [pred, non_empty](const std::vector<T>& v) {
    if (non_empty && v.empty()) return false;
    for (const auto& e : v)
      if (!pred(e)) return false;
    return true;
  };
}

}  // namespace detail

/// Validates a parsed configuration document; throws SchemaError on unknown
/// keys, wrong types or out-of-range values. Missing keys keep defaults.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail::at_least;
  using detail::each;
  using detail::in_range;
  using detail::one_of;
  using detail::SectionReader;
  if (!j.is_object()) throw SchemaError("config must be a JSON object");
  ExperimentConfig c;
  static const std::set<std::string> sections = {"seed",     "data",       "model",   "trigger", "mtl",
                                                 "train",    "downstream", "defense", "eval"};
  for (const auto& [k, v] : j.items())
    if (!sections.count(k)) throw SchemaError("unknown config key '" + k + "'");
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned())
      throw SchemaError(j.at("seed").is_number_integer() ? "seed: must be non-negative" : "seed: wrong type");
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  const nlohmann::json empty = nlohmann::json::object();
  auto section = [&](const char* name) -> const nlohmann::json& { return j.contains(name) ? j.at(name) : empty; };
  const std::string pos = "must be positive";
  {
    SectionReader r(section("data"), "data");
    r.read<std::string>("corpus", c.data.corpus, one_of<std::string>({"structured", "shapes"}),
                        "must be structured or shapes");
    r.read<std::string>("task", c.data.task, one_of<std::string>({"denoise", "super_resolve"}),
                        "must be denoise or super_resolve");
    r.read<int>("train_count", c.data.train_count, at_least(1), pos);
    r.read<int>("test_count", c.data.test_count, at_least(1), pos);
    r.read<int>("size", c.data.size, at_least(11), "must be at least 11");
    r.read<int>("channels", c.data.channels, one_of<int>({1, 3}), "must be 1 or 3");
    r.read<double>("sigma", c.data.sigma, in_range(0.0, 1.0), "must lie in [0, 1]");
    r.read<int>("scale", c.data.scale, one_of<int>({2, 4}), "must be 2 or 4");
    r.read<int>("classifier_train_count", c.data.classifier_train_count, at_least(1), pos);
    r.finish();
  }
  {
    SectionReader r(section("model"), "model");
    r.read<int>("width", c.model.width, at_least(1), pos);
    r.read<int>("depth", c.model.depth, at_least(1), pos);
    r.finish();
  }
  {
    SectionReader r(section("trigger"), "trigger");
    r.read<std::string>("kind", c.trigger.kind, one_of<std::string>({"uap", "patch", "blend", "gaussian"}),
                        "must be uap, patch, blend or gaussian");
    r.read<double>("epsilon", c.trigger.epsilon, in_range(1e-12, 1.0), "must lie in (0, 1]");
    r.read<double>("step", c.trigger.step, in_range(1e-12, 1.0), "must lie in (0, 1]");
    r.read<int>("iterations", c.trigger.iterations, at_least(0), "must be >= 0");
    r.read<int>("sample_count", c.trigger.sample_count, at_least(1), pos);
    r.read<int>("patch_size", c.trigger.patch_size, at_least(1), pos);
    r.read<double>("blend_alpha", c.trigger.blend_alpha, in_range(1e-12, 1.0), "must lie in (0, 1]");
    r.read<double>("gaussian_sigma", c.trigger.gaussian_sigma, in_range(1e-12, 1.0), "must lie in (0, 1]");
    r.finish();
  }
  {
    SectionReader r(section("mtl"), "mtl");
    r.read<std::string>("method", c.mtl.method, one_of<std::string>({"SW", "UW", "DWA", "PCGrad"}),
                        "must be SW, UW, DWA or PCGrad");
    r.read<double>("sw_main", c.mtl.sw_main, in_range(0.0, 1e6), "must be >= 0");
    r.read<double>("sw_backdoor", c.mtl.sw_backdoor, in_range(0.0, 1e6), "must be >= 0");
    r.read<double>("dwa_temperature", c.mtl.dwa_temperature, in_range(1e-12, 1e12), pos);
    r.finish();
  }
  {
    SectionReader r(section("train"), "train");
    r.read<int>("pretrain_epochs", c.train.pretrain_epochs, at_least(0), "must be >= 0");
    r.read<int>("backdoor_epochs", c.train.backdoor_epochs, at_least(0), "must be >= 0");
    r.read<int>("batch_size", c.train.batch_size, at_least(1), pos);
    r.read<double>("learning_rate", c.train.learning_rate, in_range(1e-12, 10.0), pos);
    r.read<double>("pretrain_learning_rate", c.train.pretrain_learning_rate, in_range(1e-12, 10.0), pos);
    r.read<bool>("allow_trigger_mismatch", c.train.allow_trigger_mismatch);
    r.finish();
  }
  {
    SectionReader r(section("downstream"), "downstream");
    const auto arch = one_of<std::string>({"toy_cnn_a", "toy_cnn_b", "toy_cnn_c"});
    r.read<bool>("enabled", c.downstream.enabled);
    r.read<std::string>("surrogate", c.downstream.surrogate, arch, "must name a toy classifier");
    r.read<std::vector<std::string>>("evaluators", c.downstream.evaluators, each<std::string>(arch),
                                     "must be a non-empty list of toy classifiers");
    r.read<double>("epsilon_u", c.downstream.epsilon_u, in_range(0.0, 1.0), "must lie in [0, 1]");
    r.read<int>("uap_sample_count", c.downstream.uap_sample_count, at_least(1), pos);
    r.read<double>("inner_step", c.downstream.inner_step, in_range(1e-12, 1.0), "must lie in (0, 1]");
    r.read<int>("inner_max_steps", c.downstream.inner_max_steps, at_least(1), pos);
    r.read<int>("classifier_epochs", c.downstream.classifier_epochs, at_least(0), "must be >= 0");
    r.read<int>("classifier_batch_size", c.downstream.classifier_batch_size, at_least(1), pos);
    r.read<double>("classifier_learning_rate", c.downstream.classifier_learning_rate, in_range(1e-12, 10.0), pos);
    r.read<bool>("include_surrogate", c.downstream.include_surrogate);
    r.finish();
  }
  {
    SectionReader r(section("defense"), "defense");
    r.read<std::vector<int>>("bit_depths", c.defense.bit_depths,
                             each<int>([](const int& b) { return b >= 1 && b <= 8; }), "entries must lie in [1, 8]");
    r.read<std::vector<int>>("jpeg_qualities", c.defense.jpeg_qualities,
                             each<int>([](const int& q) { return q >= 1 && q <= 100; }),
                             "entries must lie in [1, 100]");
    r.read<double>("fine_tune_fraction", c.defense.fine_tune_fraction, in_range(1e-12, 1.0), "must lie in (0, 1]");
    r.read<std::vector<int>>("fine_tune_epochs", c.defense.fine_tune_epochs, each<int>(at_least(0)),
                             "entries must be >= 0");
    r.finish();
  }
  {
    SectionReader r(section("eval"), "eval");
    r.read<std::string>("target_mode", c.eval.target_mode,
                        one_of<std::string>({"fixed_image", "per_pair_composed", "ground_truth"}),
                        "must be fixed_image, per_pair_composed or ground_truth");
    r.read<std::vector<std::string>>("ablation_methods", c.eval.ablation_methods,
                                     each<std::string>(one_of<std::string>({"SW", "UW", "DWA", "PCGrad"})),
                                     "must list MTL methods");
    r.read<std::vector<std::string>>(
        "ablation_triggers", c.eval.ablation_triggers,
        each<std::string>(one_of<std::string>({"uap", "patch", "blend", "gaussian"})), "must list trigger kinds");
    r.finish();
  }
  if (c.data.task == "super_resolve" && c.data.size % c.data.scale != 0)
    throw SchemaError("data.size must be divisible by data.scale");
  if (c.eval.target_mode == "per_pair_composed" && !c.downstream.enabled)
    throw SchemaError("eval.target_mode per_pair_composed requires downstream.enabled");
  if (c.eval.target_mode == "per_pair_composed" && c.data.task != "denoise")
    throw SchemaError("eval.target_mode per_pair_composed requires data.task denoise");
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifactError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

/// Canonical, fully populated form of a configuration (defaults included).
inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},
          {"data",
           {{"corpus", c.data.corpus},
            {"task", c.data.task},
            {"train_count", c.data.train_count},
            {"test_count", c.data.test_count},
            {"size", c.data.size},
            {"channels", c.data.channels},
            {"sigma", c.data.sigma},
            {"scale", c.data.scale},
            {"classifier_train_count", c.data.classifier_train_count}}},
          {"model", {{"width", c.model.width}, {"depth", c.model.depth}}},
          {"trigger",
           {{"kind", c.trigger.kind},
            {"epsilon", c.trigger.epsilon},
            {"step", c.trigger.step},
            {"iterations", c.trigger.iterations},
            {"sample_count", c.trigger.sample_count},
            {"patch_size", c.trigger.patch_size},
            {"blend_alpha", c.trigger.blend_alpha},
            {"gaussian_sigma", c.trigger.gaussian_sigma}}},
          {"mtl",
           {{"method", c.mtl.method},
            {"sw_main", c.mtl.sw_main},
            {"sw_backdoor", c.mtl.sw_backdoor},
            {"dwa_temperature", c.mtl.dwa_temperature}}},
          {"train",
           {{"pretrain_epochs", c.train.pretrain_epochs},
            {"backdoor_epochs", c.train.backdoor_epochs},
            {"batch_size", c.train.batch_size},
            {"learning_rate", c.train.learning_rate},
            {"pretrain_learning_rate", c.train.pretrain_learning_rate},
            {"allow_trigger_mismatch", c.train.allow_trigger_mismatch}}},
          {"downstream",
           {{"enabled", c.downstream.enabled},
            {"surrogate", c.downstream.surrogate},
            {"evaluators", c.downstream.evaluators},
            {"epsilon_u", c.downstream.epsilon_u},
            {"uap_sample_count", c.downstream.uap_sample_count},
            {"inner_step", c.downstream.inner_step},
            {"inner_max_steps", c.downstream.inner_max_steps},
            {"classifier_epochs", c.downstream.classifier_epochs},
            {"classifier_batch_size", c.downstream.classifier_batch_size},
            {"classifier_learning_rate", c.downstream.classifier_learning_rate},
            {"include_surrogate", c.downstream.include_surrogate}}},
          {"defense",
           {{"bit_depths", c.defense.bit_depths},
            {"jpeg_qualities", c.defense.jpeg_qualities},
            {"fine_tune_fraction", c.defense.fine_tune_fraction},
            {"fine_tune_epochs", c.defense.fine_tune_epochs}}},
          {"eval",
           {{"target_mode", c.eval.target_mode},
            {"ablation_methods", c.eval.ablation_methods},
            {"ablation_triggers", c.eval.ablation_triggers}}}};
}

// ---------------------------------------------------------------------------
// Artifact layout
// ---------------------------------------------------------------------------

/// Root precedence: explicit --out, then $I2IBD_ARTIFACT_ROOT, then ./artifacts.
inline std::filesystem::path resolve_artifact_root(const std::optional<std::filesystem::path>& out) {
  if (out && !out->empty()) return *out;
  if (const char* env = std::getenv(artifact_root_env); env && *env) return env;
  return "artifacts";
}

struct ArtifactLayout {
  std::filesystem::path root;

  std::filesystem::path train_data() const { return root / "data" / "train"; }
  std::filesystem::path test_data() const { return root / "data" / "test"; }
  std::filesystem::path classifier_data() const { return root / "data" / "classifier_train"; }
  std::filesystem::path clean_model() const { return root / "models" / "clean"; }
  std::filesystem::path classifier(const std::string& arch) const { return root / "models" / "classifiers" / arch; }
  std::filesystem::path class_uap() const { return root / "class_uap"; }
  std::filesystem::path trigger(const std::string& kind) const { return root / "triggers" / kind; }
  std::filesystem::path backdoor_model(const std::string& method, const std::string& kind) const {
    return root / "models" / "backdoor" / (method + "-" + kind);
  }
  std::filesystem::path evaluation(const std::string& method, const std::string& kind) const {
    return root / "reports" / "evaluate" / (method + "-" + kind);
  }
  std::filesystem::path defense(const std::string& method, const std::string& kind) const {
    return root / "reports" / "defense" / (method + "-" + kind);
  }
  std::filesystem::path ablation() const { return root / "reports" / "ablation"; }
};

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

/// Stage record. run_id hashes the stage name, the configuration snapshot,
/// the stage seed and the input artifact hashes, so identical inputs give
/// identical ids.
struct RunManifest {
  std::string run_id;
  std::string stage;
  nlohmann::json config;
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, std::string> inputs;   // name -> sha256
  std::map<std::string, std::string> outputs;  // path relative to the stage dir -> sha256
  double wall_clock_seconds = 0.0;
  std::string toolkit = toolkit_version;
  nlohmann::json summary = nlohmann::json::object();
};

inline std::string compute_run_id(const std::string& stage, const nlohmann::json& config,
                                  const std::map<std::string, std::uint64_t>& seeds,
                                  const std::map<std::string, std::string>& inputs) {
  const nlohmann::json doc = {{"stage", stage}, {"config", config}, {"seeds", seeds}, {"inputs", inputs}};
  return sha256_hex(doc.dump());
}

inline nlohmann::json to_json(const RunManifest& m) {
  return {{"run_id", m.run_id},   {"stage", m.stage},     {"config", m.config},
          {"seeds", m.seeds},     {"inputs", m.inputs},   {"outputs", m.outputs},
          {"wall_clock_seconds", m.wall_clock_seconds},   {"toolkit_version", m.toolkit},
          {"summary", m.summary}};
}

inline RunManifest read_run_manifest(const std::filesystem::path& dir) {
  const auto j = read_json_file(dir / manifest_file);
  RunManifest m;
  m.run_id = j.at("run_id").get<std::string>();
  m.stage = j.at("stage").get<std::string>();
  m.config = j.at("config");
  m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
  m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
  m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  m.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
  m.toolkit = j.at("toolkit_version").get<std::string>();
  m.summary = j.value("summary", nlohmann::json::object());
  return m;
}

/// Every output named in the manifest exists with its recorded hash.
inline bool manifest_outputs_intact(const std::filesystem::path& dir, const RunManifest& m) {
  for (const auto& [rel, sha] : m.outputs) {
    const auto p = dir / rel;
    if (!std::filesystem::exists(p) || sha256_file(p) != sha) return false;
  }
  return true;
}

/// Hash of a stage output as recorded by its manifest (the manifest file's own
/// sha256); used as the input hash of downstream stages.
inline std::string artifact_hash(const std::filesystem::path& dir) {
  const auto p = dir / manifest_file;
  if (!std::filesystem::exists(p))
    throw MissingArtifactError("missing artifact " + dir.string() + " (no " + manifest_file + "); run its stage first");
  const auto m = read_run_manifest(dir);
  if (!manifest_outputs_intact(dir, m))
    throw HashMismatchError("artifact " + dir.string() + " does not match its manifest");
  return sha256_hex(m.run_id + "|" + nlohmann::json(m.outputs).dump());
}

struct StageOutcome {
  std::string stage;
  std::filesystem::path dir;
  bool skipped = false;  // manifest hit; nothing recomputed
  nlohmann::json summary = nlohmann::json::object();
};

using StageLog = std::function<void(const std::string&)>;

namespace detail {

inline std::vector<std::string> list_files(const std::filesystem::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), dir).generic_string();
    if (rel == manifest_file) continue;
    out.push_back(rel);
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Runs `body` unless the stage directory already holds a manifest with the
/// same run id and intact outputs. `body` fills files under `dir` and returns
/// a JSON summary that is stored in the manifest.
inline StageOutcome run_stage(const std::string& stage, const std::filesystem::path& dir, const ExperimentConfig& cfg,
                              const std::map<std::string, std::uint64_t>& seeds,
                              const std::map<std::string, std::string>& inputs,
                              const std::function<nlohmann::json()>& body, const StageLog& log) {
  const auto config_json = to_json(cfg);
  const std::string run_id = compute_run_id(stage, config_json, seeds, inputs);
  StageOutcome out{stage, dir, false, {}};
  if (std::filesystem::exists(dir / manifest_file)) {
    const auto m = read_run_manifest(dir);
    if (m.run_id == run_id && manifest_outputs_intact(dir, m)) {
      if (log) log(stage + ": up to date (" + dir.string() + ")");
      out.skipped = true;
      out.summary = m.summary;
      return out;
    }
  }
  if (log) log(stage + ": running -> " + dir.string());
  if (std::filesystem::exists(dir)) std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto t0 = std::chrono::steady_clock::now();
  nlohmann::json summary = body();
  RunManifest m;
  m.run_id = run_id;
  m.stage = stage;
  m.config = config_json;
  m.seeds = seeds;
  m.inputs = inputs;
  for (const auto& rel : list_files(dir)) m.outputs[rel] = sha256_file(dir / rel);
  m.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  m.summary = summary;
  write_json_file(dir / manifest_file, to_json(m));
  out.summary = std::move(summary);
  return out;
}

inline PairedDataset make_split(const ExperimentConfig& c, Split split, std::uint64_t image_seed,
                                std::uint64_t noise_seed) {
  const int count = split == Split::train ? c.data.train_count : c.data.test_count;
  std::vector<Image> images;
  std::vector<int> labels;
  if (c.data.corpus == "shapes") {
    for (auto& li : synth_class_corpus(count, c.data.size, c.data.size, c.data.channels, image_seed)) {
      images.push_back(std::move(li.image));
      labels.push_back(li.label);
    }
  } else {
    images = synth_structured_corpus(count, c.data.size, c.data.size, c.data.channels, image_seed);
  }
  PairedDataset d = c.data.task == "denoise" ? synthesize_denoise_pairs(images, c.data.sigma, noise_seed, split)
                                              : synthesize_sr_pairs(images, c.data.scale, split);
  for (std::size_t i = 0; i < labels.size(); ++i) d.pairs[i].label = labels[i];
  d.seed = image_seed;
  return d;
}

inline I2IModel<float> make_model(const ExperimentConfig& c) {
  if (c.data.task == "denoise") return I2IModel<float>::denoiser(c.data.channels, c.model.width, c.model.depth);
  return I2IModel<float>::super_resolver(c.data.scale, c.data.channels, c.model.width, c.model.depth);
}

inline std::vector<std::string> classifier_archs(const ExperimentConfig& c) {
  std::vector<std::string> out = {c.downstream.surrogate};
  for (const auto& e : c.downstream.evaluators)
    if (std::find(out.begin(), out.end(), e) == out.end()) out.push_back(e);
  return out;
}

inline std::string trigger_key(const ExperimentConfig& c, const std::optional<std::string>& kind) {
  return kind ? *kind : c.trigger.kind;
}

inline std::string method_key(const ExperimentConfig& c, const std::optional<std::string>& method) {
  return method ? *method : c.mtl.method;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, std::filesystem::path root, StageLog log = {})
      : cfg_(std::move(cfg)), layout_{std::move(root)}, log_(std::move(log)) {}

  const ExperimentConfig& config() const { return cfg_; }
  const ArtifactLayout& layout() const { return layout_; }

  std::uint64_t seed_for(const std::string& stage) const { return stage_seed(cfg_.seed, stage); }

  /// Training/test pairs (and the classifier corpus when downstream is on).
  std::vector<StageOutcome> gen_data() {
    std::vector<StageOutcome> out;
    for (Split split : {Split::train, Split::test}) {
      const std::string name = "gen-data/" + to_string(split);
      const auto dir = split == Split::train ? layout_.train_data() : layout_.test_data();
      const std::uint64_t img_seed = seed_for(name + "/images"), noise_seed = seed_for(name + "/noise");
      out.push_back(detail::run_stage(name, dir, cfg_, {{"images", img_seed}, {"noise", noise_seed}}, {},
                                      [&] {
                                        const auto d = detail::make_split(cfg_, split, img_seed, noise_seed);
                                        const auto sha = save_dataset(d, dir);
                                        return nlohmann::json{{"pairs", d.size()}, {"dataset_sha256", sha}};
                                      },
                                      log_));
    }
    if (cfg_.downstream.enabled) {
      const auto dir = layout_.classifier_data();
      const std::uint64_t s = seed_for("gen-data/classifier");
      out.push_back(detail::run_stage("gen-data/classifier", dir, cfg_, {{"images", s}}, {},
                                      [&] {
                                        PairedDataset d;
                                        d.split = Split::train;
                                        d.seed = s;
                                        std::size_t i = 0;
                                        for (auto& li : synth_class_corpus(cfg_.data.classifier_train_count,
                                                                           cfg_.data.size, cfg_.data.size,
                                                                           cfg_.data.channels, s))
                                          d.pairs.push_back({"img" + std::to_string(i++), li.image, li.image,
                                                             li.label});
                                        const auto sha = save_dataset(d, dir);
                                        return nlohmann::json{{"images", d.size()}, {"dataset_sha256", sha}};
                                      },
                                      log_));
    }
    return out;
  }

  /// Clean victim (and, with downstream on, the classifier zoo).
  std::vector<StageOutcome> pretrain() {
    std::vector<StageOutcome> out;
    {
      const auto dir = layout_.clean_model();
      const std::uint64_t init = seed_for("pretrain/init"), shuffle = seed_for("pretrain/shuffle");
      out.push_back(detail::run_stage(
          "pretrain", dir, cfg_, {{"init", init}, {"shuffle", shuffle}},
          {{"train_data", artifact_hash(layout_.train_data())}},
          [&] {
            const auto data = load_dataset(layout_.train_data());
            auto model = detail::make_model(cfg_);
            model.initialize(init);
            TrainConfig tc;
            tc.epochs = cfg_.train.pretrain_epochs;
            tc.batch_size = cfg_.train.batch_size;
            tc.optimizer.learning_rate = cfg_.train.pretrain_learning_rate;
            tc.seed = shuffle;
            auto r = train_clean(std::move(model), data, tc);
            write_text_file(dir / "stats.csv", stats_csv(r.stats));
            CheckpointMeta meta{init, tc.epochs, r.optimizer_state_hash, {{"stage", "pretrain"}}};
            save_checkpoint(r.model, meta, dir / "checkpoint");
            nlohmann::json s = {{"model_hash", model_hash(r.model)}, {"epochs", tc.epochs}};
            if (!r.stats.empty()) s["final_L_m"] = r.stats.back().loss_main;
            return s;
          },
          log_));
    }
    if (cfg_.downstream.enabled) {
      for (const auto& arch : detail::classifier_archs(cfg_)) {
        const auto dir = layout_.classifier(arch);
        const std::uint64_t init = seed_for("classifier/" + arch + "/init");
        const std::uint64_t shuffle = seed_for("classifier/" + arch + "/shuffle");
        out.push_back(detail::run_stage(
            "pretrain/classifier/" + arch, dir, cfg_, {{"init", init}, {"shuffle", shuffle}},
            {{"classifier_data", artifact_hash(layout_.classifier_data())}},
            [&] {
              const auto data = load_dataset(layout_.classifier_data());
              std::vector<LabelledImage> items;
              for (const auto& p : data.pairs) items.push_back({p.input, p.label});
              Classifier<float> clf(parse_classifier_arch(arch), {cfg_.data.channels, num_shape_classes});
              clf.initialize(init);
              ClassifierTrainConfig cc;
              cc.epochs = cfg_.downstream.classifier_epochs;
              cc.batch_size = cfg_.downstream.classifier_batch_size;
              cc.optimizer.learning_rate = cfg_.downstream.classifier_learning_rate;
              cc.seed = shuffle;
              auto r = train_classifier(std::move(clf), items, cc);
              CheckpointMeta meta{init, cc.epochs, "", {{"stage", "pretrain/classifier"}}};
              save_checkpoint(r.model, meta, dir / "checkpoint");
              nlohmann::json s = {{"model_hash", model_hash(r.model)}};
              if (!r.stats.empty()) s["train_accuracy"] = r.stats.back().accuracy;
              return s;
            },
            log_));
      }
    }
    return out;
  }

  StageOutcome gen_uap_cls(const std::optional<std::filesystem::path>& surrogate_dir = {}) {
    if (!cfg_.downstream.enabled) throw SchemaError("gen-uap-cls requires downstream.enabled");
    const auto sdir = surrogate_dir ? *surrogate_dir : layout_.classifier(cfg_.downstream.surrogate);
    const auto dir = layout_.class_uap();
    const std::uint64_t s = seed_for("gen-uap-cls");
    return detail::run_stage(
        "gen-uap-cls", dir, cfg_, {{"uap", s}},
        {{"surrogate", artifact_hash(sdir)}, {"classifier_data", artifact_hash(layout_.classifier_data())}},
        [&] {
          const auto surrogate =
              load_classifier_checkpoint(sdir / "checkpoint", parse_classifier_arch(cfg_.downstream.surrogate));
          const auto data = load_dataset(layout_.classifier_data());
          std::vector<Image> S;
          for (std::size_t i = 0; i < data.size() && S.size() < static_cast<std::size_t>(cfg_.downstream.uap_sample_count);
               ++i)
            S.push_back(data.pairs[i].input);
          const auto uap = generate_classification_uap(
              surrogate, S, cfg_.downstream.epsilon_u,
              {cfg_.downstream.inner_step, cfg_.downstream.inner_max_steps}, s);
          save_class_uap(uap, dir);
          return nlohmann::json{{"fooling_rate_on_S", uap.fooling_rate_on_S}, {"skipped", uap.skipped}};
        },
        log_);
  }

  StageOutcome gen_trigger(const std::optional<std::string>& kind_override = {},
                           const std::optional<std::filesystem::path>& checkpoint_dir = {}) {
    const std::string kind = detail::trigger_key(cfg_, kind_override);
    const auto tk = parse_trigger_kind(kind);
    const auto cdir = checkpoint_dir ? *checkpoint_dir : layout_.clean_model();
    const auto dir = layout_.trigger(kind);
    const std::uint64_t s = seed_for("gen-trigger/" + kind);
    std::map<std::string, std::string> inputs = {{"victim", artifact_hash(cdir)},
                                                 {"train_data", artifact_hash(layout_.train_data())}};
    if (tk == TriggerKind::uap && cfg_.eval.target_mode == "per_pair_composed")
      inputs["class_uap"] = artifact_hash(layout_.class_uap());
    return detail::run_stage(
        "gen-trigger/" + kind, dir, cfg_, {{"trigger", s}}, inputs,
        [&] {
          const auto victim = load_i2i_checkpoint(cdir / "checkpoint");
          const auto data = load_dataset(layout_.train_data());
          const Image& x0 = data.pairs.front().input;
          Trigger t;
          switch (tk) {
            case TriggerKind::uap: {
              std::vector<Image> S, targets;
              const std::size_t n = std::min<std::size_t>(data.size(), cfg_.trigger.sample_count);
              const auto provider = target_provider_for_trigger_generation();
              for (std::size_t i = 0; i < n; ++i) {
                S.push_back(data.pairs[i].input);
                targets.push_back(provider(data.pairs[i]));
              }
              if (cfg_.eval.target_mode == "fixed_image") targets.resize(1);
              UapConfig uc{cfg_.trigger.step, cfg_.trigger.iterations, cfg_.trigger.epsilon, s};
              t = generate_uap_trigger(victim, S, targets, uc);
              break;
            }
            case TriggerKind::patch: t = make_patch_trigger(cfg_.trigger.patch_size, s, x0.channels()); break;
            case TriggerKind::blend:
              t = make_blend_trigger(s, cfg_.trigger.blend_alpha, x0.channels(), x0.height(), x0.width());
              break;
            case TriggerKind::gaussian:
              t = make_gaussian_trigger(cfg_.trigger.gaussian_sigma, cfg_.trigger.epsilon, s, x0.channels(),
                                        x0.height(), x0.width());
              break;
          }
          save_trigger(t, dir);
          return nlohmann::json{{"kind", kind}, {"trigger_hash", trigger_hash(t)}};
        },
        log_);
  }

  StageOutcome train_backdoor(const std::optional<std::string>& method_override = {},
                              const std::optional<std::string>& kind_override = {},
                              const std::optional<std::filesystem::path>& checkpoint_dir = {},
                              const std::optional<std::filesystem::path>& trigger_dir = {}) {
    const std::string method = detail::method_key(cfg_, method_override);
    const std::string kind = detail::trigger_key(cfg_, kind_override);
    const auto cdir = checkpoint_dir ? *checkpoint_dir : layout_.clean_model();
    const auto tdir = trigger_dir ? *trigger_dir : layout_.trigger(kind);
    const auto dir = layout_.backdoor_model(method, kind);
    const std::uint64_t s = seed_for("train-backdoor/" + method + "-" + kind);
    auto inputs = target_inputs();
    inputs["victim"] = artifact_hash(cdir);
    inputs["trigger"] = artifact_hash(tdir);
    inputs["train_data"] = artifact_hash(layout_.train_data());
    return detail::run_stage(
        "train-backdoor/" + method + "-" + kind, dir, cfg_, {{"shuffle", s}}, inputs,
        [&] {
          const auto victim = load_i2i_checkpoint(cdir / "checkpoint");
          const auto trigger = load_trigger(tdir);
          const auto data = load_dataset(layout_.train_data());
          TrainConfig tc;
          tc.epochs = cfg_.train.backdoor_epochs;
          tc.batch_size = cfg_.train.batch_size;
          tc.optimizer.learning_rate = cfg_.train.learning_rate;
          tc.seed = s;
          tc.mtl_method = parse_mtl_method(method);
          tc.sw_main = cfg_.mtl.sw_main;
          tc.sw_backdoor = cfg_.mtl.sw_backdoor;
          tc.dwa_temperature = cfg_.mtl.dwa_temperature;
          tc.allow_trigger_mismatch = cfg_.train.allow_trigger_mismatch;
          tc.target_mode = target_mode();
          auto r = i2ibd::train_backdoor(victim, data, trigger, target_provider(), tc);
          write_text_file(dir / "stats.csv", stats_csv(r.stats));
          CheckpointMeta meta{s, tc.epochs, r.optimizer_state_hash,
                              {{"stage", "train-backdoor"}, {"method", method}, {"trigger", kind}}};
          save_checkpoint(r.model, meta, dir / "checkpoint");
          nlohmann::json sm = {{"model_hash", model_hash(r.model)}, {"warnings", r.warnings}};
          if (!r.stats.empty()) {
            sm["final_L_m"] = r.stats.back().loss_main;
            sm["final_L_b"] = r.stats.back().loss_backdoor;
          }
          return sm;
        },
        log_);
  }

  /// Scores the backdoored model (and the clean victim as a reference). With
  /// composed targets the transfer table is written as well.
  StageOutcome evaluate(const std::optional<std::string>& method_override = {},
                        const std::optional<std::string>& kind_override = {},
                        const std::optional<std::filesystem::path>& checkpoint_dir = {},
                        const std::optional<std::filesystem::path>& trigger_dir = {}) {
    const std::string method = detail::method_key(cfg_, method_override);
    const std::string kind = detail::trigger_key(cfg_, kind_override);
    const auto mdir = checkpoint_dir ? *checkpoint_dir : layout_.backdoor_model(method, kind);
    const auto tdir = trigger_dir ? *trigger_dir : layout_.trigger(kind);
    const auto dir = layout_.evaluation(method, kind);
    auto inputs = target_inputs();
    inputs["model"] = artifact_hash(mdir);
    inputs["clean_model"] = artifact_hash(layout_.clean_model());
    inputs["trigger"] = artifact_hash(tdir);
    inputs["test_data"] = artifact_hash(layout_.test_data());
    const bool transfer = cfg_.eval.target_mode == "per_pair_composed";
    if (transfer)
      for (const auto& arch : detail::classifier_archs(cfg_)) inputs["classifier/" + arch] = artifact_hash(layout_.classifier(arch));
    return detail::run_stage(
        "evaluate/" + method + "-" + kind, dir, cfg_, {}, inputs,
        [&] {
          const auto model = load_i2i_checkpoint(mdir / "checkpoint");
          const auto clean = load_i2i_checkpoint(layout_.clean_model() / "checkpoint");
          const auto trigger = load_trigger(tdir);
          const auto test = load_dataset(layout_.test_data());
          const auto provider = target_provider();
          const auto report = score_i2i_backdoor(model, test, trigger, provider);
          const auto clean_report = score_i2i_backdoor(clean, test, trigger, provider);
          write_json_file(dir / "score.json", to_json(report));
          write_text_file(dir / "score.csv", std::string(score_csv_header) + score_csv_row(report));
          write_json_file(dir / "clean_score.json", to_json(clean_report));
          nlohmann::json s = {{"normal_functionality", report.normal_functionality},
                              {"effectiveness", report.effectiveness},
                              {"sum", report.sum},
                              {"clean_normal_functionality", clean_report.normal_functionality},
                              {"model_hash", model_hash(model)}};
          if (transfer) {
            const auto rows = transfer_table(model, clean, test, trigger);
            write_text_file(dir / "transfer.csv", transfer_csv(rows));
            nlohmann::json jr = nlohmann::json::array();
            for (const auto& r : rows)
              jr.push_back({{"downstream", r.downstream},
                            {"asr", r.asr},
                            {"agreement_backdoor_denoiser", r.agreement_backdoor_denoiser},
                            {"agreement_clean_denoiser", r.agreement_clean_denoiser}});
            s["transfer"] = jr;
          }
          return s;
        },
        log_);
  }

  StageOutcome defend(const std::optional<std::string>& method_override = {},
                      const std::optional<std::string>& kind_override = {},
                      const std::optional<std::filesystem::path>& checkpoint_dir = {},
                      const std::optional<std::filesystem::path>& trigger_dir = {}) {
    const std::string method = detail::method_key(cfg_, method_override);
    const std::string kind = detail::trigger_key(cfg_, kind_override);
    const auto mdir = checkpoint_dir ? *checkpoint_dir : layout_.backdoor_model(method, kind);
    const auto tdir = trigger_dir ? *trigger_dir : layout_.trigger(kind);
    const auto dir = layout_.defense(method, kind);
    const std::uint64_t s = seed_for("defend/fine-tune");
    auto inputs = target_inputs();
    inputs["model"] = artifact_hash(mdir);
    inputs["trigger"] = artifact_hash(tdir);
    inputs["train_data"] = artifact_hash(layout_.train_data());
    inputs["test_data"] = artifact_hash(layout_.test_data());
    return detail::run_stage(
        "defend/" + method + "-" + kind, dir, cfg_, {{"fine_tune", s}}, inputs,
        [&] {
          const auto model = load_i2i_checkpoint(mdir / "checkpoint");
          const std::string before = model_hash(model);
          const auto trigger = load_trigger(tdir);
          const auto train = load_dataset(layout_.train_data());
          const auto test = load_dataset(layout_.test_data());
          const auto provider = target_provider();
          nlohmann::json s_json = nlohmann::json::object();
          auto emit = [&](const std::string& name, const DefenseSweepResult& r) {
            write_text_file(dir / (name + ".csv"), defense_csv(r));
            write_json_file(dir / (name + ".json"), to_json(r));
            s_json[name] = to_json(r);
          };
          emit("bit_depth", evaluate_under_defense(model, test, trigger, provider, DefenseKind::bit_depth,
                                                   cfg_.defense.bit_depths));
          emit("jpeg", evaluate_under_defense(model, test, trigger, provider, DefenseKind::jpeg,
                                              cfg_.defense.jpeg_qualities));
          TrainConfig tc;
          tc.batch_size = cfg_.train.batch_size;
          tc.optimizer.learning_rate = cfg_.train.learning_rate;
          tc.seed = s;
          emit("fine_tune", fine_tune_defense(model, train, test, trigger, provider, cfg_.defense.fine_tune_fraction,
                                              cfg_.defense.fine_tune_epochs, tc));
          if (model_hash(model) != before) throw Error("defend: preprocessing modified the model");
          return s_json;
        },
        log_);
  }

  /// Every (trigger kind, MTL method) pair of the ablation grid: trigger
  /// generation, backdoor training and scoring, then one summary table.
  StageOutcome ablate() {
    struct Row {
      std::string trigger, method;
      double normal, effect, sum;
    };
    std::vector<Row> rows;
    std::map<std::string, std::string> inputs;
    for (const auto& kind : cfg_.eval.ablation_triggers) {
      gen_trigger(kind);
      for (const auto& method : cfg_.eval.ablation_methods) {
        train_backdoor(method, kind);
        const auto ev = evaluate(method, kind);
        inputs[method + "-" + kind] = artifact_hash(ev.dir);
        rows.push_back({kind, method, ev.summary.at("normal_functionality").get<double>(),
                        ev.summary.at("effectiveness").get<double>(), ev.summary.at("sum").get<double>()});
      }
    }
    const auto dir = layout_.ablation();
    return detail::run_stage(
        "ablate", dir, cfg_, {}, inputs,
        [&] {
          std::string csv = "trigger,method,normal_functionality,effectiveness,sum\n";
          nlohmann::json jr = nlohmann::json::array();
          for (const auto& r : rows) {
            csv += r.trigger + "," + r.method + "," + fmt_real(r.normal) + "," + fmt_real(r.effect) + "," +
                   fmt_real(r.sum) + "\n";
            jr.push_back({{"trigger", r.trigger},
                          {"method", r.method},
                          {"normal_functionality", r.normal},
                          {"effectiveness", r.effect},
                          {"sum", r.sum}});
          }
          write_text_file(dir / "ablation.csv", csv);
          return nlohmann::json{{"rows", jr}};
        },
        log_);
  }

  TargetMode target_mode() const {
    return cfg_.eval.target_mode == "per_pair_composed" ? TargetMode::per_pair_composed : TargetMode::fixed_image;
  }

  /// The backdoor target for each pair under the configured mode.
  TargetProvider target_provider() const {
    if (cfg_.eval.target_mode == "ground_truth") return ground_truth_target();
    if (cfg_.eval.target_mode == "per_pair_composed") return composed_target(load_class_uap(layout_.class_uap()));
    const int h = cfg_.data.size, w = cfg_.data.size;
    return fixed_target(make_bug_target(h, w, cfg_.data.channels));
  }

 private:
  TargetProvider target_provider_for_trigger_generation() const { return target_provider(); }

  std::map<std::string, std::string> target_inputs() const {
    if (cfg_.eval.target_mode == "per_pair_composed") return {{"class_uap", artifact_hash(layout_.class_uap())}};
    return {};
  }

  std::vector<TransferTableRow> transfer_table(const I2IModel<float>& model, const I2IModel<float>& clean,
                                               const PairedDataset& test, const Trigger& trigger) const {
    std::vector<Classifier<float>> clfs;
    std::vector<NamedClassifier> named;
    for (const auto& arch : cfg_.downstream.evaluators)
      clfs.push_back(load_classifier_checkpoint(layout_.classifier(arch) / "checkpoint", parse_classifier_arch(arch)));
    for (std::size_t i = 0; i < clfs.size(); ++i) named.push_back({cfg_.downstream.evaluators[i], &clfs[i]});
    std::vector<int> labels;
    for (const auto& p : test.pairs) labels.push_back(p.label);
    const bool have_labels = std::all_of(labels.begin(), labels.end(), [](int l) { return l >= 0; });
    TransferOptions opt;
    opt.surrogate_hash = load_class_uap(layout_.class_uap()).surrogate_hash;
    opt.include_surrogate = cfg_.downstream.include_surrogate;
    if (have_labels) opt.labels = labels;
    const auto bd = evaluate_transfer_asr(as_map(model), named, test, trigger, opt);
    const auto cl = evaluate_transfer_asr(as_map(clean), named, test, trigger, opt);
    std::vector<TransferTableRow> rows;
    for (std::size_t i = 0; i < bd.size(); ++i)
      rows.push_back({"toy_denoiser", bd[i].classifier_id, cl[i].agreement, bd[i].agreement, bd[i].asr, cl[i].asr,
                      cl[i].label_accuracy, bd[i].label_accuracy});
    return rows;
  }

  ExperimentConfig cfg_;
  ArtifactLayout layout_;
  StageLog log_;
};

}  // namespace i2ibd
