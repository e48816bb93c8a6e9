// Command-line entry point: one subcommand per pipeline stage.

#include <CLI11.hpp>
#include <iostream>
#include <optional>
#include <string>

#include "i2ibd/harness.hpp"

namespace {

enum ExitCode : int {
  ok = 0,
  other_error = 1,
  usage_error = 2,
  schema_error = 3,
  missing_artifact = 4,
  hash_mismatch = 5,
  provenance_error = 6,
  arch_mismatch = 7,
  divergence = 8,
  shape_error = 9,
  invalid_argument = 10,
  decode_error = 11,
  io_error = 12,
};

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string trigger;
  std::string method;
  std::string kind;
  bool quiet = false;
};

std::optional<std::filesystem::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::filesystem::path(s);
}

std::optional<std::string> opt_string(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return s;
}

i2ibd::Pipeline make_pipeline(const Options& o) {
  auto cfg = o.config.empty() ? i2ibd::ExperimentConfig{} : i2ibd::load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.method.empty()) i2ibd::parse_mtl_method(o.method);
  if (!o.kind.empty()) i2ibd::parse_trigger_kind(o.kind);
  const auto root = i2ibd::resolve_artifact_root(opt_path(o.out));
  i2ibd::StageLog log;
  if (!o.quiet) log = [](const std::string& m) { std::cerr << m << '\n'; };
  return i2ibd::Pipeline(std::move(cfg), root, log);
}

void print(const i2ibd::StageOutcome& s) {
  std::cout << s.stage << (s.skipped ? " (cached) " : " ") << s.dir.string() << '\n' << s.summary.dump(2) << '\n';
}

int run(const std::string& command, const Options& o) {
  auto p = make_pipeline(o);
  const auto method = opt_string(o.method);
  const auto kind = opt_string(o.kind);
  const auto ckpt = opt_path(o.checkpoint);
  const auto trig = opt_path(o.trigger);
  if (command == "gen-data") {
    for (const auto& s : p.gen_data()) print(s);
  } else if (command == "pretrain") {
    for (const auto& s : p.pretrain()) print(s);
  } else if (command == "gen-uap-cls") {
    print(p.gen_uap_cls(ckpt));
  } else if (command == "gen-trigger") {
    print(p.gen_trigger(kind, ckpt));
  } else if (command == "train-backdoor") {
    print(p.train_backdoor(method, kind, ckpt, trig));
  } else if (command == "evaluate") {
    print(p.evaluate(method, kind, ckpt, trig));
  } else if (command == "defend") {
    print(p.defend(method, kind, ckpt, trig));
  } else if (command == "ablate") {
    print(p.ablate());
  }
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor experiments on image-to-image networks"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON experiment configuration");
    sub->add_option("--out", o.out, "artifact root (default: $I2IBD_ARTIFACT_ROOT, then ./artifacts)");
    sub->add_option("--seed", seed, "master seed override");
    sub->add_flag("--quiet", o.quiet, "suppress progress lines");
  };
  struct Spec {
    const char* name;
    const char* help;
    bool checkpoint, trigger, method, kind;
  };
  const Spec specs[] = {
      {"gen-data", "synthesize train/test pairs", false, false, false, false},
      {"pretrain", "train the clean victim (and the classifier zoo)", false, false, false, false},
      {"gen-uap-cls", "craft the classification UAP on the surrogate", true, false, false, false},
      {"gen-trigger", "build a trigger against the clean victim", true, false, false, true},
      {"train-backdoor", "inject the backdoor with an MTL weighting method", true, true, true, true},
      {"evaluate", "score a backdoored model", true, true, true, true},
      {"defend", "sweep input-preprocessing and fine-tuning defenses", true, true, true, true},
      {"ablate", "trigger x weighting-method grid", false, false, false, false},
  };
  for (const auto& s : specs) {
    auto* sub = app.add_subcommand(s.name, s.help);
    add_common(sub);
    if (s.checkpoint) sub->add_option("--checkpoint", o.checkpoint, "model stage directory override");
    if (s.trigger) sub->add_option("--trigger", o.trigger, "trigger stage directory override");
    if (s.method) sub->add_option("--method", o.method, "SW | UW | DWA | PCGrad");
    if (s.kind) sub->add_option("--kind", o.kind, "uap | patch | blend | gaussian");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? ok : usage_error;
  }
  for (auto* sub : app.get_subcommands())
    if (sub->get_option("--seed")->count() > 0) o.seed = seed;
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, o);
  } catch (const i2ibd::SchemaError& e) {
    std::cerr << "schema error: " << e.what() << '\n';
    return schema_error;
  } catch (const i2ibd::MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << '\n';
    return missing_artifact;
  } catch (const i2ibd::HashMismatchError& e) {
    std::cerr << "hash mismatch: " << e.what() << '\n';
    return hash_mismatch;
  } catch (const i2ibd::DecodeError& e) {
    std::cerr << "decode error: " << e.what() << '\n';
    return decode_error;
  } catch (const i2ibd::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return io_error;
  } catch (const i2ibd::ProvenanceError& e) {
    std::cerr << "provenance error: " << e.what() << '\n';
    return provenance_error;
  } catch (const i2ibd::ArchMismatchError& e) {
    std::cerr << "architecture mismatch: " << e.what() << '\n';
    return arch_mismatch;
  } catch (const i2ibd::DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return divergence;
  } catch (const i2ibd::ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return shape_error;
  } catch (const i2ibd::InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return invalid_argument;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return other_error;
  }
}
