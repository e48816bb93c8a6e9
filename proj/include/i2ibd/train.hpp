#pragma once

// Training loops: clean pre-training, multi-task backdoor training, clean
// fine-tuning, and the classifier trainer used to build the downstream zoo.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "i2ibd/checkpoint.hpp"
#include "i2ibd/corpus.hpp"
#include "i2ibd/error.hpp"
#include "i2ibd/hash.hpp"
#include "i2ibd/metrics.hpp"
#include "i2ibd/mtl.hpp"
#include "i2ibd/rng.hpp"
#include "i2ibd/trigger.hpp"
#include "i2ibd/zoo.hpp"

namespace i2ibd {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(std::size_t n, AdamConfig cfg) : cfg_(cfg), m_(n, T(0)), v_(n, T(0)) {
    require(cfg.learning_rate > 0.0, "Adam: learning rate must be positive");
    require(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0,
            "Adam: betas must lie in [0, 1)");
  }

  void step(std::span<T> params, std::span<const T> grad) {
    require_shape(params.size() == m_.size() && grad.size() == m_.size(), "Adam::step: length mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T lr_t = static_cast<T>(cfg_.learning_rate / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(cfg_.epsilon);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const T g = grad[i];
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g * g;
      params[i] -= lr_t * m_[i] / (std::sqrt(v_[i] * inv_bc2) + eps);
    }
  }

  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  std::string state_hash() const {
    Sha256 h;
    h.update(&t_, sizeof t_);
    h.update(std::span<const T>(m_)).update(std::span<const T>(v_));
    return h.hex();
  }

 private:
  AdamConfig cfg_;
  std::vector<T> m_, v_;
  std::int64_t t_ = 0;
};

enum class TargetMode { fixed_image, per_pair_composed };

inline std::string to_string(TargetMode m) {
  return m == TargetMode::fixed_image ? "fixed_image" : "per_pair_composed";
}

inline TargetMode parse_target_mode(const std::string& s) {
  if (s == "fixed_image") return TargetMode::fixed_image;
  if (s == "per_pair_composed") return TargetMode::per_pair_composed;
  throw InvalidArgument("unknown target mode: " + s);
}

struct EpochStats {
  int epoch = 0;  // 1-based
  double loss_main = 0.0;
  double loss_backdoor = 0.0;
  double seconds = 0.0;
  double w_main = 1.0;
  double w_backdoor = 0.0;
  UwLogVars uw_log_vars;
  double conflict_rate = 0.0;

  /// Unweighted L_m + L_b of the epoch means.
  double combined() const { return loss_main + loss_backdoor; }
};

using EpochCallback = std::function<void(const EpochStats&, const I2IModel<float>&)>;

struct TrainConfig {
  int epochs = 1;
  int batch_size = 8;
  AdamConfig optimizer;
  std::uint64_t seed = 0;
  MtlMethod mtl_method = MtlMethod::PCGrad;
  double sw_main = 0.9;
  double sw_backdoor = 0.1;
  double dwa_temperature = 2.0;
  UwLogVars uw_init;
  TargetMode target_mode = TargetMode::fixed_image;
  bool allow_trigger_mismatch = false;  // skip the trigger provenance check
  double divergence_factor = 1e3;
  EpochCallback on_epoch;  // progress and snapshots; not part of the result

  void validate() const {
    require(epochs >= 0, "TrainConfig: epochs must be >= 0");
    require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    require(optimizer.learning_rate > 0.0, "TrainConfig: learning_rate must be positive");
    require(sw_main >= 0.0 && sw_backdoor >= 0.0, "TrainConfig: SW weights must be non-negative");
    require(dwa_temperature > 0.0, "TrainConfig: DWA temperature must be positive");
    require(divergence_factor > 1.0, "TrainConfig: divergence factor must exceed 1");
  }
};

struct TrainResult {
  I2IModel<float> model;
  std::vector<EpochStats> stats;
  std::string optimizer_state_hash;
  UwLogVars uw_log_vars;
  std::vector<std::string> warnings;
};

/// Permutation of [0, n) for one epoch, keyed by (seed, epoch) only.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::uint64_t state = derive_seed(seed, epoch);
  for (std::size_t i = n; i > 1; --i) {
    state = mix64(state);
    const auto j = static_cast<std::size_t>((static_cast<unsigned __int128>(state) * i) >> 64);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

namespace detail {

struct DivergenceGuard {
  double factor;
  std::optional<TaskLosses> initial;

  void check(const TaskLosses& l, int epoch, std::size_t batch) {
    auto fail = [&](const std::string& what) {
      throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch) + ": " + what + " (L_m = " + std::to_string(l.main) +
                            ", L_b = " + std::to_string(l.backdoor) + ")");
    };
    if (!std::isfinite(l.main) || !std::isfinite(l.backdoor)) fail("non-finite loss");
    if (!initial) {
      initial = l;
      return;
    }
    // A zero initial loss has no meaningful ratio; only finiteness applies.
    if (initial->main > 0.0 && l.main > factor * initial->main) fail("main loss exceeded its divergence bound");
    if (initial->backdoor > 0.0 && l.backdoor > factor * initial->backdoor)
      fail("backdoor loss exceeded its divergence bound");
  }
};

using StepFn = std::function<StepGradient(const I2IModel<float>&, std::span<const ImagePair>)>;

// Shared epoch/batch loop. `step` produces the parameter gradient for one batch.
inline TrainResult run_training(I2IModel<float> model, const PairedDataset& data, const TrainConfig& cfg,
                                WeightingState* ws, const StepFn& step) {
  cfg.validate();
  require(!data.empty(), "training set is empty");
  Adam<float> opt(model.param_count(), cfg.optimizer);
  Adam<double> uw_opt(2, cfg.optimizer);
  DivergenceGuard guard{cfg.divergence_factor, std::nullopt};
  TrainResult r;
  const std::size_t n = data.size();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  std::vector<ImagePair> batch;
  for (int e = 1; e <= cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = epoch_order(n, cfg.seed, static_cast<std::uint64_t>(e));
    double sum_m = 0.0, sum_b = 0.0, sum_wm = 0.0, sum_wb = 0.0;
    std::size_t batches = 0, conflicts = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      batch.clear();
      for (std::size_t k = start; k < std::min(n, start + bs); ++k) batch.push_back(data.pairs[order[k]]);
      StepGradient g = step(model, batch);
      guard.check(g.losses, e, batches);
      opt.step(model.params(), g.params);
      if (ws && ws->method == MtlMethod::UW) {
        std::vector<double> s = {ws->uw_log_vars.main, ws->uw_log_vars.backdoor};
        const std::vector<double> gs = {g.uw_grad.main, g.uw_grad.backdoor};
        uw_opt.step(s, gs);
        ws->uw_log_vars = {s[0], s[1]};
      }
      sum_m += g.losses.main;
      sum_b += g.losses.backdoor;
      sum_wm += g.w_main;
      sum_wb += g.w_backdoor;
      conflicts += g.conflict ? 1 : 0;
      ++batches;
    }
    EpochStats st;
    st.epoch = e;
    st.loss_main = sum_m / batches;
    st.loss_backdoor = sum_b / batches;
    st.w_main = sum_wm / batches;
    st.w_backdoor = sum_wb / batches;
    st.conflict_rate = static_cast<double>(conflicts) / batches;
    if (ws) {
      st.uw_log_vars = ws->uw_log_vars;
      ws->dwa_history.push_back({st.loss_main, st.loss_backdoor});
      if (ws->method == MtlMethod::DWA && dwa_weights(ws->dwa_history, ws->dwa_temperature).degenerate)
        ws->warnings.push_back("dwa: zero loss in history at epoch " + std::to_string(e) + "; ratio set to 1");
    }
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.stats.push_back(st);
    if (cfg.on_epoch) cfg.on_epoch(st, model);
  }
  r.optimizer_state_hash = opt.state_hash();
  if (ws) {
    r.uw_log_vars = ws->uw_log_vars;
    r.warnings = ws->warnings;
  }
  r.model = std::move(model);
  return r;
}

}  // namespace detail

/// Minimises L_m only.
inline TrainResult train_clean(I2IModel<float> model, const PairedDataset& data, const TrainConfig& cfg) {
  auto step = [](const I2IModel<float>& m, std::span<const ImagePair> batch) {
    std::vector<Image> in;
    std::vector<OutputLoss<float>> losses;
    in.reserve(batch.size());
    for (const auto& p : batch) {
      in.push_back(p.input);
      losses.push_back(l2_loss_to(p.target));
    }
    StepGradient g;
    float v = 0.0f;
    g.params = m.grad_wrt_params(in, losses, &v);
    g.losses = {v, 0.0};
    g.w_main = 1.0;
    g.w_backdoor = 0.0;
    return g;
  };
  return detail::run_training(std::move(model), data, cfg, nullptr, step);
}

/// Verifies that a UAP trigger was generated against `model`.
inline void verify_trigger_provenance(const I2IModel<float>& model, const Trigger& trigger) {
  if (trigger.kind != TriggerKind::uap) return;
  if (!trigger.provenance) throw ProvenanceError("UAP trigger carries no provenance record");
  const std::string h = model_hash(model);
  if (trigger.provenance->victim_hash != h)
    throw ProvenanceError("UAP trigger was generated against model " + trigger.provenance->victim_hash +
                          ", not the training start point " + h);
}

/// Continues training from `model` on L_m (clean batch) and L_b (same batch
/// with the trigger applied), combined by the configured MTL method.
inline TrainResult train_backdoor(I2IModel<float> model, const PairedDataset& data, const Trigger& trigger,
                                  const TargetProvider& target, const TrainConfig& cfg) {
  cfg.validate();
  if (!cfg.allow_trigger_mismatch) verify_trigger_provenance(model, trigger);
  WeightingState ws;
  ws.method = cfg.mtl_method;
  ws.sw_main = cfg.sw_main;
  ws.sw_backdoor = cfg.sw_backdoor;
  ws.dwa_temperature = cfg.dwa_temperature;
  ws.uw_log_vars = cfg.uw_init;
  auto step = [&](const I2IModel<float>& m, std::span<const ImagePair> batch) {
    return combined_step_gradient(m, batch, trigger, target, ws);
  };
  return detail::run_training(std::move(model), data, cfg, &ws, step);
}

/// Seed-deterministic subset of round(fraction * n) indices, ascending.
inline std::vector<std::size_t> select_subset(std::size_t n, double fraction, std::uint64_t seed) {
  require(fraction > 0.0 && fraction <= 1.0, "select_subset: fraction must lie in (0, 1]");
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  require(k >= 1, "select_subset: subset is empty");
  auto order = epoch_order(n, stage_seed(seed, "fine-tune-subset"), 0);
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

struct FineTuneEval {
  const PairedDataset* test = nullptr;
  const Trigger* trigger = nullptr;
  TargetProvider target;
};

struct FineTuneResult {
  TrainResult train;
  std::vector<std::size_t> subset;
  std::optional<ScoreReport> before, after;
};

/// Clean (L_m only) training on a seed-chosen fraction of the training set.
inline FineTuneResult fine_tune(const I2IModel<float>& model, const PairedDataset& data, double fraction, int epochs,
                                TrainConfig cfg, const std::optional<FineTuneEval>& eval = std::nullopt) {
  require(!data.empty(), "fine_tune: training set is empty");
  FineTuneResult r;
  r.subset = select_subset(data.size(), fraction, cfg.seed);
  PairedDataset sub = data;
  sub.pairs.clear();
  for (auto i : r.subset) sub.pairs.push_back(data.pairs[i]);
  cfg.epochs = epochs;
  if (eval) r.before = score_i2i_backdoor(model, *eval->test, *eval->trigger, eval->target);
  r.train = train_clean(model, sub, cfg);
  if (eval) r.after = score_i2i_backdoor(r.train.model, *eval->test, *eval->trigger, eval->target);
  return r;
}

// ---------------------------------------------------------------------------
// Classifiers
// ---------------------------------------------------------------------------

struct ClassifierTrainConfig {
  int epochs = 10;
  int batch_size = 16;
  AdamConfig optimizer{1e-3, 0.9, 0.999, 1e-8};
  std::uint64_t seed = 0;
};

struct ClassifierEpoch {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // on the training set, measured during the epoch
};

struct ClassifierTrainResult {
  Classifier<float> model;
  std::vector<ClassifierEpoch> stats;
};

/// Mean cross-entropy training with Adam.
inline ClassifierTrainResult train_classifier(Classifier<float> clf, std::span<const LabelledImage> data,
                                              const ClassifierTrainConfig& cfg) {
  require(!data.empty(), "train_classifier: training set is empty");
  require(cfg.epochs >= 0 && cfg.batch_size >= 1, "train_classifier: bad epochs or batch size");
  Adam<float> opt(clf.param_count(), cfg.optimizer);
  ClassifierTrainResult r;
  const std::size_t n = data.size(), bs = static_cast<std::size_t>(cfg.batch_size);
  std::vector<float> grad(clf.param_count());
  std::vector<float> gl;
  typename Classifier<float>::Tape tape;
  for (int e = 1; e <= cfg.epochs; ++e) {
    const auto order = epoch_order(n, cfg.seed, static_cast<std::uint64_t>(e));
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      std::fill(grad.begin(), grad.end(), 0.0f);
      const float inv = 1.0f / static_cast<float>(end - start);
      for (std::size_t k = start; k < end; ++k) {
        const auto& item = data[order[k]];
        const auto logits = clf.forward(item.image, &tape);
        loss += cross_entropy<float>(logits, item.label, gl);
        if (argmax<float>(logits) == item.label) ++correct;
        for (auto& v : gl) v *= inv;
        clf.backward(tape, gl, grad, nullptr);
      }
      opt.step(clf.params(), grad);
    }
    r.stats.push_back({e, loss / n, static_cast<double>(correct) / n});
  }
  r.model = std::move(clf);
  return r;
}

inline double classifier_accuracy(const Classifier<float>& clf, std::span<const LabelledImage> data) {
  require(!data.empty(), "classifier_accuracy: empty set");
  std::size_t ok = 0;
  for (const auto& item : data) ok += predict(clf, item.image) == item.label ? 1 : 0;
  return static_cast<double>(ok) / data.size();
}

}  // namespace i2ibd
