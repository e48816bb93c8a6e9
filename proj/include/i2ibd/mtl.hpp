#pragma once

// Main-task and backdoor-task losses and the four ways of combining them:
// static weighting (SW), uncertainty weighting (UW), dynamic weight averaging
// (DWA) and one-sided conflicting-gradient projection (PCGrad).

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "i2ibd/corpus.hpp"
#include "i2ibd/error.hpp"
#include "i2ibd/metrics.hpp"
#include "i2ibd/trigger.hpp"
#include "i2ibd/zoo.hpp"

namespace i2ibd {

enum class MtlMethod { SW, UW, DWA, PCGrad };

inline std::string to_string(MtlMethod m) {
  switch (m) {
    case MtlMethod::SW: return "SW";
    case MtlMethod::UW: return "UW";
    case MtlMethod::DWA: return "DWA";
    case MtlMethod::PCGrad: return "PCGrad";
  }
  return "?";
}

inline MtlMethod parse_mtl_method(const std::string& s) {
  if (s == "SW") return MtlMethod::SW;
  if (s == "UW") return MtlMethod::UW;
  if (s == "DWA") return MtlMethod::DWA;
  if (s == "PCGrad") return MtlMethod::PCGrad;
  throw InvalidArgument("unknown MTL method: " + s);
}

struct TaskLosses {
  double main = 0.0;      // L_m
  double backdoor = 0.0;  // L_b
};

/// Flat gradient over a model's parameters in canonical order.
template <typename T>
using GradientVector = std::vector<T>;

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
  require_shape(a.size() == b.size(), "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

template <typename T>
double norm(std::span<const T> a) {
  return std::sqrt(dot(a, a));
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean over the batch of ||F(X_n) - Y_n||_2.
inline double loss_main(const ImageMap& model, std::span<const ImagePair> batch) {
  require(!batch.empty(), "loss_main: empty batch");
  double s = 0.0;
  for (const auto& p : batch) s += l2_distance(model(p.input), p.target);
  return s / batch.size();
}

inline double loss_main(const I2IModel<float>& model, std::span<const ImagePair> batch) {
  return loss_main(as_map(model), batch);
}

/// Mean over the batch of ||F(apply(t, X_n)) - target(pair)||_2.
inline double loss_backdoor(const ImageMap& model, std::span<const ImagePair> batch, const Trigger& trigger,
                            const TargetProvider& target) {
  require(!batch.empty(), "loss_backdoor: empty batch");
  double s = 0.0;
  for (const auto& p : batch) s += l2_distance(model(trigger.apply(p.input)), target(p));
  return s / batch.size();
}

inline double loss_backdoor(const I2IModel<float>& model, std::span<const ImagePair> batch, const Trigger& trigger,
                            const TargetProvider& target) {
  return loss_backdoor(as_map(model), batch, trigger, target);
}

// ---------------------------------------------------------------------------
// Weighting rules
// ---------------------------------------------------------------------------

inline double combine_sw(const TaskLosses& l, double w_main = 0.9, double w_backdoor = 0.1) {
  require(w_main >= 0.0 && w_backdoor >= 0.0, "combine_sw: weights must be non-negative");
  return w_main * l.main + w_backdoor * l.backdoor;
}

/// Uncertainty weighting parametrised by log-variances s = log(sigma^2):
///   0.5 e^{-s_m} L_m + 0.5 e^{-s_b} L_b + 0.5 (s_m + s_b)
struct UwLogVars {
  double main = 0.0;
  double backdoor = 0.0;
};

inline double combine_uw(const TaskLosses& l, const UwLogVars& s) {
  require(std::isfinite(s.main) && std::isfinite(s.backdoor), "combine_uw: log-variances must be finite");
  return 0.5 * std::exp(-s.main) * l.main + 0.5 * std::exp(-s.backdoor) * l.backdoor + 0.5 * (s.main + s.backdoor);
}

/// d combine_uw / d(s_m, s_b).
inline UwLogVars combine_uw_grad(const TaskLosses& l, const UwLogVars& s) {
  return {-0.5 * std::exp(-s.main) * l.main + 0.5, -0.5 * std::exp(-s.backdoor) * l.backdoor + 0.5};
}

/// Effective loss weights of UW, e^{-s}/2.
inline std::pair<double, double> uw_weights(const UwLogVars& s) {
  return {0.5 * std::exp(-s.main), 0.5 * std::exp(-s.backdoor)};
}

struct DwaResult {
  double main = 1.0;
  double backdoor = 1.0;
  bool degenerate = false;  // a zero denominator was replaced by ratio 1
};

/// history holds per-epoch (L_m, L_b) means, oldest first. With fewer than
/// two entries both weights are 1; otherwise
///   r_i = L_i(t-1) / L_i(t-2),  w_i = 2 e^{r_i/T} / (e^{r_m/T} + e^{r_b/T}).
inline DwaResult dwa_weights(std::span<const TaskLosses> history, double temperature) {
  require(temperature > 0.0, "dwa_weights: temperature must be positive");
  DwaResult r;
  if (history.size() < 2) return r;
  const TaskLosses& prev = history[history.size() - 2];
  const TaskLosses& last = history[history.size() - 1];
  auto ratio = [&r](double num, double den) {
    if (den == 0.0) {
      r.degenerate = true;
      return 1.0;
    }
    return num / den;
  };
  const double rm = ratio(last.main, prev.main);
  const double rb = ratio(last.backdoor, prev.backdoor);
  // softmax with the larger exponent factored out
  const double mx = std::max(rm, rb) / temperature;
  const double em = std::exp(rm / temperature - mx), eb = std::exp(rb / temperature - mx);
  r.main = 2.0 * em / (em + eb);
  r.backdoor = 2.0 - r.main;
  return r;
}

template <typename T>
struct PcgradResult {
  GradientVector<T> backdoor;  // g_b after projection (or unchanged)
  bool conflict = false;       // g_m . g_b < 0
  bool degenerate = false;     // conflict with ||g_m|| = 0; g_b returned unchanged
};

/// One-sided projection: when g_m . g_b < 0, g_b is replaced by its
/// projection onto the normal plane of g_m. g_m is never modified.
template <typename T>
PcgradResult<T> pcgrad_project(std::span<const T> g_main, std::span<const T> g_backdoor) {
  require_shape(g_main.size() == g_backdoor.size(), "pcgrad_project: gradient lengths differ");
  PcgradResult<T> r;
  r.backdoor.assign(g_backdoor.begin(), g_backdoor.end());
  const double d = dot(g_main, g_backdoor);
  if (!(d < 0.0)) return r;
  r.conflict = true;
  const double nm2 = dot(g_main, g_main);
  if (nm2 == 0.0) {
    r.degenerate = true;
    return r;
  }
  const double coef = d / nm2;
  for (std::size_t i = 0; i < r.backdoor.size(); ++i)
    r.backdoor[i] = static_cast<T>(static_cast<double>(g_backdoor[i]) - coef * static_cast<double>(g_main[i]));
  return r;
}

// ---------------------------------------------------------------------------
// Combined training gradient
// ---------------------------------------------------------------------------

/// Mutable state of a weighting strategy over one training run.
struct WeightingState {
  MtlMethod method = MtlMethod::PCGrad;
  double sw_main = 0.9;
  double sw_backdoor = 0.1;
  UwLogVars uw_log_vars;
  std::vector<TaskLosses> dwa_history;  // per-epoch means, oldest first
  double dwa_temperature = 2.0;
  std::vector<std::string> warnings;

  /// Loss weights the method applies this step (PCGrad: 1, 1).
  std::pair<double, double> current_weights() const {
    switch (method) {
      case MtlMethod::SW: return {sw_main, sw_backdoor};
      case MtlMethod::UW: return uw_weights(uw_log_vars);
      case MtlMethod::DWA: {
        const auto w = dwa_weights(dwa_history, dwa_temperature);
        return {w.main, w.backdoor};
      }
      case MtlMethod::PCGrad: return {1.0, 1.0};
    }
    return {1.0, 1.0};
  }
};

struct StepGradient {
  GradientVector<float> params;
  TaskLosses losses;           // training-path batch means
  UwLogVars uw_grad;           // only meaningful for UW
  bool conflict = false;       // g_m . g_b < 0 on this batch
  double w_main = 1.0, w_backdoor = 1.0;
};

/// Per-task gradients on one batch: g_m on the clean inputs, g_b on the same
/// inputs with the trigger applied and targets from `target`.
inline std::pair<GradientVector<float>, GradientVector<float>> task_gradients(
    const I2IModel<float>& model, std::span<const ImagePair> batch, const Trigger& trigger,
    const TargetProvider& target, TaskLosses& losses) {
  require(!batch.empty(), "task_gradients: empty batch");
  std::vector<Image> clean_in, trig_in, clean_tgt, trig_tgt;
  for (const auto& p : batch) {
    clean_in.push_back(p.input);
    clean_tgt.push_back(p.target);
    trig_in.push_back(trigger.apply(p.input));
    trig_tgt.push_back(target(p));
  }
  std::vector<OutputLoss<float>> lm, lb;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    lm.push_back(l2_loss_to(clean_tgt[i]));
    lb.push_back(l2_loss_to(trig_tgt[i]));
  }
  float vm = 0, vb = 0;
  auto gm = model.grad_wrt_params(clean_in, lm, &vm);
  auto gb = model.grad_wrt_params(trig_in, lb, &vb);
  losses = {vm, vb};
  return {std::move(gm), std::move(gb)};
}

/// Gradient used for one optimiser step under the state's method.
///   SW/DWA: w_m g_m + w_b g_b;  UW: e^{-s_m}/2 g_m + e^{-s_b}/2 g_b (plus
///   log-variance gradients);  PCGrad: g_m + project(g_m, g_b).
inline StepGradient combined_step_gradient(const I2IModel<float>& model, std::span<const ImagePair> batch,
                                           const Trigger& trigger, const TargetProvider& target,
                                           WeightingState& state) {
  StepGradient out;
  auto [gm, gb] = task_gradients(model, batch, trigger, target, out.losses);
  const std::span<const float> gms = gm, gbs = gb;
  out.conflict = dot(gms, gbs) < 0.0;
  out.params.resize(gm.size());
  if (state.method == MtlMethod::PCGrad) {
    auto pr = pcgrad_project(gms, gbs);
    if (pr.degenerate) state.warnings.push_back("pcgrad: conflicting gradients with zero main-task gradient");
    for (std::size_t i = 0; i < gm.size(); ++i) out.params[i] = gm[i] + pr.backdoor[i];
    return out;
  }
  const auto [wm, wb] = state.current_weights();
  out.w_main = wm;
  out.w_backdoor = wb;
  // A zero weight drops its term entirely so SW(1, 0) is exactly g_m.
  const float fm = static_cast<float>(wm), fb = static_cast<float>(wb);
  for (std::size_t i = 0; i < gm.size(); ++i) {
    float v = 0.0f;
    if (fm != 0.0f) v = fm * gm[i];
    if (fb != 0.0f) v += fb * gb[i];
    out.params[i] = v;
  }
  if (state.method == MtlMethod::UW) out.uw_grad = combine_uw_grad(out.losses, state.uw_log_vars);
  return out;
}

}  // namespace i2ibd
