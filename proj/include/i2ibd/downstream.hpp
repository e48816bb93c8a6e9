#pragma once

// Attacking a downstream classifier through the denoiser: a classification
// UAP crafted on a surrogate is baked into per-pair backdoor targets, and the
// attack is scored on classifiers the attacker never saw.

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "i2ibd/checkpoint.hpp"
#include "i2ibd/corpus.hpp"
#include "i2ibd/error.hpp"
#include "i2ibd/image.hpp"
#include "i2ibd/metrics.hpp"
#include "i2ibd/trigger.hpp"
#include "i2ibd/zoo.hpp"

namespace i2ibd {

struct InnerAttackConfig {
  double step = 1.0 / 255.0;
  int max_steps = 50;
};

struct ClassUAP {
  Image u;
  double epsilon_u = 0.0;
  std::string surrogate_hash;
  double fooling_rate_on_S = 0.0;
  std::size_t skipped = 0;  // samples where the inner attack failed
  std::uint64_t seed = 0;
};

namespace detail {

// Gradient of the cross-entropy of `label` at input x.
inline Image class_input_gradient(const Classifier<float>& clf, const Image& x, int label) {
  typename Classifier<float>::Tape tape;
  const auto logits = clf.forward(x, &tape);
  std::vector<float> gl;
  cross_entropy<float>(logits, label, gl);
  Image gx;
  clf.backward(tape, gl, {}, &gx);
  return gx;
}

}  // namespace detail

/// Single pass over S. Whenever X_i + u is still classified as X_i, an
/// untargeted sign-gradient ascent on the cross-entropy finds a local r that
/// flips the prediction; u is then clip(u + r, -eps_u, eps_u).
inline ClassUAP generate_classification_uap(const Classifier<float>& surrogate, std::span<const Image> samples,
                                            double epsilon_u, const InnerAttackConfig& inner = {},
                                            std::uint64_t seed = 0) {
  require(!samples.empty(), "generate_classification_uap: sample set is empty");
  require(epsilon_u >= 0.0, "generate_classification_uap: epsilon_u must be >= 0");
  require(inner.step > 0.0 && inner.max_steps >= 1, "generate_classification_uap: bad inner attack config");
  const Image& first = samples.front();
  ClassUAP r;
  r.u = Image(first.channels(), first.height(), first.width());
  r.epsilon_u = epsilon_u;
  r.surrogate_hash = model_hash(surrogate);
  r.seed = seed;
  std::vector<int> preds;
  preds.reserve(samples.size());
  for (const auto& x : samples) {
    require_shape(x.same_shape(first), "generate_classification_uap: samples differ in shape");
    preds.push_back(predict(surrogate, x));
  }
  if (epsilon_u == 0.0) return r;

  const float eps = static_cast<float>(epsilon_u);
  const float step = static_cast<float>(inner.step);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Image& x = samples[i];
    if (predict(surrogate, clip01(x + r.u)) != preds[i]) continue;
    Image pert(x.channels(), x.height(), x.width());
    bool fooled = false;
    for (int k = 0; k < inner.max_steps && !fooled; ++k) {
      const Image g = detail::class_input_gradient(surrogate, clip01(x + r.u + pert), preds[i]);
      for (std::size_t j = 0; j < g.size(); ++j) pert[j] += g[j] > 0.0f ? step : (g[j] < 0.0f ? -step : 0.0f);
      fooled = predict(surrogate, clip01(x + r.u + pert)) != preds[i];
    }
    if (!fooled) {
      ++r.skipped;
      continue;
    }
    r.u = clip_symmetric(r.u + pert, eps);
  }
  std::size_t fooled = 0;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (predict(surrogate, clip01(samples[i] + r.u)) != preds[i]) ++fooled;
  r.fooling_rate_on_S = static_cast<double>(fooled) / samples.size();
  return r;
}

/// Fraction of images whose prediction moves when u is added.
inline double fooling_rate(const Classifier<float>& clf, const ClassUAP& uap, std::span<const Image> images) {
  require(!images.empty(), "fooling_rate: empty image set");
  std::size_t n = 0;
  for (const auto& x : images) n += predict(clf, clip01(x + uap.u)) != predict(clf, x) ? 1 : 0;
  return static_cast<double>(n) / images.size();
}

/// clip01(Y_n + u).
inline Image compose_backdoor_target(const ImagePair& pair, const ClassUAP& uap) {
  require_shape(pair.target.same_shape(uap.u), "compose_backdoor_target: target " + pair.target.shape_string() +
                                                   " vs uap " + uap.u.shape_string());
  return clip01(pair.target + uap.u);
}

inline TargetProvider composed_target(ClassUAP uap) {
  return [u = std::move(uap)](const ImagePair& p) { return compose_backdoor_target(p, u); };
}

struct NamedClassifier {
  std::string id;
  const Classifier<float>* model = nullptr;
};

struct TransferRow {
  std::string classifier_id;
  double agreement = 0.0;  // argmax C(F(X_n)) == argmax C(Y_n)
  double asr = 0.0;        // argmax C(F(apply(t, X_n))) != argmax C(Y_n)
  double label_accuracy = std::numeric_limits<double>::quiet_NaN();  // argmax C(F(X_n)) == label, if given
};

struct TransferOptions {
  std::string surrogate_hash;      // classifiers with this hash are rejected...
  bool include_surrogate = false;  // ...unless this diagnostic flag is set
  std::span<const int> labels;     // optional ground-truth labels, one per test pair
};

inline std::vector<TransferRow> evaluate_transfer_asr(const ImageMap& denoiser,
                                                      std::span<const NamedClassifier> classifiers,
                                                      const PairedDataset& test_pairs, const Trigger& trigger,
                                                      const TransferOptions& opt = {}) {
  require(!classifiers.empty(), "evaluate_transfer_asr: classifier list is empty");
  require(!test_pairs.empty(), "evaluate_transfer_asr: empty test set");
  require(opt.labels.empty() || opt.labels.size() == test_pairs.size(),
          "evaluate_transfer_asr: label count differs from test pair count");
  std::vector<TransferRow> rows;
  for (const auto& c : classifiers) {
    require(c.model != nullptr, "evaluate_transfer_asr: null classifier");
    if (!opt.include_surrogate && !opt.surrogate_hash.empty() && model_hash(*c.model) == opt.surrogate_hash)
      throw InvalidArgument("evaluate_transfer_asr: " + c.id + " is the surrogate; transfer evaluation excludes it");
    TransferRow row;
    row.classifier_id = c.id;
    row.asr = asr_classification(denoiser, *c.model, test_pairs, trigger);
    row.agreement = clean_path_agreement(denoiser, *c.model, test_pairs);
    if (!opt.labels.empty()) {
      std::size_t ok = 0;
      for (std::size_t i = 0; i < test_pairs.size(); ++i)
        ok += predict(*c.model, denoiser(test_pairs.pairs[i].input)) == opt.labels[i] ? 1 : 0;
      row.label_accuracy = static_cast<double>(ok) / test_pairs.size();
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace i2ibd
