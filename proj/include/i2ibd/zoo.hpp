#pragma once

// Toy model zoo: residual conv image-to-image networks and three small
// classifiers. Each model owns one flat parameter vector; see nn.hpp.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "i2ibd/image.hpp"
#include "i2ibd/nn.hpp"

namespace i2ibd {

enum class I2IArch { toy_denoiser, toy_sr };
enum class ClassifierArch { toy_cnn_a, toy_cnn_b, toy_cnn_c };

inline std::string to_string(I2IArch a) {
  return a == I2IArch::toy_denoiser ? "toy_denoiser" : "toy_sr";
}

inline I2IArch parse_i2i_arch(const std::string& s) {
  if (s == "toy_denoiser") return I2IArch::toy_denoiser;
  if (s == "toy_sr") return I2IArch::toy_sr;
  throw InvalidArgument("unknown I2I arch_id: " + s);
}

inline std::string to_string(ClassifierArch a) {
  switch (a) {
    case ClassifierArch::toy_cnn_a: return "toy_cnn_a";
    case ClassifierArch::toy_cnn_b: return "toy_cnn_b";
    case ClassifierArch::toy_cnn_c: return "toy_cnn_c";
  }
  return "?";
}

inline ClassifierArch parse_classifier_arch(const std::string& s) {
  if (s == "toy_cnn_a") return ClassifierArch::toy_cnn_a;
  if (s == "toy_cnn_b") return ClassifierArch::toy_cnn_b;
  if (s == "toy_cnn_c") return ClassifierArch::toy_cnn_c;
  throw InvalidArgument("unknown classifier arch_id: " + s);
}

struct I2IHyper {
  int channels = 3;  // image channels in and out
  int width = 32;    // feature channels of the hidden convs
  int depth = 4;     // number of hidden 3x3 convs before the output conv
  int scale = 1;     // upsampling factor; 1 for the denoiser

  friend bool operator==(const I2IHyper&, const I2IHyper&) = default;
};

/// Per-image loss on a model output: returns the scalar value and writes
/// dLoss/dOutput into `grad`.
template <typename T>
using OutputLoss = std::function<T(const Tensor3<T>& output, Tensor3<T>& grad)>;

/// ||output - target||_2 with a zero (sub)gradient at the kink.
template <typename T>
OutputLoss<T> l2_loss_to(const Tensor3<T>& target) {
  return [&target](const Tensor3<T>& out, Tensor3<T>& grad) {
    require_shape(out.same_shape(target), "l2 loss: output/target shape mismatch");
    grad = out - target;
    const double n = l2_norm(grad);
    if (n > 0.0) grad *= static_cast<T>(1.0 / n);
    else grad.fill(T(0));
    return static_cast<T>(n);
  };
}

/// ||output - target||_2^2.
template <typename T>
OutputLoss<T> squared_l2_loss_to(const Tensor3<T>& target) {
  return [&target](const Tensor3<T>& out, Tensor3<T>& grad) {
    require_shape(out.same_shape(target), "squared l2 loss: output/target shape mismatch");
    grad = out - target;
    const double n = l2_norm(grad);
    grad *= T(2);
    return static_cast<T>(n * n);
  };
}

/// Residual conv image-to-image network.
///   toy_denoiser: out = clamp(x + conv_out(silu(conv_k(...silu(conv_1(x))))))
///   toy_sr:       same stack applied to the bicubic upsample of x
/// The output conv starts at zero, so a fresh model is the identity
/// (denoiser) or plain bicubic upsampling (super-resolver).
template <typename T>
class I2IModel {
 public:
  struct Tape {
    Tensor3<T> base;                  // skip-path input (x or its upsample)
    std::vector<nn::RowMat<T>> padded;  // padded input of every conv, in order
    std::vector<Tensor3<T>> pre;      // pre-activation of each hidden conv
    Tensor3<T> pre_clamp;
  };

  I2IModel() = default;
  I2IModel(I2IArch arch, I2IHyper hyper) : arch_(arch), hyper_(hyper) {
    require(hyper.channels == 1 || hyper.channels == 3, "I2IModel: channels must be 1 or 3");
    require(hyper.width >= 1 && hyper.depth >= 1, "I2IModel: width and depth must be >= 1");
    if (arch == I2IArch::toy_denoiser) require(hyper.scale == 1, "toy_denoiser: scale must be 1");
    else require(hyper.scale == 2 || hyper.scale == 4, "toy_sr: scale must be 2 or 4");
    int in = hyper.channels;
    for (int l = 0; l < hyper.depth; ++l) {
      convs_.push_back(nn::Conv3x3::make(layout_, "conv" + std::to_string(l), in, hyper.width));
      in = hyper.width;
    }
    convs_.push_back(nn::Conv3x3::make(layout_, "conv_out", in, hyper.channels));
    params_.assign(layout_.total(), T(0));
  }

  static I2IModel denoiser(int channels = 3, int width = 32, int depth = 4) {
    return I2IModel(I2IArch::toy_denoiser, {channels, width, depth, 1});
  }
  static I2IModel super_resolver(int scale, int channels = 3, int width = 32, int depth = 4) {
    return I2IModel(I2IArch::toy_sr, {channels, width, depth, scale});
  }

  /// Fan-in scaled random hidden layers, zero output conv.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::fill(params_.begin(), params_.end(), T(0));
    for (std::size_t l = 0; l + 1 < convs_.size(); ++l) nn::init_conv<T>(params_, convs_[l], rng);
  }

  I2IArch arch() const { return arch_; }
  const I2IHyper& hyper() const { return hyper_; }
  const nn::ParamLayout& layout() const { return layout_; }
  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }
  std::size_t param_count() const { return params_.size(); }

  int output_height(int in_h) const { return in_h * hyper_.scale; }
  int output_width(int in_w) const { return in_w * hyper_.scale; }

  /// Inference path with a hard clip to [0,1].
  Tensor3<T> forward(const Tensor3<T>& x) const {
    return clip01(run(x, nullptr));
  }

  /// Differentiable path: soft saturating clamp, optional tape for backward().
  Tensor3<T> forward_train(const Tensor3<T>& x, Tape* tape = nullptr) const {
    Tensor3<T> out = run(x, tape);
    for (auto& v : out.values()) v = nn::soft_clamp(v);
    return out;
  }

  /// Back-propagates dLoss/dOutput. Parameter gradients accumulate into
  /// `grad_params` when it is non-empty; the input gradient is written to
  /// `grad_x` when non-null.
  void backward(const Tape& tape, const Tensor3<T>& grad_out, std::span<T> grad_params,
                Tensor3<T>* grad_x) const {
    require_shape(grad_out.same_shape(tape.pre_clamp), "I2IModel::backward: gradient shape mismatch");
    require(grad_params.empty() || grad_params.size() == params_.size(),
            "I2IModel::backward: gradient buffer has wrong length");
    Tensor3<T> g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= nn::soft_clamp_grad(tape.pre_clamp[i]);
    Tensor3<T> grad_base = g;
    std::span<const T> p = params_;
    const bool need_input = grad_x != nullptr;
    for (std::size_t l = convs_.size(); l-- > 0;) {
      Tensor3<T> gin;
      const bool first = l == 0;
      conv_backward(p, convs_[l], tape.padded[l], g.height(), g.width(), g, grad_params,
                    (!first || need_input) ? &gin : nullptr);
      if (first) {
        if (need_input) grad_base += gin;
        break;
      }
      nn::silu_backward_inplace(tape.pre[l - 1], gin);
      g = std::move(gin);
    }
    if (!need_input) return;
    if (arch_ == I2IArch::toy_sr) {
      *grad_x = apply_separable_adjoint(grad_base, upsample_rows_, upsample_cols_);
    } else {
      *grad_x = std::move(grad_base);
    }
  }

  /// Gradient of a scalar loss of the training-path output with respect to
  /// the input image. Parameters are not touched.
  Tensor3<T> grad_wrt_input(const Tensor3<T>& x, const OutputLoss<T>& loss, T* loss_value = nullptr) const {
    Tape tape;
    Tensor3<T> out = forward_train(x, &tape);
    Tensor3<T> g;
    const T v = loss(out, g);
    if (loss_value) *loss_value = v;
    Tensor3<T> gx;
    backward(tape, g, {}, &gx);
    return gx;
  }

  /// Gradient of the mean per-item loss over a batch with respect to all
  /// parameters, in canonical (storage) order.
  std::vector<T> grad_wrt_params(std::span<const Tensor3<T>> inputs,
                                 std::span<const OutputLoss<T>> losses, T* loss_value = nullptr) const {
    require(!inputs.empty(), "grad_wrt_params: empty batch");
    require(inputs.size() == losses.size(), "grad_wrt_params: inputs/losses length mismatch");
    std::vector<T> grad(params_.size(), T(0));
    double total = 0.0;
    const T inv = T(1) / static_cast<T>(inputs.size());
    Tape tape;  // buffers reused across the batch
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      Tensor3<T> out = forward_train(inputs[i], &tape);
      Tensor3<T> g;
      total += losses[i](out, g);
      g *= inv;
      backward(tape, g, grad, nullptr);
    }
    if (loss_value) *loss_value = static_cast<T>(total / inputs.size());
    return grad;
  }

  template <typename U>
  I2IModel<U> cast() const {
    I2IModel<U> m(arch_, hyper_);
    for (std::size_t i = 0; i < params_.size(); ++i) m.params()[i] = static_cast<U>(params_[i]);
    return m;
  }

 private:
  Tensor3<T> run(const Tensor3<T>& x, Tape* tape) const {
    require_shape(x.channels() == hyper_.channels,
                  "I2IModel: expected " + std::to_string(hyper_.channels) + " channels, got " +
                      std::to_string(x.channels()));
    Tensor3<T> base = x;
    if (arch_ == I2IArch::toy_sr) {
      if (upsample_rows_.in_size != x.height() || upsample_cols_.in_size != x.width()) {
        upsample_rows_ = bicubic_weights(x.height(), x.height() * hyper_.scale);
        upsample_cols_ = bicubic_weights(x.width(), x.width() * hyper_.scale);
      }
      base = apply_separable(x, upsample_rows_, upsample_cols_);
    }
    std::span<const T> p = params_;
    Tensor3<T> h = base;
    if (tape) {
      tape->padded.resize(convs_.size());
      tape->pre.clear();
    }
    for (std::size_t l = 0; l + 1 < convs_.size(); ++l) {
      Tensor3<T> z = conv_forward(p, convs_[l], h, tape ? &tape->padded[l] : nullptr);
      h = nn::silu(z);
      if (tape) tape->pre.push_back(std::move(z));
    }
    Tensor3<T> out = conv_forward(p, convs_.back(), h, tape ? &tape->padded.back() : nullptr);
    out += base;
    if (tape) {
      tape->base = std::move(base);
      tape->pre_clamp = out;
    }
    return out;
  }

  I2IArch arch_ = I2IArch::toy_denoiser;
  I2IHyper hyper_;
  nn::ParamLayout layout_;
  std::vector<nn::Conv3x3> convs_;
  std::vector<T, Eigen::aligned_allocator<T>> params_;
  // Cached resampling operators for the most recent input size (toy_sr only).
  mutable Resample1D upsample_rows_, upsample_cols_;
};

struct ClassifierHyper {
  int channels = 3;
  int num_classes = 10;
  friend bool operator==(const ClassifierHyper&, const ClassifierHyper&) = default;
};

/// Small conv classifiers: a stack of (conv3x3, silu, optional 2x avg-pool)
/// stages, global average pooling and a linear head producing K logits.
template <typename T>
class Classifier {
 public:
  struct Stage {
    nn::Conv3x3 conv;
    bool pool = false;
  };
  struct Tape {
    std::vector<nn::RowMat<T>> padded;
    std::vector<Tensor3<T>> pre;
    Tensor3<T> last;  // feature map fed to global pooling
    std::vector<T> pooled;
  };

  Classifier() = default;
  Classifier(ClassifierArch arch, ClassifierHyper hyper) : arch_(arch), hyper_(hyper) {
    require(hyper.num_classes >= 2, "Classifier: need at least two classes");
    struct S {
      int out;
      bool pool;
    };
    std::vector<S> plan;
    switch (arch) {
      case ClassifierArch::toy_cnn_a: plan = {{16, true}, {32, true}, {32, true}, {32, false}}; break;
      case ClassifierArch::toy_cnn_b: plan = {{8, false}, {12, true}, {16, true}, {24, true}, {24, true}}; break;
      case ClassifierArch::toy_cnn_c: plan = {{24, true}, {24, true}, {48, false}}; break;
    }
    int in = hyper.channels;
    for (std::size_t i = 0; i < plan.size(); ++i) {
      stages_.push_back({nn::Conv3x3::make(layout_, "conv" + std::to_string(i), in, plan[i].out), plan[i].pool});
      in = plan[i].out;
    }
    head_ = nn::Dense::make(layout_, "fc", in, hyper.num_classes);
    params_.assign(layout_.total(), T(0));
  }

  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& s : stages_) nn::init_conv<T>(params_, s.conv, rng);
    nn::init_dense<T>(params_, head_, rng);
  }

  ClassifierArch arch() const { return arch_; }
  const ClassifierHyper& hyper() const { return hyper_; }
  const nn::ParamLayout& layout() const { return layout_; }
  int num_classes() const { return hyper_.num_classes; }
  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }
  std::size_t param_count() const { return params_.size(); }

  std::vector<T> forward(const Tensor3<T>& x, Tape* tape = nullptr) const {
    require_shape(x.channels() == hyper_.channels, "Classifier: channel mismatch");
    std::span<const T> p = params_;
    Tensor3<T> h = x;
    if (tape) {
      tape->padded.resize(stages_.size());
      tape->pre.clear();
    }
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const auto& s = stages_[i];
      Tensor3<T> z = conv_forward(p, s.conv, h, tape ? &tape->padded[i] : nullptr);
      Tensor3<T> a = nn::silu(z);
      if (tape) tape->pre.push_back(std::move(z));
      h = s.pool ? nn::avgpool2(a) : std::move(a);
    }
    std::vector<T> pooled = nn::global_avgpool(h);
    std::vector<T> logits = nn::dense_forward<T>(p, head_, pooled);
    if (tape) {
      tape->last = std::move(h);
      tape->pooled = std::move(pooled);
    }
    return logits;
  }

  void backward(const Tape& tape, std::span<const T> grad_logits, std::span<T> grad_params,
                Tensor3<T>* grad_x) const {
    std::span<const T> p = params_;
    std::vector<T> gpool = nn::dense_backward<T>(p, head_, tape.pooled, grad_logits, grad_params);
    Tensor3<T> g = nn::global_avgpool_backward<T>(gpool, tape.last.height(), tape.last.width());
    for (std::size_t i = stages_.size(); i-- > 0;) {
      if (stages_[i].pool) g = nn::avgpool2_backward(g);
      nn::silu_backward_inplace(tape.pre[i], g);
      Tensor3<T> gin;
      const bool want_in = i > 0 || grad_x != nullptr;
      conv_backward(p, stages_[i].conv, tape.padded[i], g.height(), g.width(), g, grad_params,
                    want_in ? &gin : nullptr);
      if (i == 0) {
        if (grad_x) *grad_x = std::move(gin);
      } else {
        g = std::move(gin);
      }
    }
  }

  template <typename U>
  Classifier<U> cast() const {
    Classifier<U> m(arch_, hyper_);
    for (std::size_t i = 0; i < params_.size(); ++i) m.params()[i] = static_cast<U>(params_[i]);
    return m;
  }

 private:
  ClassifierArch arch_ = ClassifierArch::toy_cnn_a;
  ClassifierHyper hyper_;
  nn::ParamLayout layout_;
  std::vector<Stage> stages_;
  nn::Dense head_;
  std::vector<T, Eigen::aligned_allocator<T>> params_;
};

template <typename T>
int argmax(std::span<const T> v) {
  require(!v.empty(), "argmax: empty vector");
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Softmax cross-entropy; writes dLoss/dLogits into `grad`.
template <typename T>
T cross_entropy(std::span<const T> logits, int label, std::vector<T>& grad) {
  const T m = *std::max_element(logits.begin(), logits.end());
  T z = 0;
  grad.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    grad[i] = std::exp(logits[i] - m);
    z += grad[i];
  }
  for (auto& g : grad) g /= z;
  const T loss = -(logits[label] - m - std::log(z));
  grad[label] -= T(1);
  return loss;
}

template <typename T>
int predict(const Classifier<T>& clf, const Tensor3<T>& x) {
  const auto logits = clf.forward(x);
  return argmax<T>(logits);
}

}  // namespace i2ibd
