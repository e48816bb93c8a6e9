#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "i2ibd/checkpoint.hpp"
#include "i2ibd/zoo.hpp"
#include "support.hpp"

using namespace i2ibd;
using i2ibd::test::random_image;
using i2ibd::test::TempDir;

namespace {

template <typename T>
void randomize(std::span<T> params, std::uint64_t seed, double scale = 0.2) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& p : params) p = static_cast<T>(nd(rng));
}

Tensor3<double> random_dimage(int c, int h, int w, std::uint64_t seed) {
  return random_image(c, h, w, seed).cast<double>();
}

// |a - n| <= 1e-2 * max(|a|, |n|), with an absolute floor for coordinates
// whose true gradient is numerically zero.
void expect_grad_close(double analytic, double numeric, const std::string& what) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  EXPECT_LE(std::abs(analytic - numeric), 1e-2 * scale + 1e-8)
      << what << ": analytic " << analytic << " numeric " << numeric;
}

double i2i_loss(const I2IModel<double>& m, const Tensor3<double>& x, const Tensor3<double>& target) {
  Tensor3<double> g;
  return l2_loss_to(target)(m.forward_train(x), g);
}

void check_i2i_gradients(I2IModel<double> m, int in_h, int in_w, std::uint64_t seed) {
  randomize(m.params(), seed);
  const int c = m.hyper().channels;
  const auto x = random_dimage(c, in_h, in_w, seed + 1);
  const auto target = random_dimage(c, m.output_height(in_h), m.output_width(in_w), seed + 2);
  const double h = 1e-3;
  std::mt19937_64 rng(seed + 3);

  const auto gx = m.grad_wrt_input(x, l2_loss_to(target));
  ASSERT_TRUE(gx.same_shape(x));
  std::uniform_int_distribution<std::size_t> pick_x(0, x.size() - 1);
  for (int k = 0; k < 10; ++k) {
    const std::size_t i = pick_x(rng);
    auto xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    expect_grad_close(gx[i], (i2i_loss(m, xp, target) - i2i_loss(m, xm, target)) / (2 * h),
                      "input coord " + std::to_string(i));
  }

  const std::vector<Tensor3<double>> xs = {x};
  const std::vector<OutputLoss<double>> losses = {l2_loss_to(target)};
  const auto gp = m.grad_wrt_params(xs, losses);
  ASSERT_EQ(gp.size(), m.param_count());
  std::uniform_int_distribution<std::size_t> pick_p(0, m.param_count() - 1);
  for (int k = 0; k < 10; ++k) {
    const std::size_t i = pick_p(rng);
    const double orig = m.params()[i];
    m.params()[i] = orig + h;
    const double lp = i2i_loss(m, x, target);
    m.params()[i] = orig - h;
    const double lm = i2i_loss(m, x, target);
    m.params()[i] = orig;
    expect_grad_close(gp[i], (lp - lm) / (2 * h), "param coord " + std::to_string(i));
  }
}

double ce_loss(const Classifier<double>& c, const Tensor3<double>& x, int label) {
  std::vector<double> g;
  const auto logits = c.forward(x);
  return cross_entropy<double>(logits, label, g);
}

void check_classifier_gradients(ClassifierArch arch, std::uint64_t seed) {
  Classifier<double> c(arch, {3, 10});
  c.initialize(seed);
  const auto x = random_dimage(3, 16, 16, seed + 1);
  const int label = 3;
  typename Classifier<double>::Tape tape;
  const auto logits = c.forward(x, &tape);
  std::vector<double> gl;
  cross_entropy<double>(logits, label, gl);
  std::vector<double> gp(c.param_count(), 0.0);
  Tensor3<double> gx;
  c.backward(tape, gl, gp, &gx);
  const double h = 1e-3;
  std::mt19937_64 rng(seed + 2);
  std::uniform_int_distribution<std::size_t> pick_x(0, x.size() - 1), pick_p(0, c.param_count() - 1);
  for (int k = 0; k < 10; ++k) {
    const std::size_t i = pick_x(rng);
    auto xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    expect_grad_close(gx[i], (ce_loss(c, xp, label) - ce_loss(c, xm, label)) / (2 * h), "input");
  }
  for (int k = 0; k < 10; ++k) {
    const std::size_t i = pick_p(rng);
    const double orig = c.params()[i];
    c.params()[i] = orig + h;
    const double lp = ce_loss(c, x, label);
    c.params()[i] = orig - h;
    const double lm = ce_loss(c, x, label);
    c.params()[i] = orig;
    expect_grad_close(gp[i], (lp - lm) / (2 * h), "param " + std::to_string(i));
  }
}

}  // namespace

TEST(Denoiser, FreshModelIsTheIdentity) {
  auto m = I2IModel<float>::denoiser(3, 8, 2);
  m.initialize(1);
  const Image x = random_image(3, 20, 20, 2);
  EXPECT_EQ(m.forward(x), x);
  EXPECT_EQ(m.forward_train(x), x);
}

TEST(Denoiser, InitialMainLossIsTheNoisyToCleanDistance) {
  auto m = I2IModel<float>::denoiser(3, 8, 2);
  m.initialize(4);
  const Image x = random_image(3, 16, 16, 5), y = random_image(3, 16, 16, 6);
  Image g;
  EXPECT_FLOAT_EQ(l2_loss_to(y)(m.forward_train(x), g), static_cast<float>(l2_distance(x, y)));
}

TEST(Denoiser, ForwardIsDeterministicAndShapePreserving) {
  auto m = I2IModel<float>::denoiser(1, 8, 3);
  m.initialize(3);
  randomize(m.params(), 9);
  const Image x = random_image(1, 15, 11, 4);
  const Image a = m.forward(x), b = m.forward(x);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(a.same_shape(x));
  for (float v : a.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_THROW(m.forward(random_image(3, 15, 11, 4)), ShapeError);
}

TEST(SuperResolver, FreshModelIsBicubicUpsampling) {
  auto m = I2IModel<float>::super_resolver(2, 3, 8, 2);
  m.initialize(1);
  const Image x = random_image(3, 8, 8, 2);
  const Image y = m.forward(x);
  ASSERT_EQ(y.height(), 16);
  ASSERT_EQ(y.width(), 16);
  EXPECT_EQ(y, clip01(bicubic_upsample(x, 2)));
}

TEST(Gradients, DenoiserMatchesCentralDifferences) {
  check_i2i_gradients(I2IModel<float>::denoiser(3, 6, 3).cast<double>(), 10, 10, 11);
}

TEST(Gradients, SuperResolverMatchesCentralDifferences) {
  check_i2i_gradients(I2IModel<float>::super_resolver(2, 3, 6, 2).cast<double>(), 6, 6, 12);
}

TEST(Gradients, ClassifiersMatchCentralDifferences) {
  check_classifier_gradients(ClassifierArch::toy_cnn_a, 21);
  check_classifier_gradients(ClassifierArch::toy_cnn_b, 22);
  check_classifier_gradients(ClassifierArch::toy_cnn_c, 23);
}

TEST(Gradients, ZeroAtTheEvaluationPointOfASelfReferencedLoss) {
  auto m = I2IModel<float>::denoiser(3, 6, 2);
  randomize(m.params(), 30, 0.05);
  const Image x = random_image(3, 10, 10, 31, 0.2f, 0.8f);
  const Image ref = m.forward_train(x);
  const Image g = m.grad_wrt_input(x, squared_l2_loss_to(ref));
  ASSERT_TRUE(g.same_shape(x));
  for (float v : g.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Gradients, FreshDenoiserOnlyFeedsTheOutputLayer) {
  auto m = I2IModel<float>::denoiser(3, 6, 2);
  m.initialize(40);
  const Image x = random_image(3, 10, 10, 41, 0.2f, 0.8f);
  const Image y = random_image(3, 10, 10, 42, 0.2f, 0.8f);
  const std::vector<Image> xs = {x};
  const std::vector<OutputLoss<float>> losses = {squared_l2_loss_to(y)};
  const auto g = m.grad_wrt_params(xs, losses);
  bool out_bias_nonzero = false;
  for (const auto& b : m.layout().blocks()) {
    const bool is_output = b.name.rfind("conv_out", 0) == 0;
    for (std::size_t i = b.offset; i < b.offset + b.count; ++i) {
      if (!is_output) {
        EXPECT_EQ(g[i], 0.0f) << b.name;
      }
      if (b.name == "conv_out.bias" && g[i] != 0.0f) out_bias_nonzero = true;
    }
  }
  EXPECT_TRUE(out_bias_nonzero);
}

TEST(Gradients, ScalingTheLossScalesTheGradient) {
  auto m = I2IModel<float>::denoiser(3, 6, 2);
  randomize(m.params(), 50);
  const Image x = random_image(3, 10, 10, 51), y = random_image(3, 10, 10, 52);
  const OutputLoss<float> base = squared_l2_loss_to(y);
  const OutputLoss<float> doubled = [&](const Image& out, Image& grad) {
    const float v = base(out, grad);
    grad *= 2.0f;
    return 2.0f * v;
  };
  const std::vector<Image> xs = {x};
  const auto g1 = m.grad_wrt_params(xs, std::vector<OutputLoss<float>>{base});
  const auto g2 = m.grad_wrt_params(xs, std::vector<OutputLoss<float>>{doubled});
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_EQ(g2[i], 2.0f * g1[i]);
}

TEST(Gradients, ParameterOrderIsStable) {
  auto m = I2IModel<float>::denoiser(3, 6, 2);
  auto n = I2IModel<float>::denoiser(3, 6, 2);
  ASSERT_EQ(m.layout().blocks().size(), n.layout().blocks().size());
  for (std::size_t i = 0; i < m.layout().blocks().size(); ++i) {
    EXPECT_EQ(m.layout().blocks()[i].name, n.layout().blocks()[i].name);
    EXPECT_EQ(m.layout().blocks()[i].offset, n.layout().blocks()[i].offset);
  }
}

TEST(Classifier, LogitsHaveOneEntryPerClassAndAreDeterministic) {
  Classifier<float> c(ClassifierArch::toy_cnn_b, {3, 10});
  c.initialize(5);
  const Image x = random_image(3, 32, 32, 6);
  const auto a = c.forward(x), b = c.forward(x);
  EXPECT_EQ(a.size(), 10u);
  EXPECT_EQ(a, b);
}

TEST(Classifier, ArgmaxIgnoresAConstantShift) {
  std::vector<float> logits = {0.3f, -1.0f, 2.5f, 0.0f};
  const int before = argmax<float>(logits);
  for (auto& v : logits) v += 17.0f;
  EXPECT_EQ(argmax<float>(logits), before);
}

TEST(Checkpoint, RoundTripPreservesForward) {
  TempDir dir("ckpt");
  auto m = I2IModel<float>::denoiser(3, 8, 2);
  randomize(m.params(), 60, 0.05);
  save_checkpoint(m, {7, 3, "abc"}, dir.path() / "m");
  CheckpointMeta meta;
  const auto back = load_i2i_checkpoint(dir.path() / "m", I2IArch::toy_denoiser, &meta);
  const Image x = random_image(3, 12, 12, 61);
  EXPECT_EQ(back.forward(x), m.forward(x));
  EXPECT_EQ(meta.seed, 7u);
  EXPECT_EQ(meta.epoch, 3);
  EXPECT_EQ(model_hash(back), model_hash(m));
}

TEST(Checkpoint, ClassifierRoundTrip) {
  TempDir dir("ckpt");
  Classifier<float> c(ClassifierArch::toy_cnn_c, {3, 10});
  c.initialize(62);
  save_checkpoint(c, {}, dir.path() / "c");
  const auto back = load_classifier_checkpoint(dir.path() / "c", ClassifierArch::toy_cnn_c);
  const Image x = random_image(3, 16, 16, 63);
  EXPECT_EQ(back.forward(x), c.forward(x));
  EXPECT_THROW(load_classifier_checkpoint(dir.path() / "c", ClassifierArch::toy_cnn_a), ArchMismatchError);
  EXPECT_THROW(load_i2i_checkpoint(dir.path() / "c"), ArchMismatchError);
}

TEST(Checkpoint, WrongArchIsRejected) {
  TempDir dir("ckpt");
  auto m = I2IModel<float>::denoiser(3, 4, 1);
  save_checkpoint(m, {}, dir.path() / "m");
  EXPECT_THROW(load_i2i_checkpoint(dir.path() / "m", I2IArch::toy_sr), ArchMismatchError);
}

TEST(Checkpoint, BlobHashIsStableAndTamperingIsDetected) {
  TempDir dir("ckpt");
  auto m = I2IModel<float>::denoiser(3, 4, 1);
  randomize(m.params(), 64);
  const auto h1 = save_checkpoint(m, {}, dir.path() / "a");
  const auto h2 = save_checkpoint(m, {}, dir.path() / "b");
  EXPECT_EQ(h1, h2);
  EXPECT_EQ(h1, sha256_file(dir.path() / "a" / "params.bin"));
  {
    std::fstream f(dir.path() / "a" / "params.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(5);
    f.put('\x7f');
  }
  EXPECT_THROW(load_i2i_checkpoint(dir.path() / "a"), HashMismatchError);
  EXPECT_THROW(load_i2i_checkpoint(dir.path() / "missing"), MissingArtifactError);
}
