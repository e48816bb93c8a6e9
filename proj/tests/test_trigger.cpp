#include <gtest/gtest.h>

#include "i2ibd/corpus.hpp"
#include "i2ibd/train.hpp"
#include "i2ibd/trigger.hpp"
#include "support.hpp"

using namespace i2ibd;
using i2ibd::test::random_image;

namespace {

// Small denoiser trained for a few epochs; shared by the UAP tests.
const I2IModel<float>& small_victim() {
  static const I2IModel<float> m = [] {
    const auto cleans = synth_structured_corpus(48, 32, 32, 3, 5);
    const auto d = synthesize_denoise_pairs(cleans, default_noise_sigma, 6);
    auto model = I2IModel<float>::denoiser(3, 8, 2);
    model.initialize(7);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.optimizer.learning_rate = 1e-3;
    return train_clean(std::move(model), d, cfg).model;
  }();
  return m;
}

std::vector<Image> samples(int n, std::uint64_t seed) {
  const auto d = synthesize_denoise_pairs(synth_structured_corpus(n, 32, 32, 3, seed), default_noise_sigma, seed);
  std::vector<Image> out;
  for (const auto& p : d.pairs) out.push_back(p.input);
  return out;
}

}  // namespace

TEST(ApplyTrigger, AdditiveFieldAddsAndClips) {
  const Trigger t = make_additive_trigger(Image(3, 4, 4, 0.1f), 0.2);
  const Image out = t.apply(Image(3, 4, 4, 0.5f));
  for (float v : out.values()) EXPECT_NEAR(v, 0.6f, 1e-6);
  const Trigger big = make_additive_trigger(Image(1, 2, 2, 20.0f / 255.0f), 20.0 / 255.0);
  for (float v : big.apply(Image(1, 2, 2, 0.99f)).values()) EXPECT_EQ(v, 1.0f);
}

TEST(ApplyTrigger, BlendWithZeroAlphaIsTheIdentity) {
  Trigger t;
  t.kind = TriggerKind::blend;
  t.alpha = 0.0;
  t.delta = random_image(3, 8, 8, 1);
  const Image x = random_image(3, 8, 8, 2);
  EXPECT_EQ(t.apply(x), x);
}

TEST(ApplyTrigger, PatchChangesOnlyItsCorner) {
  const Trigger t = make_patch_trigger(8, 3);
  const Image x = random_image(3, 64, 64, 4);
  const Image y = t.apply(x);
  for (int c = 0; c < 3; ++c)
    for (int yy = 0; yy < 64; ++yy)
      for (int xx = 0; xx < 64; ++xx) {
        if (yy >= 56 && xx >= 56) EXPECT_EQ(y(c, yy, xx), t.delta(c, yy - 56, xx - 56));
        else EXPECT_EQ(y(c, yy, xx), x(c, yy, xx));
      }
}

TEST(ApplyTrigger, OutputStaysInTheUnitRangeForEveryKind) {
  const std::vector<Trigger> triggers = {
      make_additive_trigger(random_image(3, 16, 16, 5, -0.5f, 0.5f), 0.5), make_patch_trigger(4, 6),
      make_blend_trigger(7, 0.3, 3, 16, 16), make_gaussian_trigger(0.5, 0.4, 8, 3, 16, 16)};
  for (const auto& t : triggers)
    for (std::uint64_t s = 0; s < 20; ++s)
      for (float v : t.apply(random_image(3, 16, 16, 100 + s)).values()) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
      }
}

TEST(ApplyTrigger, ShapeMismatchIsReported) {
  EXPECT_THROW(make_zero_trigger(3, 8, 8).apply(Image(3, 8, 9)), ShapeError);
  EXPECT_THROW(make_patch_trigger(10, 1).apply(Image(3, 8, 8)), ShapeError);
}

TEST(BaselineTriggers, SameSeedSameTrigger) {
  EXPECT_EQ(make_patch_trigger(8, 11).delta, make_patch_trigger(8, 11).delta);
  EXPECT_EQ(make_blend_trigger(12, 0.1).delta, make_blend_trigger(12, 0.1).delta);
  EXPECT_EQ(make_gaussian_trigger(0.1, 0.08, 13).delta, make_gaussian_trigger(0.1, 0.08, 13).delta);
  EXPECT_NE(make_patch_trigger(8, 11).delta, make_patch_trigger(8, 12).delta);
}

TEST(BaselineTriggers, GaussianRespectsItsBound) {
  const Trigger t = make_gaussian_trigger(0.5, 20.0 / 255.0, 14);
  EXPECT_LE(linf_norm(t.delta), 20.0 / 255.0 + 1e-7);
}

TEST(BaselineTriggers, InvalidParametersAreRejected) {
  EXPECT_THROW(make_blend_trigger(1, 0.0), InvalidArgument);
  EXPECT_THROW(make_gaussian_trigger(-1.0, 0.1, 1), InvalidArgument);
  EXPECT_THROW(make_patch_trigger(0, 1), InvalidArgument);
}

TEST(Uap, ZeroIterationsReturnsTheInitialization) {
  const auto& victim = small_victim();
  const auto S = samples(3, 20);
  UapConfig cfg;
  cfg.iterations = 0;
  cfg.seed = 21;
  const Trigger t = generate_uap_trigger(victim, S, make_bug_target(32, 32, 3), cfg);
  EXPECT_EQ(t.delta, random_bounded_field(3, 32, 32, cfg.epsilon, 21));
  EXPECT_LE(linf_norm(t.delta), cfg.epsilon);
}

TEST(Uap, BoundDeterminismAndProvenance) {
  const auto& victim = small_victim();
  const auto S = samples(4, 22);
  UapConfig cfg;
  cfg.seed = 23;
  cfg.iterations = 5;
  const Trigger a = generate_uap_trigger(victim, S, make_bug_target(32, 32, 3), cfg);
  const Trigger b = generate_uap_trigger(victim, S, make_bug_target(32, 32, 3), cfg);
  EXPECT_EQ(a.delta, b.delta);
  EXPECT_LE(linf_norm(a.delta), 20.0 / 255.0 + 1e-7);
  ASSERT_TRUE(a.provenance.has_value());
  EXPECT_EQ(a.provenance->victim_hash, model_hash(victim));
  EXPECT_EQ(a.provenance->sample_count, 4u);
  EXPECT_EQ(a.provenance->iterations, 5);
}

TEST(Uap, MovesOutputsTowardTheTargetOnMostSeeds) {
  const auto& victim = small_victim();
  const auto S = samples(5, 24);
  const Image target = make_bug_target(32, 32, 3);
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    UapConfig cfg;
    cfg.seed = 100 + seed;
    cfg.iterations = 0;
    const Trigger init = generate_uap_trigger(victim, S, target, cfg);
    cfg.iterations = 20;
    const Trigger fin = generate_uap_trigger(victim, S, target, cfg);
    if (mean_target_distance(victim, fin, S, target) <= mean_target_distance(victim, init, S, target)) ++improved;
  }
  EXPECT_GE(improved, 9);
}

TEST(Uap, PerSampleTargetsMustMatchTheSampleCount) {
  const auto& victim = small_victim();
  const auto S = samples(3, 25);
  const std::vector<Image> two(2, make_bug_target(32, 32, 3));
  EXPECT_THROW(generate_uap_trigger(victim, S, two, UapConfig{}), InvalidArgument);
  EXPECT_THROW(generate_uap_trigger(victim, S, make_bug_target(16, 16, 3), UapConfig{}), ShapeError);
}
