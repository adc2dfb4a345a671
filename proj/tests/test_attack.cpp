#include <gtest/gtest.h>

#include <cmath>
#include <type_traits>

#include "cta/attack.hpp"
#include "cta/pipeline.hpp"
#include "test_util.hpp"

using namespace cta;
using namespace cta::attack;

TEST(Generator, ZeroInitialisedOutputIsIdentity) {
  Generator<float> g(4, 16.0 / 255);
  Rng rng(1);
  g.init(rng);
  const auto x = test::random_images(2, 32, 5);
  const auto out = generator_forward(g, x);
  for (float v : out.delta.vec()) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(out.x_prime.vec(), x.vec());
}

TEST(Generator, PerturbationBoundedAndPure) {
  const double eps = 10.0 / 255;
  Generator<float> g(4, eps);
  Rng rng(2);
  g.init(rng);
  test::randomize_params(g.params(), 3, 0.5f);
  const auto x = test::random_images(2, 32, 6);
  const auto a = generator_forward(g, x);
  const auto b = generator_forward(g, x);
  EXPECT_EQ(a.delta.vec(), b.delta.vec());
  double peak = 0;
  for (float v : a.delta.vec()) peak = std::max(peak, static_cast<double>(std::abs(v)));
  EXPECT_GT(peak, 0.0);
  EXPECT_LE(peak, eps);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(a.x_prime[i], x[i] + a.delta[i]);
}

TEST(Generator, ShapeMismatchThrows) {
  Generator<float> g(4, 0.1);
  Rng rng(1);
  g.init(rng);
  EXPECT_THROW(g.forward(Tensor<float>({1, 1, 32, 32})), std::invalid_argument);
}

TEST(Clip, Examples) {
  EXPECT_DOUBLE_EQ(clip_value(0.5, 0.9, 0.1), 0.6);
  EXPECT_EQ(clip_value(0.05, -0.3, 0.1), 0.0);
  for (double x : {0.0, 0.3, 1.0}) EXPECT_EQ(clip_value(x, x, 0.05), x);
  const Tensor<double> x({1, 1, 1, 2}, std::vector<double>{0.5, 0.05});
  EXPECT_THROW(clip_adversarial(x, x, 0.0), std::invalid_argument);
}

TEST(Clip, IdentityAndIdempotence) {
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    Tensor<double> x({1, 3, 4, 4}), xp({1, 3, 4, 4});
    for (auto& v : x.vec()) v = rng.uniform();
    for (auto& v : xp.vec()) v = rng.uniform(-0.5, 1.5);
    const double eps = rng.uniform(1e-3, 0.5);
    EXPECT_EQ(clip_adversarial(x, x, eps).vec(), x.vec());
    const auto once = clip_adversarial(x, xp, eps);
    EXPECT_EQ(clip_adversarial(x, once, eps).vec(), once.vec());
  }
}

// 1,000 random (x, x', eps) cases through every projection path.
TEST(EpsilonBall, PropertyCases) {
  Rng rng(2024);
  int violations = 0;
  for (int t = 0; t < 1000; ++t) {
    const double eps = rng.uniform(1e-4, 0.3);
    Tensor<float> x({1, 3, 4, 4}), xp({1, 3, 4, 4});
    for (auto& v : x.vec()) v = static_cast<float>(rng.uniform());
    for (auto& v : xp.vec()) v = static_cast<float>(rng.uniform(-1.0, 2.0));
    violations += !test::within_ball(x, clip_adversarial(x, xp, eps), eps);
    // Written images start from 8-bit data.
    Tensor<float> xq = x;
    for (auto& v : xq.vec()) v = std::round(v * 255.0f) / 255.0f;
    violations += !test::within_ball(xq, pipeline::quantize_within_ball(xq, xp, eps), eps);
  }
  EXPECT_EQ(violations, 0);
}

TEST(EpsilonBall, VerifierRejectsEscapes) {
  const Tensor<float> x({1, 1, 1, 2}, std::vector<float>{0.5f, 0.5f});
  const Tensor<float> far({1, 1, 1, 2}, std::vector<float>{0.5f, 0.7f});
  const Tensor<float> outside({1, 1, 1, 2}, std::vector<float>{0.5f, 1.01f});
  EXPECT_NO_THROW(pipeline::verify_epsilon_ball(x, x, 0.1));
  EXPECT_THROW(pipeline::verify_epsilon_ball(x, far, 0.1), std::runtime_error);
  EXPECT_THROW(pipeline::verify_epsilon_ball(x, outside, 0.6), std::runtime_error);
}

TEST(EpsilonBall, QuantizedOutputsLieOnTheByteGrid) {
  Rng rng(8);
  Tensor<float> x({1, 3, 8, 8}), xp({1, 3, 8, 8});
  for (auto& v : x.vec()) v = std::round(static_cast<float>(rng.uniform()) * 255.0f) / 255.0f;
  for (auto& v : xp.vec()) v = static_cast<float>(rng.uniform(-0.2, 1.2));
  const auto q = pipeline::quantize_within_ball(x, xp, 16.0 / 255);
  for (float v : q.vec()) EXPECT_NEAR(v * 255.0f, std::round(v * 255.0f), 1e-4);
}

TEST(CtaLoss, Examples) {
  const std::vector<double> a{1, 0}, b{0, 0};
  EXPECT_EQ(cta_loss<double>(a, a), 0.0);
  EXPECT_EQ(cta_loss<double>(a, b), 0.5);
  EXPECT_THROW(cta_loss<double>(a, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(CtaLoss, Symmetric) {
  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> a(30), b(30);
    for (auto& v : a) v = rng.uniform();
    for (auto& v : b) v = rng.uniform();
    EXPECT_EQ(cta_loss<double>(a, b), cta_loss<double>(b, a));
  }
}

TEST(AdversarialAttention, ImageResolutionUnitRangeAndPure) {
  auto m = test::random_model(models::Task::cls, 3);
  const auto x = test::random_images(2, 32, 4);
  const auto a = adversarial_attention(*m, x);
  const auto b = adversarial_attention(*m, x);
  ASSERT_EQ(a.maps.size(), 2u);
  for (std::size_t n = 0; n < 2; ++n) {
    EXPECT_EQ(a.maps[n].height, 32);
    EXPECT_EQ(a.maps[n].width, 32);
    EXPECT_EQ(a.maps[n].values, b.maps[n].values);
    for (float v : a.maps[n].values) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  auto det = test::random_model(models::Task::det, 3);
  EXPECT_THROW(adversarial_attention(*det, x), std::invalid_argument);
}

TEST(Gaussian, SeededBoundedAndContinuous) {
  const auto x = test::random_images(2, 32, 9);
  const double eps = 16.0 / 255;
  const auto a = gaussian_noise_attack(x, eps, 5);
  EXPECT_EQ(a.vec(), gaussian_noise_attack(x, eps, 5).vec());
  EXPECT_NE(a.vec(), gaussian_noise_attack(x, eps, 6).vec());
  EXPECT_TRUE(test::within_ball(x, a, eps));
  EXPECT_LE(max_abs_diff(x, gaussian_noise_attack(x, 1e-9, 5)), 1e-6);
}

TEST(Dr, ZeroStepsIsIdentityAndStepsStayInBall) {
  auto m = test::random_model(models::Task::cls, 5);
  const auto x = test::random_images(1, 32, 10);
  const double eps = 16.0 / 255;
  EXPECT_EQ(dr_attack(x, *m, eps, {0, -1}).vec(), x.vec());
  for (int steps : {1, 2, 5}) EXPECT_TRUE(test::within_ball(x, dr_attack(x, *m, eps, {steps, -1}), eps));
}

TEST(Dr, ReducesFeatureDispersion) {
  auto m = test::random_model(models::Task::cls, 7);
  const auto x = test::random_images(1, 32, 11);
  const auto adv = dr_attack(x, *m, 16.0 / 255, {});
  EXPECT_LT(feature_std(*m, adv)[0], feature_std(*m, x)[0]);
}

TEST(Trainer, OnlyReceivesImages) {
  // The trainer's data parameter is the label-free view.
  using Params = decltype(&train_cta);
  static_assert(std::is_same_v<Params, TrainedGenerator (*)(const UnlabeledImages&, const CtaModels&,
                                                            const AttackConfig&, const EpochCallback&)>);
  EXPECT_THROW(UnlabeledImages({Tensor<float>({2, 3, 32, 32})}), std::invalid_argument);
}

TEST(Trainer, DeterministicAndLeavesModelsFrozen) {
  auto fx = test::tiny_cta_fixture(8, 32);
  AttackConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.generator_width = 4;
  cfg.seed = 3;
  const auto before = fx.hashes();
  const auto a = train_cta(fx.images, fx.models(), cfg);
  EXPECT_EQ(fx.hashes(), before);
  const auto b = train_cta(fx.images, fx.models(), cfg);
  EXPECT_EQ(a.generator.weights_hash(), b.generator.weights_hash());
  ASSERT_EQ(a.history.size(), 2u);
  for (const auto& r : a.history) {
    EXPECT_TRUE(std::isfinite(r.mean_loss));
    EXPECT_LE(r.mean_linf, cfg.epsilon + 1e-6);
  }
}

TEST(Trainer, AntiAttentionCacheMatchesFreshComputation) {
  auto fx = test::tiny_cta_fixture(5, 32);
  const auto cache = anti_attention_cache(fx.models(), fx.images, 2);
  const models::TaskModel<float>* task_models[] = {fx.cls.get(), fx.det.get(), fx.seg.get()};
  for (std::size_t i = 0; i < fx.images.size(); ++i) {
    const auto fresh = fused_attention<float>(task_models, fx.images[i]);
    EXPECT_EQ(cache[i].values, fresh[0].anti.values);
  }
}

TEST(Trainer, ApplyPathIsDeterministicAndBounded) {
  Generator<float> g(4, 16.0 / 255);
  Rng rng(2);
  g.init(rng);
  test::randomize_params(g.params(), 5, 0.5f);
  const auto x = test::random_images(3, 32, 12);
  const auto a = apply_generator(g, x, 16.0 / 255);
  EXPECT_EQ(a.vec(), apply_generator(g, x, 16.0 / 255).vec());
  EXPECT_TRUE(test::within_ball(x, a, 16.0 / 255));
}
