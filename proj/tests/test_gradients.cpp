#include <gtest/gtest.h>

#include <cmath>

#include "cta/attack.hpp"
#include "oracles.hpp"

using namespace cta;

// Grad-CAM from autodiff head gradients against central differences at step
// 1e-3, on the classifier (extractor) and detector architectures.
TEST(GradientOracle, GradCamMatchesFiniteDifferences) {
  for (auto task : {models::Task::cls, models::Task::det}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto inst = oracle::tiny_instance(task, 100 + seed);
      const auto r = oracle::grad_cam_fd_check(*inst.model, inst.x, 1e-3);
      EXPECT_LE(r.worst, 1e-4) << models::to_string(task) << " seed " << seed;
      EXPECT_LE(r.kinked, r.elements / 10) << models::to_string(task) << " seed " << seed;
    }
  }
}

// The segmentation score sums an argmax over every pixel, so steps of 1e-3
// cross many kinks; a small step isolates the derivative itself.
TEST(GradientOracle, SegmenterGradCamAtSmallStep) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto inst = oracle::tiny_instance(models::Task::seg, 100 + seed);
    const auto r = oracle::grad_cam_fd_check(*inst.model, inst.x, 1e-6);
    EXPECT_LE(r.worst, 1e-4) << "seed " << seed;
  }
}

TEST(GradientOracle, AttentionLossGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto inst = oracle::tiny_instance(models::Task::cls, 200 + seed);
    Rng rng(seed);
    const auto r = oracle::loss_gradient_fd_check(*inst.model, inst.x, rng, 8, 1e-3);
    EXPECT_EQ(r.pixels, 8) << "seed " << seed;
    EXPECT_LE(r.worst_relative, 1e-2) << "seed " << seed;
  }
}

namespace {

double weighted_sum(const Tensor<double>& out, const Tensor<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * out[i];
  return s;
}

}  // namespace

// Parameter and input gradients of every task model against finite differences.
TEST(GradientOracle, TaskModelBackward) {
  for (auto task : {models::Task::cls, models::Task::det, models::Task::seg}) {
    auto inst = oracle::tiny_instance(task, 7);
    auto& m = *inst.model;
    const auto trace = m.forward(inst.x);
    Tensor<double> w(trace.outputs.shape());
    Rng rng(1);
    for (auto& v : w.vec()) v = rng.normal();
    auto loss = [&] { return weighted_sum(m.forward(inst.x).outputs, w); };
    auto params = m.params();
    auto grads = nn::zeros_like(params);
    m.backward(trace, w, grads);
    const double h = 1e-6;
    for (std::size_t p = 0; p < params.size(); ++p) {
      for (int k = 0; k < 2; ++k) {
        const std::size_t i = (k * 7919u) % params[p]->size();
        double& slot = (*params[p])[i];
        const double orig = slot;
        slot = orig + h;
        const double up = loss();
        slot = orig - h;
        const double down = loss();
        slot = orig;
        const double fd = (up - down) / (2 * h);
        EXPECT_NEAR(grads[p][i], fd, 1e-4 * std::max(1.0, std::abs(fd)))
            << models::to_string(task) << " param " << p << " index " << i;
      }
    }
  }
}

TEST(GradientOracle, GeneratorBackward) {
  attack::Generator<double> g(3, 16.0 / 255);
  Rng rng(4);
  g.init(rng);
  for (auto* p : g.params()) {
    for (auto& v : *p) v += rng.normal() * 0.3;
  }
  Tensor<double> x({1, 3, 16, 16});
  for (auto& v : x.vec()) v = rng.uniform();
  const auto trace = g.forward(x);
  Tensor<double> w(trace.delta.shape());
  for (auto& v : w.vec()) v = rng.normal();
  auto loss = [&] { return weighted_sum(g.forward(x).delta, w); };
  auto params = g.params();
  auto grads = nn::zeros_like(params);
  g.backward(x, trace, w, grads);
  const double h = 1e-6;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::size_t i = (p * 31u) % params[p]->size();
    double& slot = (*params[p])[i];
    const double orig = slot;
    slot = orig + h;
    const double up = loss();
    slot = orig - h;
    const double down = loss();
    slot = orig;
    const double fd = (up - down) / (2 * h);
    EXPECT_NEAR(grads[p][i], fd, 1e-5 * std::max(1.0, std::abs(fd))) << "param " << p;
  }
}
