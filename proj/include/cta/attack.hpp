#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cta/attention.hpp"
#include "cta/layers.hpp"
#include "cta/taskmodels.hpp"
#include "cta/tensor.hpp"

namespace cta::attack {

struct AttackConfig {
  double epsilon = 16.0 / 255.0;
  int epochs = 50;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.99;
  std::uint64_t seed = 0;
  int generator_width = 32;

  void validate() const;
};

// ResNet-style image-to-perturbation network: 7x7 stem, two stride-2
// downsampling blocks, four residual blocks, two nearest-upsample + conv
// blocks, and a zero-initialised 7x7 output conv squashed by eps * tanh.
template <typename T>
class Generator {
 public:
  struct Trace {
    std::vector<Tensor<T>> saved;
    Tensor<T> tanh_out;
    Tensor<T> delta;
  };

  Generator() = default;
  Generator(int width, double epsilon);

  void init(Rng& rng);

  Trace forward(const Tensor<T>& x) const;
  // Accumulates parameter gradients given d(loss)/d(delta).
  void backward(const Tensor<T>& x, const Trace& trace, const Tensor<T>& d_delta,
                nn::GradBuffers<T>& grads) const;

  Tensor<T> perturbation(const Tensor<T>& x) const { return forward(x).delta; }

  std::vector<std::vector<T>*> params();
  std::vector<const std::vector<T>*> params() const;
  std::uint64_t weights_hash() const;

  int width() const { return width_; }
  double epsilon() const { return epsilon_; }

 private:
  struct Unit {
    nn::Conv2d<T> conv;
    nn::InstanceNorm<T> norm;
    bool upsample = false;
  };

  int width_ = 0;
  double epsilon_ = 0;
  std::vector<Unit> units_;  // stem, down1, down2, 4 x (res_a, res_b), up1, up2
  nn::Conv2d<T> out_;
};

inline constexpr int kResidualBlocks = 4;

// x' = x + G(x).
template <typename T>
struct GeneratorOutput {
  Tensor<T> delta;
  Tensor<T> x_prime;
};
template <typename T>
GeneratorOutput<T> generator_forward(const Generator<T>& g, const Tensor<T>& x);

// Projection onto the epsilon ball, then a clamp to the valid pixel range:
// x_adv = clamp(min(x + eps, max(x', x - eps)), 0, 1).
template <typename T>
T clip_value(T x, T x_prime, T epsilon);
template <typename T>
Tensor<T> clip_adversarial(const Tensor<T>& x, const Tensor<T>& x_prime, double epsilon);
// d(x_adv)/d(x') is 1 where neither bound is active, 0 elsewhere.
template <typename T>
Tensor<T> clip_backward(const Tensor<T>& x, const Tensor<T>& x_prime, double epsilon,
                        const Tensor<T>& d_adv);

// Mean squared difference between anti-attention and adversarial attention.
template <typename T>
double cta_loss(std::span<const T> anti, std::span<const T> adv);
template <typename T>
double cta_loss(const attention::AntiAttentionMap<T>& anti, const attention::AttentionMap<T>& adv);

// Grad-CAM of `model` on each image of the batch, using the model's own task
// score, as raw feature-resolution maps.
template <typename T>
std::vector<attention::AttentionMap<T>> model_attention(const models::TaskModel<T>& model,
                                                        const Tensor<T>& images,
                                                        const models::ScoreOptions& options = {});

// Clean-image attention for the co/anti fusion: every task map is resized to
// image resolution and normalized before fusion.
template <typename T>
struct FusedAttention {
  std::vector<attention::AttentionMap<T>> per_task;  // image resolution, normalized
  attention::CoAttentionMap<T> co;
  attention::AntiAttentionMap<T> anti;
};

template <typename T>
std::vector<FusedAttention<T>> fused_attention(std::span<const models::TaskModel<T>* const> task_models,
                                               const Tensor<T>& images,
                                               const models::ScoreOptions& options = {});

// Attention of the extractor on adversarial images, kept differentiable.
template <typename T>
struct AdversarialAttention {
  models::Trace<T> trace;
  std::vector<int> classes;
  std::vector<std::vector<T>> alpha;
  std::vector<attention::AttentionMap<T>> raw;
  std::vector<attention::AttentionMap<T>> maps;  // normalized, image resolution
};

// The extractor must be a classifier: its global-average-pool + linear head
// makes the Grad-CAM channel weights independent of the features, which the
// backward pass relies on.
template <typename T>
AdversarialAttention<T> adversarial_attention(const models::TaskModel<T>& extractor,
                                              const Tensor<T>& x_adv);

// Mean attention loss over the batch and its gradient w.r.t. x_adv.
template <typename T>
struct LossAndGrad {
  double loss = 0;
  std::vector<double> per_image;
  Tensor<T> d_x_adv;
};
template <typename T>
LossAndGrad<T> attention_loss_and_grad(const models::TaskModel<T>& extractor, const Tensor<T>& x_adv,
                                       std::span<const attention::AntiAttentionMap<T>> anti);

// Training images only: the attack trainer never receives labels.
class UnlabeledImages {
 public:
  explicit UnlabeledImages(std::vector<Tensor<float>> images);
  std::size_t size() const { return images_.size(); }
  const Tensor<float>& operator[](std::size_t i) const { return images_[i]; }
  Tensor<float> batch(std::span<const std::size_t> indices) const;

 private:
  std::vector<Tensor<float>> images_;
};

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0;
  double mean_linf = 0;
};

struct TrainedGenerator {
  Generator<float> generator;
  std::vector<EpochRecord> history;
};

struct CtaModels {
  const models::TaskModel<float>* classifier = nullptr;
  const models::TaskModel<float>* detector = nullptr;
  const models::TaskModel<float>* segmenter = nullptr;
  const models::TaskModel<float>* extractor = nullptr;
};

// Per-image anti-attention maps for the training set (the task models are
// frozen, so they are computed once).
std::vector<attention::AntiAttentionMap<float>> anti_attention_cache(const CtaModels& models,
                                                                     const UnlabeledImages& images,
                                                                     int batch_size = 32);

using EpochCallback = std::function<void(const EpochRecord&, const Generator<float>&)>;

TrainedGenerator train_cta(const UnlabeledImages& images, const CtaModels& models,
                           const AttackConfig& config, const EpochCallback& on_epoch = {});

// Applies a trained generator, then projects. No optimisation happens here.
Tensor<float> apply_generator(const Generator<float>& g, const Tensor<float>& x, double epsilon);

// Per-pixel N(0, (eps/2)^2) noise followed by the epsilon-ball projection.
Tensor<float> gaussian_noise_attack(const Tensor<float>& x, double epsilon, std::uint64_t seed);

struct DrOptions {
  int steps = 40;
  double step_size = -1;  // defaults to epsilon / 10
};

// Dispersion reduction: signed gradient descent on the standard deviation of
// the model's tap features, projected after every step.
template <typename T>
Tensor<T> dr_attack(const Tensor<T>& x, const models::TaskModel<T>& model, double epsilon,
                    const DrOptions& options = {});
template <typename T>
std::vector<double> feature_std(const models::TaskModel<T>& model, const Tensor<T>& x);

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b);
// Largest |x_adv - x| per image.
std::vector<double> per_image_linf(const Tensor<float>& x, const Tensor<float>& x_adv);

void save_generator(const Generator<float>& g, const AttackConfig& config,
                    const std::vector<EpochRecord>& history, const std::filesystem::path& dir);
Generator<float> load_generator(const std::filesystem::path& dir);

}  // namespace cta::attack
