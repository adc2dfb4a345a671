#include "cta/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "cta/checkpoint.hpp"
#include "cta/errors.hpp"

namespace cta::attack {

using attention::AntiAttentionMap;
using attention::AttentionMap;
using models::TaskModel;

void AttackConfig::validate() const {
  if (!(epsilon > 0 && epsilon < 1)) throw std::invalid_argument("epsilon must be in (0, 1)");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
  if (generator_width < 1) throw std::invalid_argument("generator_width must be >= 1");
}

// ---------------------------------------------------------------- generator

template <typename T>
Generator<T>::Generator(int width, double epsilon) : width_(width), epsilon_(epsilon) {
  const int w = width;
  units_.push_back({nn::Conv2d<T>(3, w, 7, 1, 3), nn::InstanceNorm<T>(w), false});
  units_.push_back({nn::Conv2d<T>(w, 2 * w, 3, 2, 1), nn::InstanceNorm<T>(2 * w), false});
  units_.push_back({nn::Conv2d<T>(2 * w, 4 * w, 3, 2, 1), nn::InstanceNorm<T>(4 * w), false});
  for (int r = 0; r < 2 * kResidualBlocks; ++r) {
    units_.push_back({nn::Conv2d<T>(4 * w, 4 * w, 3), nn::InstanceNorm<T>(4 * w), false});
  }
  units_.push_back({nn::Conv2d<T>(4 * w, 2 * w, 3), nn::InstanceNorm<T>(2 * w), true});
  units_.push_back({nn::Conv2d<T>(2 * w, w, 3), nn::InstanceNorm<T>(w), true});
  out_ = nn::Conv2d<T>(w, 3, 7, 1, 3);
}

template <typename T>
void Generator<T>::init(Rng& rng) {
  for (auto& u : units_) u.conv.init_he(rng);
  out_.init_zero();
}

// saved[3 i + 0] = conv input, [3 i + 1] = conv output, [3 i + 2] = unit output.
// For the second unit of a residual block the unit output is the block sum.
template <typename T>
typename Generator<T>::Trace Generator<T>::forward(const Tensor<T>& x) const {
  if (x.c() != 3 || x.h() % 4 != 0 || x.w() % 4 != 0) {
    throw std::invalid_argument("generator input must be (N, 3, H, W) with H, W multiples of 4, got " +
                                x.shape().str());
  }
  Trace t;
  t.saved.reserve(3 * units_.size());
  Tensor<T> h = x;
  for (std::size_t i = 0; i < units_.size(); ++i) {
    const auto& u = units_[i];
    const bool res_a = i >= 3 && i < 3 + 2 * kResidualBlocks && (i - 3) % 2 == 0;
    const bool res_b = i >= 3 && i < 3 + 2 * kResidualBlocks && (i - 3) % 2 == 1;
    (void)res_a;
    Tensor<T> in = u.upsample ? nn::upsample_nearest2(h) : h;
    Tensor<T> c = u.conv.forward(in);
    Tensor<T> out = u.norm.forward(c);
    if (res_b) {
      nn::add_inplace(out, t.saved[3 * (i - 1)]);
    } else {
      out = nn::relu(out);
    }
    t.saved.push_back(std::move(in));
    t.saved.push_back(std::move(c));
    t.saved.push_back(out);
    h = std::move(out);
  }
  t.tanh_out = out_.forward(h);
  t.delta = Tensor<T>(t.tanh_out.shape());
  // Largest T not above epsilon, so a saturated tanh cannot round past it.
  T bound = static_cast<T>(epsilon_);
  if (static_cast<double>(bound) > epsilon_) bound = std::nextafter(bound, T(0));
  for (std::size_t i = 0; i < t.tanh_out.size(); ++i) {
    t.tanh_out[i] = std::tanh(t.tanh_out[i]);
    t.delta[i] = std::clamp(bound * t.tanh_out[i], -bound, bound);
  }
  return t;
}

template <typename T>
void Generator<T>::backward(const Tensor<T>& x, const Trace& t, const Tensor<T>& d_delta,
                            nn::GradBuffers<T>& grads) const {
  (void)x;
  require_shape(d_delta.shape(), t.delta.shape(), "generator backward");
  Tensor<T> d_pre(d_delta.shape());
  for (std::size_t i = 0; i < d_pre.size(); ++i) {
    d_pre[i] = d_delta[i] * static_cast<T>(epsilon_) * (T(1) - t.tanh_out[i] * t.tanh_out[i]);
  }
  const std::size_t out_slot = 4 * units_.size();
  Tensor<T> dh;
  out_.backward(t.saved.back(), d_pre, &dh, grads[out_slot].data(), grads[out_slot + 1].data());

  // Gradient arriving at the block input through the identity path.
  Tensor<T> skip_grad;
  for (int i = static_cast<int>(units_.size()) - 1; i >= 0; --i) {
    const auto& u = units_[i];
    const bool res_b = i >= 3 && i < 3 + 2 * kResidualBlocks && (i - 3) % 2 == 1;
    const bool res_a = i >= 3 && i < 3 + 2 * kResidualBlocks && (i - 3) % 2 == 0;
    Tensor<T> d_norm = res_b ? dh : nn::relu_backward(t.saved[3 * i + 2], dh);
    if (res_b) skip_grad = dh;
    Tensor<T> d_conv;
    u.norm.backward(t.saved[3 * i + 1], d_norm, &d_conv, grads[4 * i + 2].data(), grads[4 * i + 3].data());
    Tensor<T> d_in;
    const bool need_input = i > 0;
    u.conv.backward(t.saved[3 * i], d_conv, need_input ? &d_in : nullptr, grads[4 * i].data(),
                    grads[4 * i + 1].data());
    if (!need_input) break;
    dh = u.upsample ? nn::upsample_nearest2_backward(d_in) : std::move(d_in);
    if (res_a) nn::add_inplace(dh, skip_grad);
  }
}

template <typename T>
std::vector<std::vector<T>*> Generator<T>::params() {
  std::vector<std::vector<T>*> p;
  for (auto& u : units_) {
    p.push_back(&u.conv.weight);
    p.push_back(&u.conv.bias);
    p.push_back(&u.norm.gamma);
    p.push_back(&u.norm.beta);
  }
  p.push_back(&out_.weight);
  p.push_back(&out_.bias);
  return p;
}

template <typename T>
std::vector<const std::vector<T>*> Generator<T>::params() const {
  auto mut = const_cast<Generator<T>*>(this)->params();
  return {mut.begin(), mut.end()};
}

template <typename T>
std::uint64_t Generator<T>::weights_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : params()) h = fnv1a(p->data(), p->size() * sizeof(T), h);
  return h;
}

template <typename T>
GeneratorOutput<T> generator_forward(const Generator<T>& g, const Tensor<T>& x) {
  GeneratorOutput<T> out{g.perturbation(x), x};
  for (std::size_t i = 0; i < x.size(); ++i) out.x_prime[i] += out.delta[i];
  return out;
}

// ---------------------------------------------------------------- clipping

template <typename T>
T clip_value(T x, T x_prime, T epsilon) {
  const T v = std::min(x + epsilon, std::max(x_prime, x - epsilon));
  return std::clamp(v, T(0), T(1));
}

template <typename T>
Tensor<T> clip_adversarial(const Tensor<T>& x, const Tensor<T>& x_prime, double epsilon) {
  if (!(epsilon > 0)) throw std::invalid_argument("epsilon must be > 0");
  require_shape(x_prime.shape(), x.shape(), "clip_adversarial");
  Tensor<T> out(x.shape());
  const T eps = static_cast<T>(epsilon);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = clip_value(x[i], x_prime[i], eps);
  return out;
}

template <typename T>
Tensor<T> clip_backward(const Tensor<T>& x, const Tensor<T>& x_prime, double epsilon, const Tensor<T>& d_adv) {
  Tensor<T> d(x.shape());
  const T eps = static_cast<T>(epsilon);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T lo = std::max(x[i] - eps, T(0));
    const T hi = std::min(x[i] + eps, T(1));
    d[i] = (x_prime[i] >= lo && x_prime[i] <= hi) ? d_adv[i] : T(0);
  }
  return d;
}

// ---------------------------------------------------------------- losses

template <typename T>
double cta_loss(std::span<const T> anti, std::span<const T> adv) {
  if (anti.size() != adv.size() || anti.empty()) throw std::invalid_argument("cta_loss: shape mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < anti.size(); ++i) {
    const double d = static_cast<double>(anti[i]) - adv[i];
    acc += d * d;
  }
  return acc / static_cast<double>(anti.size());
}

template <typename T>
double cta_loss(const AntiAttentionMap<T>& anti, const AttentionMap<T>& adv) {
  if (anti.height != adv.height || anti.width != adv.width) throw std::invalid_argument("cta_loss: shape mismatch");
  return cta_loss<T>(std::span<const T>(anti.values), std::span<const T>(adv.values));
}

// ---------------------------------------------------------------- attention

template <typename T>
std::vector<AttentionMap<T>> model_attention(const TaskModel<T>& model, const Tensor<T>& images,
                                             const models::ScoreOptions& options) {
  const auto trace = model.forward(images);
  Tensor<T> d_out(trace.outputs.shape());
  for (int n = 0; n < images.n(); ++n) {
    Tensor<T> dn;
    models::task_scalar_score(model.task(), trace.outputs.slice(n, 1), options, &dn);
    std::copy(dn.vec().begin(), dn.vec().end(), d_out.sample(n).begin());
  }
  const Tensor<T> grads = model.head_backward(trace, d_out);
  const auto& f = trace.features;
  std::vector<AttentionMap<T>> maps;
  maps.reserve(images.n());
  for (int n = 0; n < images.n(); ++n) {
    maps.push_back(attention::grad_cam<T>(f.sample(n), grads.sample(n), f.c(), f.h(), f.w()));
  }
  return maps;
}

template <typename T>
std::vector<FusedAttention<T>> fused_attention(std::span<const TaskModel<T>* const> task_models,
                                               const Tensor<T>& images, const models::ScoreOptions& options) {
  std::vector<FusedAttention<T>> out(images.n());
  for (const auto* m : task_models) {
    const auto raw = model_attention(*m, images, options);
    for (int n = 0; n < images.n(); ++n) {
      out[n].per_task.push_back(attention::normalize_map(attention::upsample_map(raw[n], images.h(), images.w())));
    }
  }
  for (auto& f : out) {
    f.co = attention::co_attention<T>(f.per_task);
    f.anti = attention::anti_attention(f.co);
  }
  return out;
}

template <typename T>
AdversarialAttention<T> adversarial_attention(const TaskModel<T>& extractor, const Tensor<T>& x_adv) {
  if (extractor.task() != models::Task::cls) {
    throw std::invalid_argument("adversarial attention requires a classifier extractor");
  }
  AdversarialAttention<T> a;
  a.trace = extractor.forward(x_adv);
  const auto& f = a.trace.features;
  Tensor<T> d_out(a.trace.outputs.shape());
  for (int n = 0; n < x_adv.n(); ++n) {
    const int c = models::predict_class(a.trace.outputs, n);
    a.classes.push_back(c);
    d_out.sample(n)[c] = T(1);
  }
  const Tensor<T> grads = extractor.head_backward(a.trace, d_out);
  for (int n = 0; n < x_adv.n(); ++n) {
    a.alpha.push_back(attention::grad_cam_weights<T>(grads.sample(n), f.c(), f.h(), f.w()));
    a.raw.push_back(attention::grad_cam<T>(f.sample(n), grads.sample(n), f.c(), f.h(), f.w()));
    a.maps.push_back(attention::upsample_map(attention::normalize_map(a.raw.back()), x_adv.h(), x_adv.w()));
  }
  return a;
}

template <typename T>
LossAndGrad<T> attention_loss_and_grad(const TaskModel<T>& extractor, const Tensor<T>& x_adv,
                                       std::span<const AntiAttentionMap<T>> anti) {
  if (anti.size() != static_cast<std::size_t>(x_adv.n())) {
    throw std::invalid_argument("attention loss: one anti-attention map per image required");
  }
  const auto a = adversarial_attention(extractor, x_adv);
  const auto& f = a.trace.features;
  LossAndGrad<T> out;
  Tensor<T> d_features(f.shape());
  const double batch = x_adv.n();
  for (int n = 0; n < x_adv.n(); ++n) {
    const double l = cta_loss(anti[n], a.maps[n]);
    out.per_image.push_back(l);
    out.loss += l / batch;
    const std::size_t pixels = a.maps[n].size();
    std::vector<T> d_up(pixels);
    for (std::size_t p = 0; p < pixels; ++p) {
      d_up[p] = static_cast<T>(2.0 * (a.maps[n].values[p] - anti[n].values[p]) / (pixels * batch));
    }
    const auto d_norm = attention::upsample_backward<T>(d_up, f.h(), f.w(), x_adv.h(), x_adv.w());
    const auto d_raw = attention::normalize_backward<T>(a.raw[n], d_norm);
    const auto d_f = attention::grad_cam_backward<T>(f.sample(n), a.alpha[n], a.raw[n], d_raw);
    std::copy(d_f.begin(), d_f.end(), d_features.sample(n).begin());
  }
  out.d_x_adv = extractor.features_backward(a.trace, d_features);
  return out;
}

// ---------------------------------------------------------------- training

UnlabeledImages::UnlabeledImages(std::vector<Tensor<float>> images) : images_(std::move(images)) {
  for (const auto& im : images_) {
    if (im.n() != 1 || !(im.shape() == images_.front().shape())) {
      throw std::invalid_argument("unlabeled images must be equally shaped single images");
    }
  }
}

Tensor<float> UnlabeledImages::batch(std::span<const std::size_t> indices) const {
  std::vector<Tensor<float>> items;
  items.reserve(indices.size());
  for (auto i : indices) items.push_back(images_.at(i));
  return stack<float>(items);
}

std::vector<AntiAttentionMap<float>> anti_attention_cache(const CtaModels& m, const UnlabeledImages& images,
                                                          int batch_size) {
  const TaskModel<float>* task_models[] = {m.classifier, m.detector, m.segmenter};
  for (const auto* p : task_models) {
    if (p == nullptr) throw std::invalid_argument("anti-attention needs classifier, detector and segmenter");
  }
  std::vector<AntiAttentionMap<float>> out;
  out.reserve(images.size());
  for (std::size_t first = 0; first < images.size(); first += batch_size) {
    const std::size_t count = std::min<std::size_t>(batch_size, images.size() - first);
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), first);
    const auto fused = fused_attention<float>(task_models, images.batch(idx));
    for (const auto& f : fused) out.push_back(f.anti);
  }
  return out;
}

TrainedGenerator train_cta(const UnlabeledImages& images, const CtaModels& m, const AttackConfig& config,
                           const EpochCallback& on_epoch) {
  config.validate();
  if (images.size() == 0) throw std::invalid_argument("train_cta: empty dataset");
  if (m.extractor == nullptr) throw std::invalid_argument("train_cta: missing extractor");

  const auto anti = anti_attention_cache(m, images);

  Rng rng(splitmix64(config.seed ^ 0x6e6e));
  TrainedGenerator result{Generator<float>(config.generator_width, config.epsilon), {}};
  auto& g = result.generator;
  g.init(rng);
  auto params = g.params();
  auto grads = nn::zeros_like(params);
  nn::Adam<float> adam(static_cast<float>(config.learning_rate), static_cast<float>(config.adam_beta1),
                       static_cast<float>(config.adam_beta2));

  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    double linf_sum = 0;
    int batch_index = 0;
    for (std::size_t first = 0; first < order.size(); first += config.batch_size, ++batch_index) {
      const std::size_t count = std::min<std::size_t>(config.batch_size, order.size() - first);
      std::span<const std::size_t> idx(order.data() + first, count);
      const Tensor<float> x = images.batch(idx);
      std::vector<AntiAttentionMap<float>> batch_anti;
      for (auto i : idx) batch_anti.push_back(anti[i]);

      const auto trace = g.forward(x);
      Tensor<float> x_prime = x;
      for (std::size_t i = 0; i < x.size(); ++i) x_prime[i] += trace.delta[i];
      const Tensor<float> x_adv = clip_adversarial(x, x_prime, config.epsilon);
      auto lg = attention_loss_and_grad<float>(*m.extractor, x_adv, batch_anti);
      if (!std::isfinite(lg.loss)) {
        throw TrainingFailure("non-finite CTA loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batch_index));
      }
      const Tensor<float> d_delta = clip_backward(x, x_prime, config.epsilon, lg.d_x_adv);
      for (auto& gb : grads) std::fill(gb.begin(), gb.end(), 0.0f);
      g.backward(x, trace, d_delta, grads);
      adam.step(params, grads);

      loss_sum += lg.loss * count;
      for (double v : per_image_linf(x, x_adv)) linf_sum += v;
    }
    EpochRecord rec{epoch, loss_sum / images.size(), linf_sum / images.size()};
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec, g);
  }
  return result;
}

Tensor<float> apply_generator(const Generator<float>& g, const Tensor<float>& x, double epsilon) {
  const auto out = generator_forward(g, x);
  return clip_adversarial(x, out.x_prime, epsilon);
}

// ---------------------------------------------------------------- baselines

Tensor<float> gaussian_noise_attack(const Tensor<float>& x, double epsilon, std::uint64_t seed) {
  Rng rng(splitmix64(seed));
  Tensor<float> noisy = x;
  const double sd = epsilon / 2;
  for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] += static_cast<float>(rng.normal() * sd);
  return clip_adversarial(x, noisy, epsilon);
}

template <typename T>
std::vector<double> feature_std(const TaskModel<T>& model, const Tensor<T>& x) {
  const auto trace = model.forward(x);
  std::vector<double> out;
  for (int n = 0; n < x.n(); ++n) {
    const auto f = trace.features.sample(n);
    double mean = 0;
    for (T v : f) mean += v;
    mean /= f.size();
    double var = 0;
    for (T v : f) var += (v - mean) * (v - mean);
    out.push_back(std::sqrt(var / f.size()));
  }
  return out;
}

template <typename T>
Tensor<T> dr_attack(const Tensor<T>& x, const TaskModel<T>& model, double epsilon, const DrOptions& options) {
  if (options.steps < 0) throw std::invalid_argument("dr_attack: steps must be >= 0");
  const double step = options.step_size > 0 ? options.step_size : epsilon / 10;
  Tensor<T> adv = x;
  for (int s = 0; s < options.steps; ++s) {
    const auto trace = model.forward(adv);
    const auto& f = trace.features;
    Tensor<T> d_f(f.shape());
    for (int n = 0; n < f.n(); ++n) {
      const auto fs = f.sample(n);
      double mean = 0;
      for (T v : fs) mean += v;
      mean /= fs.size();
      double var = 0;
      for (T v : fs) var += (v - mean) * (v - mean);
      const double sd = std::sqrt(var / fs.size());
      auto ds = d_f.sample(n);
      if (sd == 0) continue;
      for (std::size_t i = 0; i < fs.size(); ++i) ds[i] = static_cast<T>((fs[i] - mean) / (fs.size() * sd));
    }
    const Tensor<T> g = model.features_backward(trace, d_f);
    Tensor<T> next(adv.shape());
    for (std::size_t i = 0; i < adv.size(); ++i) {
      if (!std::isfinite(static_cast<double>(g[i]))) throw TrainingFailure("dr_attack: non-finite gradient");
      const T sign = g[i] > T(0) ? T(1) : (g[i] < T(0) ? T(-1) : T(0));
      next[i] = adv[i] - static_cast<T>(step) * sign;
    }
    adv = clip_adversarial(x, next, epsilon);
  }
  return adv;
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  require_shape(b.shape(), a.shape(), "max_abs_diff");
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

std::vector<double> per_image_linf(const Tensor<float>& x, const Tensor<float>& x_adv) {
  require_shape(x_adv.shape(), x.shape(), "per_image_linf");
  std::vector<double> out;
  for (int n = 0; n < x.n(); ++n) {
    const auto a = x.sample(n);
    const auto b = x_adv.sample(n);
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    out.push_back(m);
  }
  return out;
}

// ---------------------------------------------------------------- checkpoints

void save_generator(const Generator<float>& g, const AttackConfig& config, const std::vector<EpochRecord>& history,
                    const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_weights(dir / "weights.bin", g.params());
  nlohmann::json j;
  j["epsilon"] = config.epsilon;
  j["config"] = {{"epsilon", config.epsilon},
                 {"epochs", config.epochs},
                 {"batch_size", config.batch_size},
                 {"learning_rate", config.learning_rate},
                 {"adam_beta1", config.adam_beta1},
                 {"adam_beta2", config.adam_beta2},
                 {"seed", config.seed},
                 {"generator_width", config.generator_width}};
  j["final_loss"] = history.empty() ? 0.0 : history.back().mean_loss;
  j["train_seed"] = config.seed;
  j["width"] = g.width();
  j["weights_hash"] = hex64(g.weights_hash());
  write_json(dir / "generator.json", j);
}

Generator<float> load_generator(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "generator.json") || !std::filesystem::exists(dir / "weights.bin")) {
    throw MissingArtifact("generator checkpoint " + dir.string());
  }
  const auto j = read_json(dir / "generator.json");
  Generator<float> g(j.at("width").get<int>(), j.at("epsilon").get<double>());
  read_weights(dir / "weights.bin", g.params());
  return g;
}

#define CTA_INSTANTIATE(T)                                                                                  \
  template class Generator<T>;                                                                              \
  template GeneratorOutput<T> generator_forward<T>(const Generator<T>&, const Tensor<T>&);                  \
  template T clip_value<T>(T, T, T);                                                                        \
  template Tensor<T> clip_adversarial<T>(const Tensor<T>&, const Tensor<T>&, double);                       \
  template Tensor<T> clip_backward<T>(const Tensor<T>&, const Tensor<T>&, double, const Tensor<T>&);        \
  template double cta_loss<T>(std::span<const T>, std::span<const T>);                                      \
  template double cta_loss<T>(const AntiAttentionMap<T>&, const AttentionMap<T>&);                          \
  template std::vector<AttentionMap<T>> model_attention<T>(const TaskModel<T>&, const Tensor<T>&,           \
                                                           const models::ScoreOptions&);                    \
  template std::vector<FusedAttention<T>> fused_attention<T>(std::span<const TaskModel<T>* const>,          \
                                                             const Tensor<T>&, const models::ScoreOptions&); \
  template AdversarialAttention<T> adversarial_attention<T>(const TaskModel<T>&, const Tensor<T>&);         \
  template LossAndGrad<T> attention_loss_and_grad<T>(const TaskModel<T>&, const Tensor<T>&,                 \
                                                     std::span<const AntiAttentionMap<T>>);                 \
  template Tensor<T> dr_attack<T>(const Tensor<T>&, const TaskModel<T>&, double, const DrOptions&);         \
  template std::vector<double> feature_std<T>(const TaskModel<T>&, const Tensor<T>&);

CTA_INSTANTIATE(float)
CTA_INSTANTIATE(double)
#undef CTA_INSTANTIATE

}  // namespace cta::attack
