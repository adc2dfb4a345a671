#include "cta/taskmodels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cta::models {

std::string to_string(Task task) {
  switch (task) {
    case Task::cls: return "cls";
    case Task::det: return "det";
    case Task::seg: return "seg";
  }
  return "unknown";
}

Task task_from_string(const std::string& name) {
  if (name == "cls") return Task::cls;
  if (name == "det") return Task::det;
  if (name == "seg") return Task::seg;
  throw std::invalid_argument("unknown task tag: " + name);
}

template <typename T>
std::vector<const std::vector<T>*> TaskModel<T>::params() const {
  auto mut = const_cast<TaskModel<T>*>(this)->params();
  return {mut.begin(), mut.end()};
}

template <typename T>
std::uint64_t TaskModel<T>::weights_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : params()) h = fnv1a(p->data(), p->size() * sizeof(T), h);
  return h;
}

namespace {

void check_input(const Shape& s, int channels) {
  if (s.c != channels || s.h % kDetStride != 0 || s.w % kDetStride != 0 || s.h < 32 || s.w < 32) {
    throw std::invalid_argument("model input must be (N, 3, H, W) with H, W multiples of 8 and >= 32, got " +
                                s.str());
  }
}

// Four 3x3 conv + instance norm + relu blocks with 2x2 max pooling after the first three.
// With norm_last off the fourth block is conv + relu; its norm slots stay in the
// parameter list (unused) so every backbone has the same layout.
// saved layout: a0, p0, a1, p1, a2, p2; returns a3. Parameter slots 0..15.
template <typename T>
struct Backbone {
  static constexpr std::size_t kSlots = 16;
  std::array<nn::Conv2d<T>, 4> convs;
  std::array<nn::InstanceNorm<T>, 4> norms;
  bool norm_last = true;

  Backbone() = default;
  explicit Backbone(const std::array<int, 4>& w, bool normalize_last = true)
      : convs{nn::Conv2d<T>(3, w[0], 3), nn::Conv2d<T>(w[0], w[1], 3),
              nn::Conv2d<T>(w[1], w[2], 3), nn::Conv2d<T>(w[2], w[3], 3)},
        norms{nn::InstanceNorm<T>(w[0]), nn::InstanceNorm<T>(w[1]), nn::InstanceNorm<T>(w[2]),
              nn::InstanceNorm<T>(w[3])},
        norm_last(normalize_last) {}

  bool normalized(int i) const { return i < 3 || norm_last; }

  void init(Rng& rng) {
    for (auto& c : convs) c.init_he(rng);
  }

  void params(std::vector<std::vector<T>*>& out) {
    for (int i = 0; i < 4; ++i) {
      out.push_back(&convs[i].weight);
      out.push_back(&convs[i].bias);
      out.push_back(&norms[i].gamma);
      out.push_back(&norms[i].beta);
    }
  }

  Tensor<T> block(int i, const Tensor<T>& h, std::vector<Tensor<T>>& pre) const {
    pre.push_back(convs[i].forward(h));
    return nn::relu(normalized(i) ? norms[i].forward(pre.back()) : pre.back());
  }

  Tensor<T> forward(const Tensor<T>& x, std::vector<Tensor<T>>& saved, std::vector<Tensor<T>>& pre) const {
    Tensor<T> h = x;
    for (int i = 0; i < 3; ++i) {
      saved.push_back(block(i, h, pre));
      saved.push_back(nn::maxpool2(saved.back()));
      h = saved.back();
    }
    return block(3, h, pre);
  }

  // d_act is the gradient on the post-relu output act of block i.
  void block_backward(int i, const Tensor<T>& in, const Tensor<T>& act, const Tensor<T>& pre,
                      const Tensor<T>& d_act, nn::GradBuffers<T>* grads, Tensor<T>* dx) const {
    Tensor<T> dz = nn::relu_backward(act, d_act);
    if (normalized(i)) {
      Tensor<T> d_pre;
      norms[i].backward(pre, dz, &d_pre, nn::slot_ptr(grads, 4 * i + 2), nn::slot_ptr(grads, 4 * i + 3));
      dz = std::move(d_pre);
    }
    convs[i].backward(in, dz, dx, nn::slot_ptr(grads, 4 * i), nn::slot_ptr(grads, 4 * i + 1));
  }

  // skip[i], if given, is added to the gradient of block output i (before pooling).
  Tensor<T> backward(const Trace<T>& t, const Tensor<T>& a3, const Tensor<T>& d_a3,
                     nn::GradBuffers<T>* grads, bool need_input,
                     const std::array<const Tensor<T>*, 3>& skip = {}) const {
    const auto& saved = t.saved;
    Tensor<T> dx;
    block_backward(3, saved[5], a3, t.pre[3], d_a3, grads, &dx);
    for (int i = 2; i >= 0; --i) {
      const Tensor<T>& act = saved[2 * i];
      Tensor<T> d_act = nn::maxpool2_backward(act, dx);
      if (skip[i] != nullptr) nn::add_inplace(d_act, *skip[i]);
      const Tensor<T>& in = i == 0 ? t.input : saved[2 * i - 1];
      const bool want_dx = i > 0 || need_input;
      block_backward(i, in, act, t.pre[i], d_act, grads, want_dx ? &dx : nullptr);
    }
    return need_input ? dx : Tensor<T>();
  }
};

template <typename T>
class Classifier final : public TaskModel<T> {
 public:
  explicit Classifier(const ModelConfig& c)
      : TaskModel<T>(c), backbone_(c.widths, false), fc_(c.widths[3], c.num_classes) {}

  std::string architecture_id() const override { return "cls-cnn4-gap-linear"; }
  FeatureTap tap(int h, int w) const override {
    return {"conv4", this->config().widths[3], h / 8, w / 8};
  }

  void init(Rng& rng) override {
    backbone_.init(rng);
    fc_.init_he(rng);
  }

  // saved: a0 p0 a1 p1 a2 p2 gap
  Trace<T> forward(const Tensor<T>& x) const override {
    check_input(x.shape(), 3);
    Trace<T> t;
    t.input = x;
    t.features = backbone_.forward(x, t.saved, t.pre);
    t.saved.push_back(nn::global_avg_pool(t.features));
    t.outputs = fc_.forward(t.saved.back());
    return t;
  }

  Tensor<T> head(const Trace<T>&, const Tensor<T>& features) const override {
    return fc_.forward(nn::global_avg_pool(features));
  }

  Tensor<T> head_backward(const Trace<T>& t, const Tensor<T>& d_out) const override {
    Tensor<T> dg;
    fc_.backward(t.saved[6], d_out, &dg, nullptr, nullptr);
    return nn::global_avg_pool_backward(t.features.shape(), dg);
  }

  Tensor<T> features_backward(const Trace<T>& t, const Tensor<T>& d_features) const override {
    return backbone_.backward(t, t.features, d_features, nullptr, true);
  }

  void backward(const Trace<T>& t, const Tensor<T>& d_out, nn::GradBuffers<T>& grads) const override {
    Tensor<T> dg;
    fc_.backward(t.saved[6], d_out, &dg, grads[16].data(), grads[17].data());
    const auto dF = nn::global_avg_pool_backward(t.features.shape(), dg);
    backbone_.backward(t, t.features, dF, &grads, false);
  }

  std::vector<std::vector<T>*> params() override {
    std::vector<std::vector<T>*> p;
    backbone_.params(p);
    p.push_back(&fc_.weight);
    p.push_back(&fc_.bias);
    return p;
  }

  std::unique_ptr<TaskModel<T>> clone() const override { return std::make_unique<Classifier>(*this); }

 private:
  Backbone<T> backbone_;
  nn::Linear<T> fc_;
};

template <typename T>
class Detector final : public TaskModel<T> {
 public:
  explicit Detector(const ModelConfig& c)
      : TaskModel<T>(c), backbone_(c.widths), head_conv_(c.widths[3], c.widths[3], 3),
        pred_(c.widths[3], 5 + c.num_classes, 1) {}

  std::string architecture_id() const override { return "det-grid-s8-1box"; }
  FeatureTap tap(int h, int w) const override {
    return {"head_conv", this->config().widths[3], h / 8, w / 8};
  }

  void init(Rng& rng) override {
    backbone_.init(rng);
    head_conv_.init_he(rng);
    pred_.init_he(rng);
    for (auto& v : pred_.weight) v *= T(0.1);
  }

  // saved: a0 p0 a1 p1 a2 p2 a3
  Trace<T> forward(const Tensor<T>& x) const override {
    check_input(x.shape(), 3);
    Trace<T> t;
    t.input = x;
    t.saved.reserve(7);
    Tensor<T> a3 = backbone_.forward(x, t.saved, t.pre);
    t.saved.push_back(std::move(a3));
    t.features = nn::relu(head_conv_.forward(t.saved.back()));
    t.outputs = pred_.forward(t.features);
    return t;
  }

  Tensor<T> head(const Trace<T>&, const Tensor<T>& features) const override {
    return pred_.forward(features);
  }

  Tensor<T> head_backward(const Trace<T>& t, const Tensor<T>& d_out) const override {
    Tensor<T> dF;
    pred_.backward(t.features, d_out, &dF, nullptr, nullptr);
    return dF;
  }

  Tensor<T> features_backward(const Trace<T>& t, const Tensor<T>& d_features) const override {
    return backward_impl(t, d_features, nullptr, true);
  }

  void backward(const Trace<T>& t, const Tensor<T>& d_out, nn::GradBuffers<T>& grads) const override {
    Tensor<T> dF;
    pred_.backward(t.features, d_out, &dF, grads[18].data(), grads[19].data());
    backward_impl(t, dF, &grads, false);
  }

  std::vector<std::vector<T>*> params() override {
    std::vector<std::vector<T>*> p;
    backbone_.params(p);
    p.push_back(&head_conv_.weight);
    p.push_back(&head_conv_.bias);
    p.push_back(&pred_.weight);
    p.push_back(&pred_.bias);
    return p;
  }

  std::unique_ptr<TaskModel<T>> clone() const override { return std::make_unique<Detector>(*this); }

 private:
  Tensor<T> backward_impl(const Trace<T>& t, const Tensor<T>& dF, nn::GradBuffers<T>* grads,
                          bool need_input) const {
    Tensor<T> da3;
    head_conv_.backward(t.saved[6], nn::relu_backward(t.features, dF), &da3, nn::slot_ptr(grads, 16),
                        nn::slot_ptr(grads, 17));
    return backbone_.backward(t, t.saved[6], da3, grads, need_input);
  }

  Backbone<T> backbone_;
  nn::Conv2d<T> head_conv_;
  nn::Conv2d<T> pred_;
};

// Encoder-decoder with skip connections at 1/1, 1/2 and 1/4 resolution.
template <typename T>
class Segmenter final : public TaskModel<T> {
 public:
  explicit Segmenter(const ModelConfig& c) : TaskModel<T>(c), backbone_(c.widths) {
    const auto& w = c.widths;
    dec_[0] = nn::Conv2d<T>(w[3] + w[2], w[1], 3);
    dec_[1] = nn::Conv2d<T>(w[1] + w[1], w[0], 3);
    dec_[2] = nn::Conv2d<T>(w[0] + w[0], w[0], 3);
    norms_ = {nn::InstanceNorm<T>(w[1]), nn::InstanceNorm<T>(w[0]), nn::InstanceNorm<T>(w[0])};
    logits_ = nn::Conv2d<T>(w[0], c.num_classes + 1, 1);
  }

  std::string architecture_id() const override { return "seg-unet3-skip"; }
  FeatureTap tap(int h, int w) const override {
    return {"bottleneck", this->config().widths[3], h / 8, w / 8};
  }

  void init(Rng& rng) override {
    backbone_.init(rng);
    for (auto& d : dec_) d.init_he(rng);
    logits_.init_he(rng);
  }

  // saved: e0 p0 e1 p1 e2 p2 | cat2 d2 cat1 d1 cat0 d0; pre: backbone then decoder
  Trace<T> forward(const Tensor<T>& x) const override {
    check_input(x.shape(), 3);
    Trace<T> t;
    t.input = x;
    t.saved.reserve(12);
    t.features = backbone_.forward(x, t.saved, t.pre);
    t.outputs = decode(t, t.features, &t.saved, &t.pre);
    return t;
  }

  Tensor<T> head(const Trace<T>& t, const Tensor<T>& features) const override {
    return decode(t, features, nullptr, nullptr);
  }

  Tensor<T> head_backward(const Trace<T>& t, const Tensor<T>& d_out) const override {
    Tensor<T> dF;
    std::array<Tensor<T>, 3> d_skip;
    decoder_backward(t, d_out, nullptr, dF, d_skip);
    return dF;
  }

  Tensor<T> features_backward(const Trace<T>& t, const Tensor<T>& d_features) const override {
    return backbone_.backward(t, t.features, d_features, nullptr, true);
  }

  void backward(const Trace<T>& t, const Tensor<T>& d_out, nn::GradBuffers<T>& grads) const override {
    Tensor<T> dF;
    std::array<Tensor<T>, 3> d_skip;
    decoder_backward(t, d_out, &grads, dF, d_skip);
    // Skip gradients join the encoder at each block output.
    backbone_.backward(t, t.features, dF, &grads, false, {&d_skip[0], &d_skip[1], &d_skip[2]});
  }

  std::vector<std::vector<T>*> params() override {
    std::vector<std::vector<T>*> p;
    backbone_.params(p);
    for (int i = 0; i < 3; ++i) {
      p.push_back(&dec_[i].weight);
      p.push_back(&dec_[i].bias);
      p.push_back(&norms_[i].gamma);
      p.push_back(&norms_[i].beta);
    }
    p.push_back(&logits_.weight);
    p.push_back(&logits_.bias);
    return p;
  }

  std::unique_ptr<TaskModel<T>> clone() const override { return std::make_unique<Segmenter>(*this); }

 private:
  static constexpr std::size_t kDecSlot = Backbone<T>::kSlots;

  Tensor<T> decode(const Trace<T>& t, const Tensor<T>& features, std::vector<Tensor<T>>* saved,
                   std::vector<Tensor<T>>* pre) const {
    const auto& s = t.saved;
    Tensor<T> h = features;
    for (int i = 0; i < 3; ++i) {
      Tensor<T> cat = nn::concat_channels(nn::upsample_nearest2(h), s[4 - 2 * i]);
      Tensor<T> z = dec_[i].forward(cat);
      h = nn::relu(norms_[i].forward(z));
      if (saved != nullptr) {
        saved->push_back(std::move(cat));
        saved->push_back(h);
        pre->push_back(std::move(z));
      }
    }
    return logits_.forward(h);
  }

  // d_skip[k] is the gradient on encoder block output k.
  void decoder_backward(const Trace<T>& t, const Tensor<T>& d_out, nn::GradBuffers<T>* grads, Tensor<T>& dF,
                        std::array<Tensor<T>, 3>& d_skip) const {
    const auto& s = t.saved;
    const auto& w = this->config().widths;
    const int up_channels[3] = {w[3], w[1], w[0]};
    Tensor<T> g;
    logits_.backward(s[11], d_out, &g, nn::slot_ptr(grads, kDecSlot + 12), nn::slot_ptr(grads, kDecSlot + 13));
    for (int i = 2; i >= 0; --i) {
      const std::size_t slot = kDecSlot + 4 * i;
      Tensor<T> dz, dcat, dup;
      norms_[i].backward(t.pre[4 + i], nn::relu_backward(s[7 + 2 * i], g), &dz, nn::slot_ptr(grads, slot + 2),
                         nn::slot_ptr(grads, slot + 3));
      dec_[i].backward(s[6 + 2 * i], dz, &dcat, nn::slot_ptr(grads, slot), nn::slot_ptr(grads, slot + 1));
      nn::split_channels(dcat, up_channels[i], dup, d_skip[2 - i]);
      g = nn::upsample_nearest2_backward(dup);
    }
    dF = std::move(g);
  }

  Backbone<T> backbone_;
  std::array<nn::Conv2d<T>, 3> dec_;
  std::array<nn::InstanceNorm<T>, 3> norms_;
  nn::Conv2d<T> logits_;
};

template <typename T>
T sigmoid(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

}  // namespace

template <typename T>
std::unique_ptr<TaskModel<T>> make_model(const ModelConfig& config) {
  if (config.num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  for (int w : config.widths) {
    if (w < 1) throw std::invalid_argument("model widths must be positive");
  }
  switch (config.task) {
    case Task::cls: return std::make_unique<Classifier<T>>(config);
    case Task::det: return std::make_unique<Detector<T>>(config);
    case Task::seg: return std::make_unique<Segmenter<T>>(config);
  }
  throw std::invalid_argument("unknown task");
}

template <typename To, typename From>
std::unique_ptr<TaskModel<To>> convert_model(const TaskModel<From>& model) {
  auto out = make_model<To>(model.config());
  auto dst = out->params();
  auto src = model.params();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    for (std::size_t j = 0; j < dst[i]->size(); ++j) (*dst[i])[j] = static_cast<To>((*src[i])[j]);
  }
  return out;
}

template <typename T>
TaskScore task_scalar_score(Task task, const Tensor<T>& out, const ScoreOptions& options,
                            Tensor<T>* d_out) {
  if (out.n() != 1) throw std::invalid_argument("task_scalar_score expects a single sample");
  if (d_out != nullptr) *d_out = Tensor<T>(out.shape());
  TaskScore score;
  switch (task) {
    case Task::cls: {
      score.class_id = predict_class(out);
      score.value = out[score.class_id];
      if (d_out != nullptr) (*d_out)[score.class_id] = T(1);
      return score;
    }
    case Task::seg: {
      const auto labels = predict_mask(out);
      const std::size_t plane = out.shape().plane();
      std::vector<int> votes(out.c(), 0);
      double sum = 0;
      for (std::size_t p = 0; p < plane; ++p) {
        sum += out[labels[p] * plane + p];
        ++votes[labels[p]];
        if (d_out != nullptr) (*d_out)[labels[p] * plane + p] = T(1);
      }
      score.value = sum;
      score.class_id = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
      return score;
    }
    case Task::det: {
      const int cells = out.h() * out.w();
      const int nc = out.c() - 5;
      auto cell_value = [&](int cell, int& best) {
        best = 0;
        for (int k = 1; k < nc; ++k) {
          if (out[(5 + k) * cells + cell] > out[(5 + best) * cells + cell]) best = k;
        }
      };
      std::vector<int> chosen;
      int argmax_obj = 0;
      for (int cell = 0; cell < cells; ++cell) {
        if (out[cell] > out[argmax_obj]) argmax_obj = cell;
        if (sigmoid(static_cast<double>(out[cell])) > options.det_tau) chosen.push_back(cell);
      }
      if (chosen.empty()) chosen.push_back(argmax_obj);
      std::vector<double> class_mass(nc, 0.0);
      double sum = 0;
      for (int cell : chosen) {
        int best = 0;
        cell_value(cell, best);
        const double obj = sigmoid(static_cast<double>(out[cell]));
        const double z = out[(5 + best) * cells + cell];
        sum += obj * z;
        class_mass[best] += obj;
        if (d_out != nullptr) {
          (*d_out)[cell] += static_cast<T>(obj * (1 - obj) * z);
          (*d_out)[(5 + best) * cells + cell] += static_cast<T>(obj);
        }
      }
      score.value = sum;
      score.class_id =
          static_cast<int>(std::max_element(class_mass.begin(), class_mass.end()) - class_mass.begin());
      return score;
    }
  }
  throw std::invalid_argument("unknown task tag");
}

template <typename T>
int predict_class(const Tensor<T>& logits, int sample) {
  auto s = logits.sample(sample);
  return static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());
}

template <typename T>
std::vector<std::uint8_t> predict_mask(const Tensor<T>& logits, int sample) {
  const std::size_t plane = logits.shape().plane();
  auto s = logits.sample(sample);
  std::vector<std::uint8_t> mask(plane, 0);
  for (std::size_t p = 0; p < plane; ++p) {
    int best = 0;
    for (int c = 1; c < logits.c(); ++c) {
      if (s[c * plane + p] > s[best * plane + p]) best = c;
    }
    mask[p] = static_cast<std::uint8_t>(best);
  }
  return mask;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.box.class_id == d.box.class_id && iou(k.box, d.box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

template <typename T>
std::vector<Detection> predict_boxes(const Tensor<T>& outputs, int image_size, int sample,
                                     const DecodeOptions& options) {
  const int gh = outputs.h();
  const int gw = outputs.w();
  const int cells = gh * gw;
  const int nc = outputs.c() - 5;
  const double cell_h = static_cast<double>(image_size) / gh;
  const double cell_w = static_cast<double>(image_size) / gw;
  auto s = outputs.sample(sample);
  std::vector<Detection> dets;
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      const int cell = gy * gw + gx;
      const double obj = sigmoid(static_cast<double>(s[cell]));
      int best = 0;
      double zmax = s[5 * cells + cell];
      for (int k = 1; k < nc; ++k) {
        if (s[(5 + k) * cells + cell] > zmax) {
          zmax = s[(5 + k) * cells + cell];
          best = k;
        }
      }
      double denom = 0;
      for (int k = 0; k < nc; ++k) denom += std::exp(s[(5 + k) * cells + cell] - zmax);
      const double conf = obj / denom;
      if (conf < options.score_threshold) continue;
      const double cx = (gx + sigmoid(static_cast<double>(s[1 * cells + cell]))) * cell_w;
      const double cy = (gy + sigmoid(static_cast<double>(s[2 * cells + cell]))) * cell_h;
      const double bw = sigmoid(static_cast<double>(s[3 * cells + cell])) * image_size;
      const double bh = sigmoid(static_cast<double>(s[4 * cells + cell])) * image_size;
      Box b{best, static_cast<float>(cx - bw / 2), static_cast<float>(cy - bh / 2),
            static_cast<float>(cx + bw / 2), static_cast<float>(cy + bh / 2)};
      dets.push_back({b, static_cast<float>(conf)});
    }
  }
  return nms(std::move(dets), options.nms_iou);
}

#define CTA_INSTANTIATE(T)                                                                       \
  template class TaskModel<T>;                                                                   \
  template std::unique_ptr<TaskModel<T>> make_model<T>(const ModelConfig&);                      \
  template TaskScore task_scalar_score<T>(Task, const Tensor<T>&, const ScoreOptions&, Tensor<T>*); \
  template int predict_class<T>(const Tensor<T>&, int);                                          \
  template std::vector<std::uint8_t> predict_mask<T>(const Tensor<T>&, int);                     \
  template std::vector<Detection> predict_boxes<T>(const Tensor<T>&, int, int, const DecodeOptions&);

CTA_INSTANTIATE(float)
CTA_INSTANTIATE(double)
#undef CTA_INSTANTIATE

template std::unique_ptr<TaskModel<double>> convert_model<double, float>(const TaskModel<float>&);
template std::unique_ptr<TaskModel<float>> convert_model<float, double>(const TaskModel<double>&);
template std::unique_ptr<TaskModel<float>> convert_model<float, float>(const TaskModel<float>&);

}  // namespace cta::models
