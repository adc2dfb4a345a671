#pragma once

#include <cstdint>
#include <vector>

#include "cta/kernels.hpp"
#include "cta/rng.hpp"
#include "cta/tensor.hpp"

namespace cta::nn {

// Gradient buffers aligned with a model's params() list.
template <typename T>
using GradBuffers = std::vector<std::vector<T>>;

template <typename T>
GradBuffers<T> zeros_like(const std::vector<std::vector<T>*>& params) {
  GradBuffers<T> g;
  g.reserve(params.size());
  for (const auto* p : params) g.emplace_back(p->size(), T(0));
  return g;
}

template <typename T>
T* slot_ptr(GradBuffers<T>* grads, std::size_t slot) {
  return grads == nullptr ? nullptr : (*grads)[slot].data();
}

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, int stride = 1, int pad = -1);

  void init_he(Rng& rng);
  void init_zero();

  Tensor<T> forward(const Tensor<T>& x) const;
  // dx (optional) is resized and overwritten; dw/db (optional) accumulate.
  void backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx, T* dw,
                T* db) const;

  kernels::ConvGeometry geometry(const Shape& in) const;

  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  std::vector<T> weight;
  std::vector<T> bias;
};

template <typename T>
class InstanceNorm {
 public:
  InstanceNorm() = default;
  explicit InstanceNorm(int channels);

  Tensor<T> forward(const Tensor<T>& x) const;
  void backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx, T* dgamma,
                T* dbeta) const;

  int channels = 0;
  T eps = T(1e-5);
  std::vector<T> gamma;
  std::vector<T> beta;
};

// Fully connected layer over (N, in, 1, 1) tensors.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features);

  void init_he(Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  void backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx, T* dw,
                T* db) const;

  int in_features = 0;
  int out_features = 0;
  std::vector<T> weight;  // out x in
  std::vector<T> bias;
};

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
// Gradient through relu given its output.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, const Tensor<T>& dy);

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x);
template <typename T>
Tensor<T> maxpool2_backward(const Tensor<T>& x, const Tensor<T>& dy);

template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x);
template <typename T>
Tensor<T> upsample_nearest2_backward(const Tensor<T>& dy);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);
template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& in, const Tensor<T>& dy);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
// Splits dy of a concat back into the first `ca` channels and the rest.
template <typename T>
void split_channels(const Tensor<T>& dy, int ca, Tensor<T>& da, Tensor<T>& db);

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src);

template <typename T>
class Adam {
 public:
  Adam(T lr, T beta1, T beta2, T eps = T(1e-8)) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<std::vector<T>*>& params, const GradBuffers<T>& grads);
  std::int64_t steps() const { return t_; }

 private:
  T lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  GradBuffers<T> m_, v_;
};

}  // namespace cta::nn
