#include "cta/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace cta::nn {

template <typename T>
Conv2d<T>::Conv2d(int in, int out, int k, int s, int p)
    : in_channels(in), out_channels(out), kernel(k), stride(s), pad(p < 0 ? k / 2 : p),
      weight(static_cast<std::size_t>(out) * in * k * k, T(0)), bias(out, T(0)) {}

template <typename T>
void Conv2d<T>::init_he(Rng& rng) {
  const double sd = std::sqrt(2.0 / (in_channels * kernel * kernel));
  for (auto& v : weight) v = static_cast<T>(rng.normal() * sd);
  std::fill(bias.begin(), bias.end(), T(0));
}

template <typename T>
void Conv2d<T>::init_zero() {
  std::fill(weight.begin(), weight.end(), T(0));
  std::fill(bias.begin(), bias.end(), T(0));
}

template <typename T>
kernels::ConvGeometry Conv2d<T>::geometry(const Shape& in) const {
  if (in.c != in_channels) {
    throw std::invalid_argument("conv2d: expected " + std::to_string(in_channels) +
                                " input channels, got shape " + in.str());
  }
  return {in.n, in.c, in.h, in.w, out_channels, kernel, stride, pad};
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  const auto g = geometry(x.shape());
  Tensor<T> y({g.n, g.out_channels, g.out_height(), g.out_width()});
  kernels::conv2d_forward(g, x.data(), weight.data(), bias.data(), y.data());
  return y;
}

template <typename T>
void Conv2d<T>::backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx,
                         T* dw, T* db) const {
  const auto g = geometry(x.shape());
  require_shape(dy.shape(), {g.n, g.out_channels, g.out_height(), g.out_width()},
                "conv2d backward");
  if (dx != nullptr) *dx = Tensor<T>(x.shape());
  kernels::conv2d_backward(g, x.data(), weight.data(), dy.data(),
                           dx != nullptr ? dx->data() : nullptr, dw, db);
}

template <typename T>
InstanceNorm<T>::InstanceNorm(int c) : channels(c), gamma(c, T(1)), beta(c, T(0)) {}

template <typename T>
Tensor<T> InstanceNorm<T>::forward(const Tensor<T>& x) const {
  if (x.c() != channels) throw std::invalid_argument("instance norm: channel mismatch");
  Tensor<T> y(x.shape());
  kernels::instance_norm_forward(x.n(), x.c(), x.h() * x.w(), x.data(), gamma.data(),
                                 beta.data(), eps, y.data());
  return y;
}

template <typename T>
void InstanceNorm<T>::backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx,
                               T* dgamma, T* dbeta) const {
  require_shape(dy.shape(), x.shape(), "instance norm backward");
  if (dx != nullptr) *dx = Tensor<T>(x.shape());
  kernels::instance_norm_backward(x.n(), x.c(), x.h() * x.w(), x.data(), gamma.data(),
                                  dy.data(), eps, dx != nullptr ? dx->data() : nullptr,
                                  dgamma, dbeta);
}

template <typename T>
Linear<T>::Linear(int in, int out)
    : in_features(in), out_features(out),
      weight(static_cast<std::size_t>(in) * out, T(0)), bias(out, T(0)) {}

template <typename T>
void Linear<T>::init_he(Rng& rng) {
  const double sd = std::sqrt(1.0 / in_features);
  for (auto& v : weight) v = static_cast<T>(rng.normal() * sd);
  std::fill(bias.begin(), bias.end(), T(0));
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  if (x.shape().sample_size() != static_cast<std::size_t>(in_features)) {
    throw std::invalid_argument("linear: input shape " + x.shape().str());
  }
  Tensor<T> y({x.n(), out_features, 1, 1});
  for (int n = 0; n < x.n(); ++n) {
    const T* in = x.data() + static_cast<std::size_t>(n) * in_features;
    for (int o = 0; o < out_features; ++o) {
      T acc = bias[o];
      const T* w = weight.data() + static_cast<std::size_t>(o) * in_features;
      for (int i = 0; i < in_features; ++i) acc += w[i] * in[i];
      y[static_cast<std::size_t>(n) * out_features + o] = acc;
    }
  }
  return y;
}

template <typename T>
void Linear<T>::backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx, T* dw,
                         T* db) const {
  if (dx != nullptr) *dx = Tensor<T>(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    const T* in = x.data() + static_cast<std::size_t>(n) * in_features;
    const T* g = dy.data() + static_cast<std::size_t>(n) * out_features;
    for (int o = 0; o < out_features; ++o) {
      const T* w = weight.data() + static_cast<std::size_t>(o) * in_features;
      if (db != nullptr) db[o] += g[o];
      if (dw != nullptr) {
        T* dwo = dw + static_cast<std::size_t>(o) * in_features;
        for (int i = 0; i < in_features; ++i) dwo[i] += g[o] * in[i];
      }
      if (dx != nullptr) {
        T* out = dx->data() + static_cast<std::size_t>(n) * in_features;
        for (int i = 0; i < in_features; ++i) out[i] += g[o] * w[i];
      }
    }
  }
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  Tensor<T> dx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] > T(0) ? dy[i] : T(0);
  return dx;
}

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x) {
  Tensor<T> y({x.n(), x.c(), x.h() / 2, x.w() / 2});
#pragma omp parallel for schedule(static)
  for (int nc = 0; nc < x.n() * x.c(); ++nc) {
    const int n = nc / x.c();
    const int c = nc % x.c();
    for (int oy = 0; oy < y.h(); ++oy) {
      for (int ox = 0; ox < y.w(); ++ox) {
        T m = x.at(n, c, 2 * oy, 2 * ox);
        m = std::max(m, x.at(n, c, 2 * oy, 2 * ox + 1));
        m = std::max(m, x.at(n, c, 2 * oy + 1, 2 * ox));
        m = std::max(m, x.at(n, c, 2 * oy + 1, 2 * ox + 1));
        y.at(n, c, oy, ox) = m;
      }
    }
  }
  return y;
}

// Routes each gradient to the first maximal element of its window.
template <typename T>
Tensor<T> maxpool2_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
#pragma omp parallel for schedule(static)
  for (int nc = 0; nc < x.n() * x.c(); ++nc) {
    const int n = nc / x.c();
    const int c = nc % x.c();
    for (int oy = 0; oy < dy.h(); ++oy) {
      for (int ox = 0; ox < dy.w(); ++ox) {
        int by = 2 * oy;
        int bx = 2 * ox;
        for (int dyy = 0; dyy < 2; ++dyy) {
          for (int dxx = 0; dxx < 2; ++dxx) {
            if (x.at(n, c, 2 * oy + dyy, 2 * ox + dxx) > x.at(n, c, by, bx)) {
              by = 2 * oy + dyy;
              bx = 2 * ox + dxx;
            }
          }
        }
        dx.at(n, c, by, bx) += dy.at(n, c, oy, ox);
      }
    }
  }
  return dx;
}

template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x) {
  Tensor<T> y({x.n(), x.c(), x.h() * 2, x.w() * 2});
#pragma omp parallel for schedule(static)
  for (int nc = 0; nc < x.n() * x.c(); ++nc) {
    const int n = nc / x.c();
    const int c = nc % x.c();
    for (int oy = 0; oy < y.h(); ++oy) {
      for (int ox = 0; ox < y.w(); ++ox) y.at(n, c, oy, ox) = x.at(n, c, oy / 2, ox / 2);
    }
  }
  return y;
}

template <typename T>
Tensor<T> upsample_nearest2_backward(const Tensor<T>& dy) {
  Tensor<T> dx({dy.n(), dy.c(), dy.h() / 2, dy.w() / 2});
#pragma omp parallel for schedule(static)
  for (int nc = 0; nc < dy.n() * dy.c(); ++nc) {
    const int n = nc / dy.c();
    const int c = nc % dy.c();
    for (int oy = 0; oy < dy.h(); ++oy) {
      for (int ox = 0; ox < dy.w(); ++ox) dx.at(n, c, oy / 2, ox / 2) += dy.at(n, c, oy, ox);
    }
  }
  return dx;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  Tensor<T> y({x.n(), x.c(), 1, 1});
  const std::size_t plane = x.shape().plane();
  for (int nc = 0; nc < x.n() * x.c(); ++nc) {
    T acc = 0;
    const T* src = x.data() + nc * plane;
    for (std::size_t i = 0; i < plane; ++i) acc += src[i];
    y[nc] = acc / static_cast<T>(plane);
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& in, const Tensor<T>& dy) {
  Tensor<T> dx(in);
  const std::size_t plane = in.plane();
  for (int nc = 0; nc < in.n * in.c; ++nc) {
    const T g = dy[nc] / static_cast<T>(plane);
    std::fill_n(dx.data() + nc * plane, plane, g);
  }
  return dx;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw std::invalid_argument("concat: shape mismatch " + a.shape().str() + " vs " +
                                b.shape().str());
  }
  Tensor<T> y({a.n(), a.c() + b.c(), a.h(), a.w()});
  for (int n = 0; n < a.n(); ++n) {
    auto dst = y.sample(n);
    auto sa = a.sample(n);
    auto sb = b.sample(n);
    std::copy(sa.begin(), sa.end(), dst.begin());
    std::copy(sb.begin(), sb.end(), dst.begin() + sa.size());
  }
  return y;
}

template <typename T>
void split_channels(const Tensor<T>& dy, int ca, Tensor<T>& da, Tensor<T>& db) {
  da = Tensor<T>({dy.n(), ca, dy.h(), dy.w()});
  db = Tensor<T>({dy.n(), dy.c() - ca, dy.h(), dy.w()});
  for (int n = 0; n < dy.n(); ++n) {
    auto src = dy.sample(n);
    auto a = da.sample(n);
    auto b = db.sample(n);
    std::copy_n(src.begin(), a.size(), a.begin());
    std::copy_n(src.begin() + a.size(), b.size(), b.begin());
  }
}

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src) {
  require_shape(src.shape(), dst.shape(), "add");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void Adam<T>::step(const std::vector<std::vector<T>*>& params, const GradBuffers<T>& grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam: param/grad count mismatch");
  if (m_.empty()) {
    m_ = zeros_like(params);
    v_ = zeros_like(params);
  }
  ++t_;
  const double c1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(t_));
  const T step = static_cast<T>(lr_ * std::sqrt(c2) / c1);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& value = *params[p];
    const auto& g = grads[p];
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = beta1_ * m[i] + (T(1) - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (T(1) - beta2_) * g[i] * g[i];
      value[i] -= step * m[i] / (std::sqrt(v[i]) + eps_);
    }
  }
}

#define CTA_INSTANTIATE(T)                                                           \
  template class Conv2d<T>;                                                          \
  template class InstanceNorm<T>;                                                    \
  template class Linear<T>;                                                          \
  template class Adam<T>;                                                            \
  template Tensor<T> relu<T>(const Tensor<T>&);                                      \
  template Tensor<T> relu_backward<T>(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> maxpool2<T>(const Tensor<T>&);                                  \
  template Tensor<T> maxpool2_backward<T>(const Tensor<T>&, const Tensor<T>&);       \
  template Tensor<T> upsample_nearest2<T>(const Tensor<T>&);                         \
  template Tensor<T> upsample_nearest2_backward<T>(const Tensor<T>&);                \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                           \
  template Tensor<T> global_avg_pool_backward<T>(const Shape&, const Tensor<T>&);    \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);         \
  template void split_channels<T>(const Tensor<T>&, int, Tensor<T>&, Tensor<T>&);    \
  template void add_inplace<T>(Tensor<T>&, const Tensor<T>&);

CTA_INSTANTIATE(float)
CTA_INSTANTIATE(double)
#undef CTA_INSTANTIATE

}  // namespace cta::nn
