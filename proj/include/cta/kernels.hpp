#pragma once

// Compute kernels shared by every network in the project. The functions in
// cta::kernels are OpenMP-parallel over the batch dimension; each sample is
// processed by exactly one thread and per-sample partial gradients are reduced
// in sample order, so results do not depend on the thread count. The serial
// loops in cta::kernels::reference compute the same quantities directly and
// exist for tests and benchmarks.

#include <cstddef>

namespace cta::kernels {

struct ConvGeometry {
  int n = 1;
  int in_channels = 1;
  int height = 1;
  int width = 1;
  int out_channels = 1;
  int kernel = 1;
  int stride = 1;
  int pad = 0;

  int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  std::size_t weight_size() const {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel;
  }
};

// y[n, co, oy, ox] = bias[co] + sum_{ci,ky,kx} w[co, ci, ky, kx] * x_pad[n, ci, oy*s+ky-p, ox*s+kx-p]
template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* weight,
                    const T* bias, T* y);

// dx is overwritten; dweight and dbias are accumulated into. Any of the three
// outputs may be null.
template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* weight,
                     const T* dy, T* dx, T* dweight, T* dbias);

// Per-(sample, channel) normalization over the spatial plane with affine
// parameters. eps is added to the variance.
template <typename T>
void instance_norm_forward(int n, int c, int plane, const T* x, const T* gamma,
                           const T* beta, T eps, T* y);

// dx overwritten, dgamma/dbeta accumulated (either may be null).
template <typename T>
void instance_norm_backward(int n, int c, int plane, const T* x, const T* gamma,
                            const T* dy, T eps, T* dx, T* dgamma, T* dbeta);

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* weight,
                    const T* bias, T* y);

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* weight,
                     const T* dy, T* dx, T* dweight, T* dbias);

template <typename T>
void instance_norm_forward(int n, int c, int plane, const T* x, const T* gamma,
                           const T* beta, T eps, T* y);

template <typename T>
void instance_norm_backward(int n, int c, int plane, const T* x, const T* gamma,
                            const T* dy, T eps, T* dx, T* dgamma, T* dbeta);

}  // namespace reference
}  // namespace cta::kernels
