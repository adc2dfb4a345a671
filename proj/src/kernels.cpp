#include "cta/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

namespace cta::kernels {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel == 1 && g.stride == 1 && g.pad == 0;
}

// col has shape (in_channels * k * k, out_h * out_w).
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  const int k = g.kernel;
  std::size_t row = 0;
  for (int ci = 0; ci < g.in_channels; ++ci) {
    const T* plane = x + static_cast<std::size_t>(ci) * g.height * g.width;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, ++row) {
        T* out = col + row * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.height) {
            std::fill_n(out + oy * ow, ow, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            out[oy * ow + ox] = (ix >= 0 && ix < g.width) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* x) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  const int k = g.kernel;
  std::fill_n(x, static_cast<std::size_t>(g.in_channels) * g.height * g.width, T(0));
  std::size_t row = 0;
  for (int ci = 0; ci < g.in_channels; ++ci) {
    T* plane = x + static_cast<std::size_t>(ci) * g.height * g.width;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, ++row) {
        const T* in = col + row * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.height) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.width) dst[ix] += in[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* weight,
                    const T* bias, T* y) {
  const int rows = g.in_channels * g.kernel * g.kernel;
  const int cols = g.out_height() * g.out_width();
  const std::size_t in_stride = static_cast<std::size_t>(g.in_channels) * g.height * g.width;
  const std::size_t out_stride = static_cast<std::size_t>(g.out_channels) * cols;
  ConstMapMat<T> w(weight, g.out_channels, rows);

#pragma omp parallel
  {
    std::vector<T> col(is_pointwise(g) ? 0 : static_cast<std::size_t>(rows) * cols);
#pragma omp for schedule(static)
    for (int n = 0; n < g.n; ++n) {
      const T* xin = x + n * in_stride;
      if (!is_pointwise(g)) {
        im2col(g, xin, col.data());
        xin = col.data();
      }
      MapMat<T> out(y + n * out_stride, g.out_channels, cols);
      out.noalias() = w * ConstMapMat<T>(xin, rows, cols);
      if (bias != nullptr) {
        for (int co = 0; co < g.out_channels; ++co) out.row(co).array() += bias[co];
      }
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* weight,
                     const T* dy, T* dx, T* dweight, T* dbias) {
  const int rows = g.in_channels * g.kernel * g.kernel;
  const int cols = g.out_height() * g.out_width();
  const std::size_t in_stride = static_cast<std::size_t>(g.in_channels) * g.height * g.width;
  const std::size_t out_stride = static_cast<std::size_t>(g.out_channels) * cols;
  const std::size_t wsize = g.weight_size();
  ConstMapMat<T> w(weight, g.out_channels, rows);

  std::vector<T> dw_partial(dweight != nullptr ? wsize * g.n : 0);
  std::vector<T> db_partial(dbias != nullptr ? static_cast<std::size_t>(g.out_channels) * g.n : 0);

#pragma omp parallel
  {
    const bool pointwise = is_pointwise(g);
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(rows) * cols);
    std::vector<T> dcol(pointwise ? 0 : static_cast<std::size_t>(rows) * cols);
#pragma omp for schedule(static)
    for (int n = 0; n < g.n; ++n) {
      ConstMapMat<T> dout(dy + n * out_stride, g.out_channels, cols);
      if (dweight != nullptr) {
        const T* xin = x + n * in_stride;
        if (!pointwise) {
          im2col(g, xin, col.data());
          xin = col.data();
        }
        MapMat<T> dw(dw_partial.data() + n * wsize, g.out_channels, rows);
        dw.noalias() = dout * ConstMapMat<T>(xin, rows, cols).transpose();
      }
      if (dbias != nullptr) {
        // Plain loop: Eigen's vectorised sum splits at an alignment-dependent
        // point, which makes the rounding depend on where dy was allocated.
        const T* dyn = dy + n * out_stride;
        for (int co = 0; co < g.out_channels; ++co) {
          double s = 0;
          for (int i = 0; i < cols; ++i) s += dyn[static_cast<std::size_t>(co) * cols + i];
          db_partial[static_cast<std::size_t>(n) * g.out_channels + co] = static_cast<T>(s);
        }
      }
      if (dx != nullptr) {
        T* dxn = dx + n * in_stride;
        if (pointwise) {
          MapMat<T>(dxn, rows, cols).noalias() = w.transpose() * dout;
        } else {
          MapMat<T>(dcol.data(), rows, cols).noalias() = w.transpose() * dout;
          col2im(g, dcol.data(), dxn);
        }
      }
    }
  }

  if (dweight != nullptr) {
    for (int n = 0; n < g.n; ++n) {
      const T* src = dw_partial.data() + n * wsize;
      for (std::size_t i = 0; i < wsize; ++i) dweight[i] += src[i];
    }
  }
  if (dbias != nullptr) {
    for (int n = 0; n < g.n; ++n) {
      for (int co = 0; co < g.out_channels; ++co) {
        dbias[co] += db_partial[static_cast<std::size_t>(n) * g.out_channels + co];
      }
    }
  }
}

template <typename T>
void instance_norm_forward(int n, int c, int plane, const T* x, const T* gamma,
                           const T* beta, T eps, T* y) {
#pragma omp parallel for schedule(static)
  for (int nc = 0; nc < n * c; ++nc) {
    const int ch = nc % c;
    const T* src = x + static_cast<std::size_t>(nc) * plane;
    T* dst = y + static_cast<std::size_t>(nc) * plane;
    double mean = 0.0;
    for (int i = 0; i < plane; ++i) mean += src[i];
    mean /= plane;
    double var = 0.0;
    for (int i = 0; i < plane; ++i) {
      const double d = src[i] - mean;
      var += d * d;
    }
    var /= plane;
    const T inv = static_cast<T>(1.0 / std::sqrt(var + eps));
    const T m = static_cast<T>(mean);
    for (int i = 0; i < plane; ++i) dst[i] = gamma[ch] * (src[i] - m) * inv + beta[ch];
  }
}

template <typename T>
void instance_norm_backward(int n, int c, int plane, const T* x, const T* gamma,
                            const T* dy, T eps, T* dx, T* dgamma, T* dbeta) {
  std::vector<double> dg(static_cast<std::size_t>(n) * c, 0.0);
  std::vector<double> db(static_cast<std::size_t>(n) * c, 0.0);
#pragma omp parallel for schedule(static)
  for (int nc = 0; nc < n * c; ++nc) {
    const int ch = nc % c;
    const T* src = x + static_cast<std::size_t>(nc) * plane;
    const T* g = dy + static_cast<std::size_t>(nc) * plane;
    double mean = 0.0;
    for (int i = 0; i < plane; ++i) mean += src[i];
    mean /= plane;
    double var = 0.0;
    for (int i = 0; i < plane; ++i) {
      const double d = src[i] - mean;
      var += d * d;
    }
    var /= plane;
    const double inv = 1.0 / std::sqrt(var + eps);
    double sum_g = 0.0;
    double sum_gx = 0.0;
    for (int i = 0; i < plane; ++i) {
      const double xhat = (src[i] - mean) * inv;
      sum_g += g[i];
      sum_gx += g[i] * xhat;
    }
    dg[nc] = sum_gx;
    db[nc] = sum_g;
    if (dx != nullptr) {
      T* out = dx + static_cast<std::size_t>(nc) * plane;
      const double scale = gamma[ch] * inv / plane;
      for (int i = 0; i < plane; ++i) {
        const double xhat = (src[i] - mean) * inv;
        out[i] = static_cast<T>(scale * (plane * g[i] - sum_g - xhat * sum_gx));
      }
    }
  }
  for (int nc = 0; nc < n * c; ++nc) {
    if (dgamma != nullptr) dgamma[nc % c] += static_cast<T>(dg[nc]);
    if (dbeta != nullptr) dbeta[nc % c] += static_cast<T>(db[nc]);
  }
}

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* weight,
                    const T* bias, T* y) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  for (int n = 0; n < g.n; ++n) {
    for (int co = 0; co < g.out_channels; ++co) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bias != nullptr ? bias[co] : 0.0;
          for (int ci = 0; ci < g.in_channels; ++ci) {
            for (int ky = 0; ky < g.kernel; ++ky) {
              const int iy = oy * g.stride + ky - g.pad;
              if (iy < 0 || iy >= g.height) continue;
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int ix = ox * g.stride + kx - g.pad;
                if (ix < 0 || ix >= g.width) continue;
                acc += static_cast<double>(
                           weight[((co * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx]) *
                       x[((static_cast<std::size_t>(n) * g.in_channels + ci) * g.height + iy) *
                             g.width + ix];
              }
            }
          }
          y[((static_cast<std::size_t>(n) * g.out_channels + co) * oh + oy) * ow + ox] =
              static_cast<T>(acc);
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* weight,
                     const T* dy, T* dx, T* dweight, T* dbias) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  if (dx != nullptr) {
    std::fill_n(dx, static_cast<std::size_t>(g.n) * g.in_channels * g.height * g.width, T(0));
  }
  for (int n = 0; n < g.n; ++n) {
    for (int co = 0; co < g.out_channels; ++co) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const T grad =
              dy[((static_cast<std::size_t>(n) * g.out_channels + co) * oh + oy) * ow + ox];
          if (dbias != nullptr) dbias[co] += grad;
          for (int ci = 0; ci < g.in_channels; ++ci) {
            for (int ky = 0; ky < g.kernel; ++ky) {
              const int iy = oy * g.stride + ky - g.pad;
              if (iy < 0 || iy >= g.height) continue;
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int ix = ox * g.stride + kx - g.pad;
                if (ix < 0 || ix >= g.width) continue;
                const std::size_t wi = ((co * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx;
                const std::size_t xi =
                    ((static_cast<std::size_t>(n) * g.in_channels + ci) * g.height + iy) * g.width + ix;
                if (dweight != nullptr) dweight[wi] += grad * x[xi];
                if (dx != nullptr) dx[xi] += grad * weight[wi];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void instance_norm_forward(int n, int c, int plane, const T* x, const T* gamma,
                           const T* beta, T eps, T* y) {
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * plane;
      double mean = 0.0;
      for (int i = 0; i < plane; ++i) mean += x[base + i];
      mean /= plane;
      double var = 0.0;
      for (int i = 0; i < plane; ++i) var += (x[base + i] - mean) * (x[base + i] - mean);
      var /= plane;
      for (int i = 0; i < plane; ++i) {
        y[base + i] = static_cast<T>(gamma[ch] * (x[base + i] - mean) / std::sqrt(var + eps) + beta[ch]);
      }
    }
  }
}

// Straight chain-rule expansion: dx_i = sum_j dy_j * d y_j / d x_i.
template <typename T>
void instance_norm_backward(int n, int c, int plane, const T* x, const T* gamma,
                            const T* dy, T eps, T* dx, T* dgamma, T* dbeta) {
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * plane;
      double mean = 0.0;
      for (int i = 0; i < plane; ++i) mean += x[base + i];
      mean /= plane;
      double var = 0.0;
      for (int i = 0; i < plane; ++i) var += (x[base + i] - mean) * (x[base + i] - mean);
      var /= plane;
      const double sd = std::sqrt(var + eps);
      for (int j = 0; j < plane; ++j) {
        const double xhat = (x[base + j] - mean) / sd;
        if (dgamma != nullptr) dgamma[ch] += static_cast<T>(dy[base + j] * xhat);
        if (dbeta != nullptr) dbeta[ch] += dy[base + j];
      }
      if (dx == nullptr) continue;
      for (int i = 0; i < plane; ++i) {
        double acc = 0.0;
        const double xi = (x[base + i] - mean) / sd;
        for (int j = 0; j < plane; ++j) {
          const double xj = (x[base + j] - mean) / sd;
          const double jac = ((i == j ? 1.0 : 0.0) - 1.0 / plane - xi * xj / plane) / sd;
          acc += dy[base + j] * gamma[ch] * jac;
        }
        dx[base + i] = static_cast<T>(acc);
      }
    }
  }
}

}  // namespace reference

#define CTA_INSTANTIATE(T)                                                              \
  template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*); \
  template void conv2d_backward<T>(const ConvGeometry&, const T*, const T*, const T*, T*, \
                                   T*, T*);                                             \
  template void instance_norm_forward<T>(int, int, int, const T*, const T*, const T*, T, \
                                         T*);                                           \
  template void instance_norm_backward<T>(int, int, int, const T*, const T*, const T*, T, \
                                          T*, T*, T*);                                  \
  template void reference::conv2d_forward<T>(const ConvGeometry&, const T*, const T*,   \
                                             const T*, T*);                             \
  template void reference::conv2d_backward<T>(const ConvGeometry&, const T*, const T*,  \
                                              const T*, T*, T*, T*);                    \
  template void reference::instance_norm_forward<T>(int, int, int, const T*, const T*,  \
                                                    const T*, T, T*);                   \
  template void reference::instance_norm_backward<T>(int, int, int, const T*, const T*, \
                                                     const T*, T, T*, T*, T*);

CTA_INSTANTIATE(float)
CTA_INSTANTIATE(double)
#undef CTA_INSTANTIATE

}  // namespace cta::kernels
