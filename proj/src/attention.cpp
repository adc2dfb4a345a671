#include "cta/attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cta::attention {
namespace {

template <typename T>
void require_finite(std::span<const T> v, const char* what) {
  for (const T x : v) {
    if (!std::isfinite(static_cast<double>(x))) {
      throw std::invalid_argument(std::string(what) + " contains NaN or Inf");
    }
  }
}

struct Tap1d {
  int lo, hi;
  double frac;  // weight of hi
};

// Half-pixel-centre source coordinate for output index i.
Tap1d bilinear_tap(int i, int src, int dst) {
  double x = (i + 0.5) * static_cast<double>(src) / dst - 0.5;
  x = std::clamp(x, 0.0, static_cast<double>(src - 1));
  const int lo = static_cast<int>(std::floor(x));
  const int hi = std::min(lo + 1, src - 1);
  return {lo, hi, x - lo};
}

}  // namespace

template <typename T>
std::vector<T> grad_cam_weights(std::span<const T> grads, int channels, int height, int width) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  if (grads.size() != plane * channels) throw std::invalid_argument("grad_cam: gradient shape mismatch");
  std::vector<T> alpha(channels);
  for (int k = 0; k < channels; ++k) {
    double acc = 0;
    for (std::size_t p = 0; p < plane; ++p) acc += grads[k * plane + p];
    alpha[k] = static_cast<T>(acc / static_cast<double>(plane));
  }
  return alpha;
}

template <typename T>
AttentionMap<T> grad_cam(std::span<const T> features, std::span<const T> grads, int channels,
                         int height, int width) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  if (features.size() != plane * channels || grads.size() != features.size()) {
    throw std::invalid_argument("grad_cam: features and gradients must both be K x h x w");
  }
  require_finite(features, "grad_cam features");
  require_finite(grads, "grad_cam gradients");
  const auto alpha = grad_cam_weights(grads, channels, height, width);
  AttentionMap<T> m{height, width, std::vector<T>(plane), false};
  for (std::size_t p = 0; p < plane; ++p) {
    double acc = 0;
    for (int k = 0; k < channels; ++k) acc += static_cast<double>(alpha[k]) * features[k * plane + p];
    m.values[p] = acc > 0 ? static_cast<T>(acc) : T(0);
  }
  return m;
}

template <typename T>
std::vector<T> grad_cam_backward(std::span<const T> features, std::span<const T> alpha,
                                 const AttentionMap<T>& raw, std::span<const T> d_map) {
  const std::size_t plane = raw.size();
  const int channels = static_cast<int>(alpha.size());
  if (features.size() != plane * channels || d_map.size() != plane) {
    throw std::invalid_argument("grad_cam_backward: shape mismatch");
  }
  std::vector<T> d_features(features.size(), T(0));
  for (std::size_t p = 0; p < plane; ++p) {
    if (!(raw.values[p] > T(0))) continue;
    for (int k = 0; k < channels; ++k) d_features[k * plane + p] = alpha[k] * d_map[p];
  }
  return d_features;
}

template <typename T>
AttentionMap<T> normalize_map(const AttentionMap<T>& m) {
  if (m.values.empty()) throw std::invalid_argument("normalize_map: empty map");
  for (const T v : m.values) {
    if (!(v >= T(0))) throw std::invalid_argument("normalize_map: negative or NaN value");
  }
  const auto [lo_it, hi_it] = std::minmax_element(m.values.begin(), m.values.end());
  const T lo = *lo_it;
  const T hi = *hi_it;
  AttentionMap<T> out{m.height, m.width, std::vector<T>(m.size(), T(0)), true};
  if (hi == lo) return out;
  const T range = hi - lo;
  for (std::size_t i = 0; i < m.size(); ++i) out.values[i] = (m.values[i] - lo) / range;
  return out;
}

template <typename T>
std::vector<T> normalize_backward(const AttentionMap<T>& raw, std::span<const T> d_normalized) {
  if (d_normalized.size() != raw.size()) throw std::invalid_argument("normalize_backward: shape mismatch");
  std::vector<T> d(raw.size(), T(0));
  const auto lo_it = std::min_element(raw.values.begin(), raw.values.end());
  const auto hi_it = std::max_element(raw.values.begin(), raw.values.end());
  const T lo = *lo_it;
  const T hi = *hi_it;
  if (hi == lo) return d;
  const double range = static_cast<double>(hi) - lo;
  double to_lo = 0;
  double to_hi = 0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double g = d_normalized[i];
    d[i] = static_cast<T>(g / range);
    to_lo += g * (static_cast<double>(raw.values[i]) - hi) / (range * range);
    to_hi -= g * (static_cast<double>(raw.values[i]) - lo) / (range * range);
  }
  d[lo_it - raw.values.begin()] += static_cast<T>(to_lo);
  d[hi_it - raw.values.begin()] += static_cast<T>(to_hi);
  return d;
}

template <typename T>
AttentionMap<T> upsample_map(const AttentionMap<T>& m, int height, int width) {
  if (height < m.height || width < m.width) {
    throw std::invalid_argument("upsample_map: target must not be smaller than the source");
  }
  AttentionMap<T> out{height, width, std::vector<T>(static_cast<std::size_t>(height) * width),
                      m.normalized};
  for (int y = 0; y < height; ++y) {
    const auto ty = bilinear_tap(y, m.height, height);
    for (int x = 0; x < width; ++x) {
      const auto tx = bilinear_tap(x, m.width, width);
      const double a = m.values[static_cast<std::size_t>(ty.lo) * m.width + tx.lo];
      const double b = m.values[static_cast<std::size_t>(ty.lo) * m.width + tx.hi];
      const double c = m.values[static_cast<std::size_t>(ty.hi) * m.width + tx.lo];
      const double d = m.values[static_cast<std::size_t>(ty.hi) * m.width + tx.hi];
      const double top = a + tx.frac * (b - a);
      const double bottom = c + tx.frac * (d - c);
      out.values[static_cast<std::size_t>(y) * width + x] = static_cast<T>(top + ty.frac * (bottom - top));
    }
  }
  if (height == m.height && width == m.width) out.values = m.values;
  return out;
}

template <typename T>
std::vector<T> upsample_backward(std::span<const T> d_up, int src_height, int src_width, int height,
                                 int width) {
  if (d_up.size() != static_cast<std::size_t>(height) * width) {
    throw std::invalid_argument("upsample_backward: shape mismatch");
  }
  std::vector<double> acc(static_cast<std::size_t>(src_height) * src_width, 0.0);
  for (int y = 0; y < height; ++y) {
    const auto ty = bilinear_tap(y, src_height, height);
    for (int x = 0; x < width; ++x) {
      const auto tx = bilinear_tap(x, src_width, width);
      const double g = d_up[static_cast<std::size_t>(y) * width + x];
      acc[static_cast<std::size_t>(ty.lo) * src_width + tx.lo] += g * (1 - ty.frac) * (1 - tx.frac);
      acc[static_cast<std::size_t>(ty.lo) * src_width + tx.hi] += g * (1 - ty.frac) * tx.frac;
      acc[static_cast<std::size_t>(ty.hi) * src_width + tx.lo] += g * ty.frac * (1 - tx.frac);
      acc[static_cast<std::size_t>(ty.hi) * src_width + tx.hi] += g * ty.frac * tx.frac;
    }
  }
  return {acc.begin(), acc.end()};
}

template <typename T>
std::vector<T> fused_mean(std::span<const AttentionMap<T>> maps) {
  if (maps.empty()) throw std::invalid_argument("co_attention: no maps to fuse");
  const auto& first = maps.front();
  for (const auto& m : maps) {
    if (m.height != first.height || m.width != first.width) {
      throw std::invalid_argument("co_attention: map shape mismatch");
    }
    if (!m.normalized) throw std::invalid_argument("co_attention: input maps must be normalized");
  }
  // Summing each pixel's values in sorted order makes the result independent
  // of the order the maps are given in.
  std::vector<T> mean(first.size());
  std::vector<double> column(maps.size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    for (std::size_t k = 0; k < maps.size(); ++k) column[k] = maps[k].values[i];
    std::sort(column.begin(), column.end());
    double acc = 0;
    for (double v : column) acc += v;
    mean[i] = static_cast<T>(acc / maps.size());
  }
  return mean;
}

template <typename T>
CoAttentionMap<T> co_attention(std::span<const AttentionMap<T>> maps) {
  AttentionMap<T> mean{maps.empty() ? 0 : maps.front().height, maps.empty() ? 0 : maps.front().width,
                       fused_mean(maps), false};
  auto scaled = normalize_map(mean);
  return {scaled.height, scaled.width, std::move(scaled.values)};
}

template <typename T>
AntiAttentionMap<T> anti_attention(const CoAttentionMap<T>& co) {
  AntiAttentionMap<T> anti{co.height, co.width, std::vector<T>(co.values.size()), co.values};
  for (std::size_t i = 0; i < co.values.size(); ++i) {
    const T v = co.values[i];
    if (!(v >= T(0) && v <= T(1))) throw std::invalid_argument("anti_attention: co-attention outside [0,1]");
    anti.values[i] = T(1) - v;
  }
  return anti;
}

template <typename T>
CoAttentionMap<T> anti_attention(const AntiAttentionMap<T>& anti) {
  if (anti.source.size() == anti.values.size()) return {anti.height, anti.width, anti.source};
  auto back = anti_attention(CoAttentionMap<T>{anti.height, anti.width, anti.values});
  return {back.height, back.width, std::move(back.values)};
}

template <typename T>
double attention_mass_fraction(const AttentionMap<T>& m, std::span<const std::uint8_t> region_mask) {
  if (region_mask.size() != m.size()) throw std::invalid_argument("attention_mass_fraction: shape mismatch");
  double total = 0;
  double inside = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    total += m.values[i];
    if (region_mask[i] != 0) inside += m.values[i];
  }
  if (!(total > 0)) throw std::invalid_argument("undefined mass fraction: attention map sums to zero");
  return inside / total;
}

template <typename T>
io::Raster heatmap_raster(int height, int width, std::span<const T> values) {
  io::Raster r{width, height, 1, std::vector<std::uint8_t>(values.size())};
  for (std::size_t i = 0; i < values.size(); ++i) r.pixels[i] = io::to_byte(values[i]);
  return r;
}

void jet(double v, double rgb[3]) {
  v = std::clamp(v, 0.0, 1.0);
  rgb[0] = std::clamp(1.5 - std::abs(4 * v - 3), 0.0, 1.0);
  rgb[1] = std::clamp(1.5 - std::abs(4 * v - 2), 0.0, 1.0);
  rgb[2] = std::clamp(1.5 - std::abs(4 * v - 1), 0.0, 1.0);
}

template <typename T>
io::Raster overlay_raster(const Tensor<float>& image, const AttentionMap<T>& m) {
  const auto full = upsample_map(m, image.h(), image.w());
  io::Raster r{image.w(), image.h(), 3, std::vector<std::uint8_t>(static_cast<std::size_t>(image.w()) * image.h() * 3)};
  for (int y = 0; y < image.h(); ++y) {
    for (int x = 0; x < image.w(); ++x) {
      double rgb[3];
      jet(full.values[static_cast<std::size_t>(y) * image.w() + x], rgb);
      for (int c = 0; c < 3; ++c) {
        r.pixels[(static_cast<std::size_t>(y) * image.w() + x) * 3 + c] =
            io::to_byte(0.5 * image.at(0, c, y, x) + 0.5 * rgb[c]);
      }
    }
  }
  return r;
}

#define CTA_INSTANTIATE(T)                                                                       \
  template std::vector<T> grad_cam_weights<T>(std::span<const T>, int, int, int);               \
  template AttentionMap<T> grad_cam<T>(std::span<const T>, std::span<const T>, int, int, int);   \
  template std::vector<T> grad_cam_backward<T>(std::span<const T>, std::span<const T>,           \
                                               const AttentionMap<T>&, std::span<const T>);      \
  template AttentionMap<T> normalize_map<T>(const AttentionMap<T>&);                             \
  template std::vector<T> normalize_backward<T>(const AttentionMap<T>&, std::span<const T>);     \
  template AttentionMap<T> upsample_map<T>(const AttentionMap<T>&, int, int);                    \
  template std::vector<T> upsample_backward<T>(std::span<const T>, int, int, int, int);          \
  template std::vector<T> fused_mean<T>(std::span<const AttentionMap<T>>);                       \
  template CoAttentionMap<T> co_attention<T>(std::span<const AttentionMap<T>>);                  \
  template AntiAttentionMap<T> anti_attention<T>(const CoAttentionMap<T>&);                      \
  template CoAttentionMap<T> anti_attention<T>(const AntiAttentionMap<T>&);                      \
  template double attention_mass_fraction<T>(const AttentionMap<T>&, std::span<const std::uint8_t>); \
  template io::Raster heatmap_raster<T>(int, int, std::span<const T>);                           \
  template io::Raster overlay_raster<T>(const Tensor<float>&, const AttentionMap<T>&);

CTA_INSTANTIATE(float)
CTA_INSTANTIATE(double)
#undef CTA_INSTANTIATE

}  // namespace cta::attention
