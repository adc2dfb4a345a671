#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cta/image_io.hpp"
#include "cta/tensor.hpp"

namespace cta::attention {

// Nonnegative 2-D saliency field, row-major.
template <typename T>
struct AttentionMap {
  int height = 0;
  int width = 0;
  std::vector<T> values;
  bool normalized = false;

  std::size_t size() const { return values.size(); }
};

// Image-resolution fused maps; co + anti == 1 pointwise.
template <typename T>
struct CoAttentionMap {
  int height = 0;
  int width = 0;
  std::vector<T> values;
};

template <typename T>
struct AntiAttentionMap {
  int height = 0;
  int width = 0;
  std::vector<T> values;
  // The co-attention this map complements, when known. 1 - (1 - v) rounds
  // differently from v for v < 0.5, so inverting returns this instead.
  std::vector<T> source;
};

// Channel weights: alpha_k = (1/Z) sum_{i,j} grads_k(i,j), Z = h*w.
template <typename T>
std::vector<T> grad_cam_weights(std::span<const T> grads, int channels, int height, int width);

// max(0, sum_k alpha_k F_k(i,j)). Features and grads are (K, h, w).
template <typename T>
AttentionMap<T> grad_cam(std::span<const T> features, std::span<const T> grads, int channels,
                         int height, int width);

// Gradient of the raw Grad-CAM map w.r.t. the features for fixed channel
// weights. This is the full derivative whenever the channel weights do not
// depend on the features, as for a global-average-pool + linear head.
template <typename T>
std::vector<T> grad_cam_backward(std::span<const T> features, std::span<const T> alpha,
                                 const AttentionMap<T>& raw, std::span<const T> d_map);

// Min-max scaling to [0, 1]; a constant map becomes all zeros.
template <typename T>
AttentionMap<T> normalize_map(const AttentionMap<T>& m);
template <typename T>
std::vector<T> normalize_backward(const AttentionMap<T>& raw, std::span<const T> d_normalized);

// Bilinear resize with half-pixel centres. Downscaling is rejected.
template <typename T>
AttentionMap<T> upsample_map(const AttentionMap<T>& m, int height, int width);
template <typename T>
std::vector<T> upsample_backward(std::span<const T> d_up, int src_height, int src_width,
                                 int height, int width);

// normalize((1/K) sum_k maps_k); inputs must be normalized and equally sized.
template <typename T>
CoAttentionMap<T> co_attention(std::span<const AttentionMap<T>> maps);
// Mean of the inputs before scaling.
template <typename T>
std::vector<T> fused_mean(std::span<const AttentionMap<T>> maps);

template <typename T>
AntiAttentionMap<T> anti_attention(const CoAttentionMap<T>& co);
// anti(anti(co)) == co exactly.
template <typename T>
CoAttentionMap<T> anti_attention(const AntiAttentionMap<T>& anti);

// (sum m * mask) / (sum m).
template <typename T>
double attention_mass_fraction(const AttentionMap<T>& m, std::span<const std::uint8_t> region_mask);

// 8-bit grayscale (round(255 v)) of a map with values in [0, 1].
template <typename T>
io::Raster heatmap_raster(int height, int width, std::span<const T> values);

// Jet colormap alpha-blended at 0.5 over an RGB image; the map is resized to
// the image first.
template <typename T>
io::Raster overlay_raster(const Tensor<float>& image, const AttentionMap<T>& m);

// Jet colormap value for v in [0, 1].
void jet(double v, double rgb[3]);

}  // namespace cta::attention
