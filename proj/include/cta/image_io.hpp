#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cta/tensor.hpp"

namespace cta::io {

// 8-bit raster in interleaved row-major layout.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;
};

void write_png(const std::filesystem::path& path, const Raster& raster);
Raster read_png(const std::filesystem::path& path, int channels);

// (1, 3, H, W) image in [0, 1] <-> RGB raster; values are rounded to 8 bits.
Raster to_raster(const Tensor<float>& image);
Tensor<float> from_raster(const Raster& raster);

std::uint8_t to_byte(double v);

}  // namespace cta::io
