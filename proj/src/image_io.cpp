#include "cta/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cta::io {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_png(const std::filesystem::path& path, const Raster& raster) {
  if (raster.channels != 1 && raster.channels != 3) {
    throw std::invalid_argument("write_png: unsupported channel count");
  }
  if (raster.pixels.size() !=
      static_cast<std::size_t>(raster.width) * raster.height * raster.channels) {
    throw std::invalid_argument("write_png: pixel buffer size mismatch");
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(raster.width);
  image.height = static_cast<png_uint_32>(raster.height);
  image.format = raster.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (png_image_write_to_file(&image, path.string().c_str(), 0, raster.pixels.data(), 0,
                              nullptr) == 0) {
    throw std::runtime_error("failed to write " + path.string() + ": " + image.message);
  }
}

Raster read_png(const std::filesystem::path& path, int channels) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&image, path.string().c_str()) == 0) {
    throw std::runtime_error("failed to read " + path.string() + ": " + image.message);
  }
  image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Raster r;
  r.width = static_cast<int>(image.width);
  r.height = static_cast<int>(image.height);
  r.channels = channels;
  r.pixels.resize(PNG_IMAGE_SIZE(image));
  if (png_image_finish_read(&image, nullptr, r.pixels.data(), 0, nullptr) == 0) {
    throw std::runtime_error("failed to decode " + path.string() + ": " + image.message);
  }
  return r;
}

Raster to_raster(const Tensor<float>& image) {
  if (image.n() != 1 || (image.c() != 3 && image.c() != 1)) {
    throw std::invalid_argument("to_raster: expected (1, 3|1, H, W), got " + image.shape().str());
  }
  Raster r{image.w(), image.h(), image.c(), {}};
  r.pixels.resize(image.size());
  for (int y = 0; y < image.h(); ++y) {
    for (int x = 0; x < image.w(); ++x) {
      for (int c = 0; c < image.c(); ++c) {
        r.pixels[(static_cast<std::size_t>(y) * image.w() + x) * image.c() + c] =
            to_byte(image.at(0, c, y, x));
      }
    }
  }
  return r;
}

Tensor<float> from_raster(const Raster& r) {
  Tensor<float> t({1, r.channels, r.height, r.width});
  for (int y = 0; y < r.height; ++y) {
    for (int x = 0; x < r.width; ++x) {
      for (int c = 0; c < r.channels; ++c) {
        t.at(0, c, y, x) =
            r.pixels[(static_cast<std::size_t>(y) * r.width + x) * r.channels + c] / 255.0f;
      }
    }
  }
  return t;
}

}  // namespace cta::io
