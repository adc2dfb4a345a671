#pragma once

#include <algorithm>
#include <vector>

namespace cta {

// Axis-aligned box in pixel coordinates; x_max/y_max are exclusive edges.
struct Box {
  int class_id = 0;
  float x_min = 0;
  float y_min = 0;
  float x_max = 0;
  float y_max = 0;

  float area() const { return std::max(0.0f, x_max - x_min) * std::max(0.0f, y_max - y_min); }
  bool valid() const { return x_min < x_max && y_min < y_max; }
  bool operator==(const Box&) const = default;
};

struct Detection {
  Box box;
  float confidence = 0;
};

inline float iou(const Box& a, const Box& b) {
  const float ix = std::max(0.0f, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const float iy = std::max(0.0f, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const float inter = ix * iy;
  const float uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0f;
}

}  // namespace cta
