#pragma once

#include "artcore/core.hpp"
#include "artcore/image.hpp"
#include "artcore/lie.hpp"

#include <optional>
#include <vector>

namespace artcore {

/// Per-pixel 3D points in the camera frame with validity and raw confidence.
struct Pointmap {
  int height = 0;
  int width = 0;
  std::vector<Vec3> points;
  std::vector<std::uint8_t> valid;
  std::vector<float> raw_conf;  // [0, 1]

  Pointmap() = default;
  Pointmap(int h, int w)
      : height(h),
        width(w),
        points(static_cast<size_t>(h) * w, Vec3::Zero()),
        valid(static_cast<size_t>(h) * w, 0),
        raw_conf(static_cast<size_t>(h) * w, 0.f) {}

  size_t index(int y, int x) const { return static_cast<size_t>(y) * width + x; }
  bool is_valid(int y, int x) const { return valid[index(y, x)] != 0; }
  const Vec3& point(int y, int x) const { return points[index(y, x)]; }
  float conf(int y, int x) const { return raw_conf[index(y, x)]; }

  void set(int y, int x, const Vec3& p, float c) {
    const size_t i = index(y, x);
    points[i] = p;
    valid[i] = 1;
    raw_conf[i] = c;
  }

  int valid_count() const {
    int n = 0;
    for (auto v : valid) n += v != 0;
    return n;
  }
};

struct Correspondence {
  Vec2 pixel_c = Vec2::Zero();
  Vec2 pixel_k = Vec2::Zero();
  Vec3 p_c = Vec3::Zero();
  Vec3 p_k = Vec3::Zero();
};

struct CorrespondenceSet {
  int frame_c = -1;
  int frame_k = -1;
  std::vector<Correspondence> items;

  size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
};

struct Frame {
  int id = -1;
  double timestamp = 0.0;
  Image image;
  std::optional<CameraIntrinsics> intrinsics;
};

}  // namespace artcore
