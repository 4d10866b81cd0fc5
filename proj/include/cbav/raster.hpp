#pragma once

#include "cbav/geometry.hpp"

#include <cstdint>
#include <vector>

namespace cbav {

using Vec3f = Eigen::Vector3f;

inline constexpr float kBackground = 0.5f;

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<Vec3f> pixels;

  RgbImage() = default;
  RgbImage(int w, int h, const Vec3f& fill = Vec3f::Constant(kBackground))
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}
  Vec3f& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  const Vec3f& at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

// Output of the reference z-buffer rasterizer. Uncovered pixels keep the
// background gray in both image channels, infinite depth and face -1.
struct RasterResult {
  RgbImage color;
  RgbImage normal;  // view-space unit normals remapped by n * 0.5 + 0.5
  std::vector<float> depth;
  std::vector<std::uint8_t> mask;
  std::vector<int> face;
  std::vector<Vec3> bary;  // perspective-correct weights of the face's vertices

  int width() const { return color.width; }
  int height() const { return color.height; }
  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * color.width + x; }
};

// World normal to the camera frame used by normal images: x right, y up,
// z toward the camera.
Vec3 to_view_normal(const Camera& camera, const Vec3& world_normal);
inline Vec3 remap_normal(const Vec3& n) { return 0.5 * n + Vec3::Constant(0.5); }

// Perspective z-buffer rasterization with interpolated vertex colors and
// angle-weighted vertex normals. Meshes without colors render white.
// Triangles touching the near plane are skipped.
RasterResult rasterize(const TemplateMesh& mesh, const Camera& camera);

}  // namespace cbav
