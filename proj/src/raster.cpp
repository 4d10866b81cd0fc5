#include "cbav/raster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cbav {

Vec3 to_view_normal(const Camera& camera, const Vec3& world_normal) {
  const Mat3 b = camera.basis();
  return {b.row(0).dot(world_normal), b.row(1).dot(world_normal), -b.row(2).dot(world_normal)};
}

RasterResult rasterize(const TemplateMesh& mesh, const Camera& camera) {
  validate(camera);
  const int w = camera.width;
  const int h = camera.height;
  RasterResult out;
  out.color = RgbImage(w, h);
  out.normal = RgbImage(w, h);
  const std::size_t n = static_cast<std::size_t>(w) * h;
  out.depth.assign(n, std::numeric_limits<float>::infinity());
  out.mask.assign(n, 0);
  out.face.assign(n, -1);
  out.bary.assign(n, Vec3::Zero());

  const Points normals = vertex_normals(mesh);
  const bool colored = mesh.has_colors();
  std::vector<double> zbuf(n, std::numeric_limits<double>::infinity());

  Points screen(mesh.num_vertices(), 3);
  for (int i = 0; i < mesh.num_vertices(); ++i) screen.row(i) = camera.project(mesh.vertex(i)).transpose();

  constexpr double kNear = 1e-3;
  for (int f = 0; f < mesh.num_faces(); ++f) {
    const int i0 = mesh.faces(f, 0);
    const int i1 = mesh.faces(f, 1);
    const int i2 = mesh.faces(f, 2);
    const Vec3 p0 = screen.row(i0).transpose();
    const Vec3 p1 = screen.row(i1).transpose();
    const Vec3 p2 = screen.row(i2).transpose();
    if (p0.z() <= kNear || p1.z() <= kNear || p2.z() <= kNear) continue;
    const double area = (p1.x() - p0.x()) * (p2.y() - p0.y()) - (p1.y() - p0.y()) * (p2.x() - p0.x());
    if (area == 0.0) continue;
    const int x_min = std::max(0, static_cast<int>(std::floor(std::min({p0.x(), p1.x(), p2.x()}) - 0.5)));
    const int x_max = std::min(w - 1, static_cast<int>(std::ceil(std::max({p0.x(), p1.x(), p2.x()}) - 0.5)));
    const int y_min = std::max(0, static_cast<int>(std::floor(std::min({p0.y(), p1.y(), p2.y()}) - 0.5)));
    const int y_max = std::min(h - 1, static_cast<int>(std::ceil(std::max({p0.y(), p1.y(), p2.y()}) - 0.5)));
    for (int y = y_min; y <= y_max; ++y)
      for (int x = x_min; x <= x_max; ++x) {
        const double px = x + 0.5;
        const double py = y + 0.5;
        double b0 = (p1.x() - px) * (p2.y() - py) - (p1.y() - py) * (p2.x() - px);
        double b1 = (p2.x() - px) * (p0.y() - py) - (p2.y() - py) * (p0.x() - px);
        double b2 = (p0.x() - px) * (p1.y() - py) - (p0.y() - py) * (p1.x() - px);
        b0 /= area;
        b1 /= area;
        b2 /= area;
        if (b0 < 0.0 || b1 < 0.0 || b2 < 0.0) continue;
        const double inv_z = b0 / p0.z() + b1 / p1.z() + b2 / p2.z();
        const double z = 1.0 / inv_z;
        const std::size_t idx = out.index(x, y);
        if (!(z < zbuf[idx])) continue;
        zbuf[idx] = z;
        const Vec3 wts = Vec3(b0 / p0.z(), b1 / p1.z(), b2 / p2.z()) * z;
        out.depth[idx] = static_cast<float>(z);
        out.mask[idx] = 1;
        out.face[idx] = f;
        out.bary[idx] = wts;
        Vec3 c = Vec3::Ones();
        if (colored)
          c = wts[0] * mesh.vertex_colors.row(i0).transpose() + wts[1] * mesh.vertex_colors.row(i1).transpose() +
              wts[2] * mesh.vertex_colors.row(i2).transpose();
        out.color.pixels[idx] = c.cast<float>();
        Vec3 nw = wts[0] * normals.row(i0).transpose() + wts[1] * normals.row(i1).transpose() +
                  wts[2] * normals.row(i2).transpose();
        if (nw.norm() > 0.0) nw.normalize();
        out.normal.pixels[idx] = remap_normal(to_view_normal(camera, nw)).cast<float>();
      }
  }
  return out;
}

}  // namespace cbav
