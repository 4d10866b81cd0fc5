#pragma once

#include "cbav/field.hpp"
#include "cbav/raster.hpp"

#include <array>
#include <filesystem>
#include <vector>

namespace cbav {

// Scalar samples on the lattice min + extent * (i, j, k) / resolution,
// x fastest.
struct VoxelGrid {
  Eigen::AlignedBox3d box;
  std::array<int, 3> resolution{2, 2, 2};  // cells per axis
  std::vector<double> values;

  VoxelGrid() = default;
  VoxelGrid(const Eigen::AlignedBox3d& bbox, std::array<int, 3> res);

  int points(int axis) const { return resolution[axis] + 1; }
  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(k) * points(1) + j) * points(0) + i;
  }
  double at(int i, int j, int k) const { return values[index(i, j, k)]; }
  double& at(int i, int j, int k) { return values[index(i, j, k)]; }
  Vec3 point(int i, int j, int k) const;
  Vec3 spacing() const;
  Points lattice() const;
};

// Posed template bounds grown by `margin` times the largest extent on every side.
Eigen::AlignedBox3d extraction_box(const TemplateMesh& posed, double margin = 0.1);

VoxelGrid sample_grid(const BatchField& field, const Eigen::AlignedBox3d& box, std::array<int, 3> resolution);
VoxelGrid sample_grid(const BatchField& field, const Eigen::AlignedBox3d& box, int resolution);

// Pushes the outermost lattice layer above `iso` so surfaces leaving the box get capped.
void seal_boundary(VoxelGrid& grid, double iso = 0.0);

// Isosurface with vertices on lattice edges (plus a centroid for the rare
// cell loop that cannot be split along private diagonals), welded across
// cells, triangles oriented toward values above `iso`. Returns an empty mesh when nothing
// crosses the level.
TemplateMesh marching_cubes(const VoxelGrid& grid, double iso = 0.0);

// Field colors at the mesh vertices, clamped to [0, 1].
void color_vertices(TemplateMesh& mesh, const NeuralField& field);
// Colors then writes OBJ or PLY by extension.
void color_and_export(TemplateMesh& mesh, const NeuralField& field, const std::filesystem::path& path);

struct TurntableView {
  RgbImage color;
  RgbImage normal;
  std::vector<std::uint8_t> mask;
};

// Ray-marched color and normal images from n_views cameras evenly spaced on
// a ring around the posed template.
std::vector<TurntableView> render_turntable(const NeuralField& field, const TemplateMesh& posed, int n_views,
                                            int resolution, double radius = 2.0, double fov_y = 0.96,
                                            int steps = 96);
// Writes <prefix>_<view>_color.png and <prefix>_<view>_normal.png.
std::vector<std::filesystem::path> write_turntable(const std::vector<TurntableView>& views,
                                                   const std::filesystem::path& dir, const std::string& prefix);

}  // namespace cbav
