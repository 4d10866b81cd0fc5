#include "cbav/mesher.hpp"

#include "cbav/adversarial.hpp"
#include "cbav/image_io.hpp"
#include "cbav/mesh_io.hpp"
#include "cbav/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace cbav {

namespace {

// Cube corner c sits at offset (c & 1, (c >> 1) & 1, (c >> 2) & 1).
struct CubeTables {
  std::array<std::array<int, 3>, 8> corner{};
  std::array<std::array<int, 2>, 12> edge{};  // low corner, high corner
  std::array<int, 12> edge_axis{};
  std::array<std::array<int, 8>, 8> edge_of{};
  std::array<std::array<int, 4>, 6> face{};   // corners counter-clockwise seen from outside
  std::array<int, 6> face_axis{};
  std::array<std::array<int, 2>, 12> edge_faces{};

  CubeTables() {
    for (int c = 0; c < 8; ++c) corner[c] = {c & 1, (c >> 1) & 1, (c >> 2) & 1};
    for (auto& row : edge_of) row.fill(-1);
    int e = 0;
    for (int a = 0; a < 8; ++a)
      for (int ax = 0; ax < 3; ++ax) {
        if (a & (1 << ax)) continue;
        const int b = a | (1 << ax);
        edge[e] = {a, b};
        edge_axis[e] = ax;
        edge_of[a][b] = edge_of[b][a] = e;
        ++e;
      }
    int f = 0;
    for (int ax = 0; ax < 3; ++ax)
      for (int side = 0; side < 2; ++side) {
        Vec3 n = Vec3::Zero();
        n[ax] = side ? 1.0 : -1.0;
        const int u = (ax + 1) % 3;
        const int v = (ax + 2) % 3;
        // (e_u, e_v, e_ax) is right handed, so e_u x e_v = e_ax.
        std::vector<std::pair<double, int>> ring;
        for (int c = 0; c < 8; ++c) {
          if (corner[c][ax] != side) continue;
          const double ru = corner[c][u] - 0.5;
          const double rv = corner[c][v] - 0.5;
          double angle = std::atan2(rv, ru);
          if (!side) angle = -angle;
          ring.emplace_back(angle, c);
        }
        std::sort(ring.begin(), ring.end());
        for (int i = 0; i < 4; ++i) face[f][i] = ring[i].second;
        face_axis[f] = ax;
        ++f;
      }
    std::array<int, 12> seen{};
    for (int fi = 0; fi < 6; ++fi)
      for (int i = 0; i < 4; ++i) {
        const int ei = edge_of[face[fi][i]][face[fi][(i + 1) % 4]];
        edge_faces[ei][seen[ei]++] = fi;
      }
  }

  bool share_face(int a, int b) const {
    for (int fa : edge_faces[a])
      for (int fb : edge_faces[b])
        if (fa == fb) return true;
    return false;
  }
};

const CubeTables& tables() {
  static const CubeTables t;
  return t;
}

class Extractor {
 public:
  Extractor(const VoxelGrid& grid, double iso) : g_(grid), iso_(iso) {}

  std::int64_t edge_id(int i, int j, int k, int axis) const {
    return static_cast<std::int64_t>(g_.index(i, j, k)) * 3 + axis;
  }

  Vec3 edge_point(std::int64_t id) const {
    const int axis = static_cast<int>(id % 3);
    std::int64_t lin = id / 3;
    const int i = static_cast<int>(lin % g_.points(0));
    lin /= g_.points(0);
    const int j = static_cast<int>(lin % g_.points(1));
    const int k = static_cast<int>(lin / g_.points(1));
    std::array<int, 3> hi{i, j, k};
    ++hi[axis];
    const double v0 = g_.at(i, j, k);
    const double v1 = g_.at(hi[0], hi[1], hi[2]);
    const Vec3 p0 = g_.point(i, j, k);
    const Vec3 p1 = g_.point(hi[0], hi[1], hi[2]);
    const double t = (iso_ - v0) / (v1 - v0);
    return p0 + t * (p1 - p0);
  }

  // Whether the positive corners of a face connect through its interior.
  // Evaluated from a canonical corner order so both adjacent cells agree.
  bool positive_connected(int axis, int i, int j, int k) const {
    const int u = axis == 0 ? 1 : 0;
    const int v = axis == 2 ? 1 : 2;
    std::array<int, 3> p{i, j, k};
    auto val = [&](int du, int dv) {
      std::array<int, 3> q = p;
      q[u] += du;
      q[v] += dv;
      return g_.at(q[0], q[1], q[2]) - iso_;
    };
    const double w0 = val(0, 0);
    const double w1 = val(1, 0);
    const double w2 = val(1, 1);
    const double w3 = val(0, 1);
    const double den = w0 + w2 - w1 - w3;
    if (den == 0.0) return false;
    return (w0 * w2 - w1 * w3) / den > 0.0;
  }

  // Loop centers get ids past the lattice edges: one block of four per cell.
  std::int64_t center_id(int i, int j, int k, int loop) const {
    const std::int64_t cells = (static_cast<std::int64_t>(k) * g_.resolution[1] + j) * g_.resolution[0] + i;
    return static_cast<std::int64_t>(g_.values.size()) * 3 + cells * 4 + loop;
  }

  void cell(int i, int j, int k, std::vector<std::array<std::int64_t, 3>>& out,
            std::unordered_map<std::int64_t, Vec3>& centers) const {
    const CubeTables& t = tables();
    std::array<double, 8> val{};
    std::array<bool, 8> pos{};
    int count = 0;
    for (int c = 0; c < 8; ++c) {
      val[c] = g_.at(i + t.corner[c][0], j + t.corner[c][1], k + t.corner[c][2]);
      pos[c] = val[c] > iso_;
      count += pos[c];
    }
    if (count == 0 || count == 8) return;

    std::array<int, 12> next;
    next.fill(-1);
    for (int f = 0; f < 6; ++f) {
      const auto& q = t.face[f];
      std::array<int, 4> edges{};
      std::array<int, 4> kind{};  // 1: + to -, -1: - to +, 0: none
      int crossings = 0;
      for (int a = 0; a < 4; ++a) {
        edges[a] = t.edge_of[q[a]][q[(a + 1) % 4]];
        kind[a] = pos[q[a]] == pos[q[(a + 1) % 4]] ? 0 : (pos[q[a]] ? 1 : -1);
        crossings += kind[a] != 0;
      }
      if (crossings == 0) continue;
      if (crossings == 2) {
        int from = -1;
        int to = -1;
        for (int a = 0; a < 4; ++a) {
          if (kind[a] == 1) from = edges[a];
          if (kind[a] == -1) to = edges[a];
        }
        next[from] = to;
        continue;
      }
      int base = 0;
      for (int c = 1; c < 4; ++c)
        if (q[c] < q[base]) base = c;
      const bool joined = positive_connected(t.face_axis[f], i + t.corner[q[base]][0], j + t.corner[q[base]][1],
                                             k + t.corner[q[base]][2]);
      for (int a = 0; a < 4; ++a)
        if (kind[a] == 1) next[edges[a]] = edges[(a + (joined ? 1 : 3)) % 4];
    }

    std::array<Vec3, 12> point;
    std::array<std::int64_t, 12> gid{};
    for (int e = 0; e < 12; ++e) {
      if (next[e] < 0) continue;
      const int a = t.edge[e][0];
      gid[e] = edge_id(i + t.corner[a][0], j + t.corner[a][1], k + t.corner[a][2], t.edge_axis[e]);
      point[e] = edge_point(gid[e]);
    }

    std::array<bool, 12> used{};
    int loops = 0;
    for (int start = 0; start < 12; ++start) {
      if (next[start] < 0 || used[start]) continue;
      std::vector<int> loop;
      for (int e = start; !used[e]; e = next[e]) {
        if (next[e] < 0) throw std::logic_error("marching_cubes: open loop");
        used[e] = true;
        loop.push_back(e);
      }
      if (!triangulate(loop, point, gid, out)) {
        // No face-safe ear clipping: fan around the loop centroid instead.
        const std::int64_t c = center_id(i, j, k, loops);
        Vec3 mid = Vec3::Zero();
        for (int e : loop) mid += point[e];
        centers[c] = mid / static_cast<double>(loop.size());
        for (std::size_t a = 0; a < loop.size(); ++a) out.push_back({gid[loop[a]], gid[loop[(a + 1) % loop.size()]], c});
      }
      ++loops;
    }
  }

 private:
  // Ear clipping that never uses a diagonal lying on a cube face, so every
  // diagonal is private to this cell. Emits nothing and returns false when
  // it gets stuck.
  static bool triangulate(std::vector<int> loop, const std::array<Vec3, 12>& point,
                          const std::array<std::int64_t, 12>& gid, std::vector<std::array<std::int64_t, 3>>& out) {
    const CubeTables& t = tables();
    std::vector<std::array<std::int64_t, 3>> tris;
    while (loop.size() > 3) {
      const int n = static_cast<int>(loop.size());
      int best = -1;
      double best_len = 0.0;
      for (int a = 0; a < n; ++a) {
        const int p = loop[(a + n - 1) % n];
        const int q = loop[(a + 1) % n];
        if (t.share_face(p, q)) continue;
        const double len = (point[p] - point[q]).squaredNorm();
        if (best < 0 || len < best_len) {
          best = a;
          best_len = len;
        }
      }
      if (best < 0) return false;
      tris.push_back({gid[loop[(best + n - 1) % n]], gid[loop[best]], gid[loop[(best + 1) % n]]});
      loop.erase(loop.begin() + best);
    }
    tris.push_back({gid[loop[0]], gid[loop[1]], gid[loop[2]]});
    out.insert(out.end(), tris.begin(), tris.end());
    return true;
  }

  const VoxelGrid& g_;
  double iso_;
};

}  // namespace

VoxelGrid::VoxelGrid(const Eigen::AlignedBox3d& bbox, std::array<int, 3> res) : box(bbox), resolution(res) {
  for (int a = 0; a < 3; ++a) {
    if (res[a] < 2) throw std::invalid_argument("VoxelGrid: resolution must be at least 2 per axis");
    if (!(box.max()[a] > box.min()[a]) || !std::isfinite(box.max()[a] - box.min()[a]))
      throw std::invalid_argument("VoxelGrid: box must have positive finite extent");
  }
  values.assign(static_cast<std::size_t>(points(0)) * points(1) * points(2), 0.0);
}

Vec3 VoxelGrid::point(int i, int j, int k) const {
  const Vec3 ext = box.sizes();
  return {box.min().x() + ext.x() * i / resolution[0], box.min().y() + ext.y() * j / resolution[1],
          box.min().z() + ext.z() * k / resolution[2]};
}

Vec3 VoxelGrid::spacing() const {
  const Vec3 ext = box.sizes();
  return {ext.x() / resolution[0], ext.y() / resolution[1], ext.z() / resolution[2]};
}

Points VoxelGrid::lattice() const {
  Points x(static_cast<Eigen::Index>(values.size()), 3);
  for (int k = 0; k < points(2); ++k)
    for (int j = 0; j < points(1); ++j)
      for (int i = 0; i < points(0); ++i) x.row(index(i, j, k)) = point(i, j, k).transpose();
  return x;
}

Eigen::AlignedBox3d extraction_box(const TemplateMesh& posed, double margin) {
  const Eigen::AlignedBox3d tight = bounding_box(posed);
  const Vec3 grow = Vec3::Constant(margin * tight.sizes().maxCoeff());
  return {tight.min() - grow, tight.max() + grow};
}

void seal_boundary(VoxelGrid& grid, double iso) {
  const double outside = iso + 0.5 * grid.spacing().minCoeff();
  const int ni = grid.points(0), nj = grid.points(1), nk = grid.points(2);
  for (int k = 0; k < nk; ++k)
    for (int j = 0; j < nj; ++j)
      for (int i = 0; i < ni; ++i) {
        if (i > 0 && j > 0 && k > 0 && i < ni - 1 && j < nj - 1 && k < nk - 1) continue;
        double& v = grid.at(i, j, k);
        v = std::max(v, outside);
      }
}

VoxelGrid sample_grid(const BatchField& field, const Eigen::AlignedBox3d& box, std::array<int, 3> resolution) {
  VoxelGrid grid(box, resolution);
  const int slab = grid.points(0) * grid.points(1);
  const Points x = grid.lattice();
  // One slab of lattice points per batch keeps memory bounded.
  constexpr int kSlabsPerBatch = 8;
  for (int k0 = 0; k0 < grid.points(2); k0 += kSlabsPerBatch) {
    const int count = std::min(kSlabsPerBatch, grid.points(2) - k0) * slab;
    const Eigen::VectorXd v = field(x.middleRows(static_cast<Eigen::Index>(k0) * slab, count));
    if (v.size() != count) throw std::runtime_error("sample_grid: field returned the wrong number of values");
    std::copy(v.data(), v.data() + count, grid.values.begin() + static_cast<std::ptrdiff_t>(k0) * slab);
  }
  return grid;
}

VoxelGrid sample_grid(const BatchField& field, const Eigen::AlignedBox3d& box, int resolution) {
  return sample_grid(field, box, {resolution, resolution, resolution});
}

TemplateMesh marching_cubes(const VoxelGrid& grid, double iso) {
  for (double v : grid.values)
    if (!std::isfinite(v)) throw std::invalid_argument("marching_cubes: grid contains non-finite values");
  if (!std::isfinite(iso)) throw std::invalid_argument("marching_cubes: iso must be finite");
  const Extractor ex(grid, iso);
  const int nz = grid.resolution[2];
  std::vector<std::vector<std::array<std::int64_t, 3>>> slabs(nz);
  std::vector<std::unordered_map<std::int64_t, Vec3>> centers(nz);
  parallel_for(
      nz,
      [&](std::size_t begin, std::size_t end) {
        for (std::size_t k = begin; k < end; ++k)
          for (int j = 0; j < grid.resolution[1]; ++j)
            for (int i = 0; i < grid.resolution[0]; ++i) ex.cell(i, j, static_cast<int>(k), slabs[k], centers[k]);
      },
      1);

  std::unordered_map<std::int64_t, int> vertex_of;
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  for (int k = 0; k < nz; ++k)
    for (const auto& tri : slabs[k]) {
      std::array<int, 3> f{};
      for (int c = 0; c < 3; ++c) {
        auto [it, inserted] = vertex_of.try_emplace(tri[c], static_cast<int>(vertices.size()));
        if (inserted) {
          const auto center = centers[k].find(tri[c]);
          vertices.push_back(center != centers[k].end() ? center->second : ex.edge_point(tri[c]));
        }
        f[c] = it->second;
      }
      faces.push_back(f);
    }

  TemplateMesh mesh;
  mesh.vertices.resize(static_cast<Eigen::Index>(vertices.size()), 3);
  for (std::size_t i = 0; i < vertices.size(); ++i) mesh.vertices.row(i) = vertices[i].transpose();
  mesh.faces.resize(static_cast<Eigen::Index>(faces.size()), 3);
  for (std::size_t i = 0; i < faces.size(); ++i) mesh.faces.row(i) << faces[i][0], faces[i][1], faces[i][2];
  return mesh;
}

void color_vertices(TemplateMesh& mesh, const NeuralField& field) {
  mesh.vertex_colors = field.color(mesh.vertices).cwiseMax(0.0).cwiseMin(1.0);
}

void color_and_export(TemplateMesh& mesh, const NeuralField& field, const std::filesystem::path& path) {
  if (mesh.num_faces() == 0) throw std::invalid_argument("color_and_export: mesh is empty");
  color_vertices(mesh, field);
  write_mesh(mesh, path);
}

std::vector<TurntableView> render_turntable(const NeuralField& field, const TemplateMesh& posed, int n_views,
                                            int resolution, double radius, double fov_y, int steps) {
  if (n_views < 1) throw std::invalid_argument("render_turntable: need at least one view");
  if (resolution < 1) throw std::invalid_argument("render_turntable: resolution must be positive");
  std::vector<double> angles;
  for (int v = 0; v < n_views; ++v) angles.push_back(90.0 + 360.0 * v / n_views);
  const auto cameras = camera_ring(bounding_box(posed).center(), radius, angles, fov_y, resolution);
  RenderSettings settings;
  settings.steps = steps;
  const int tile = std::min(resolution, 32);
  std::vector<TurntableView> out;
  for (const Camera& cam : cameras) {
    TurntableView view{RgbImage(resolution, resolution), RgbImage(resolution, resolution),
                       std::vector<std::uint8_t>(static_cast<std::size_t>(resolution) * resolution, 0)};
    for (int y0 = 0; y0 < resolution; y0 += tile)
      for (int x0 = 0; x0 < resolution; x0 += tile) {
        const PatchRect rect{std::min(x0, resolution - tile), std::min(y0, resolution - tile), tile};
        const RenderedPatch p =
            render_patch(posed, *field.accel, *field.codebook, *field.decoders, cam, rect, settings);
        for (int y = 0; y < tile; ++y)
          for (int x = 0; x < tile; ++x) {
            const int src = y * tile + x;
            const std::size_t dst = static_cast<std::size_t>(rect.y0 + y) * resolution + rect.x0 + x;
            view.color.pixels[dst] = p.color.pixel(x, y).cast<float>();
            view.normal.pixels[dst] = p.normal.pixel(x, y).cast<float>();
            view.mask[dst] = p.color.mask[src];
          }
      }
    out.push_back(std::move(view));
  }
  return out;
}

std::vector<std::filesystem::path> write_turntable(const std::vector<TurntableView>& views,
                                                   const std::filesystem::path& dir, const std::string& prefix) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  for (std::size_t v = 0; v < views.size(); ++v) {
    const std::string stem = prefix + "_" + std::to_string(v);
    paths.push_back(dir / (stem + "_color.png"));
    write_png(views[v].color, paths.back());
    paths.push_back(dir / (stem + "_normal.png"));
    write_png(views[v].normal, paths.back());
  }
  return paths;
}

}  // namespace cbav
