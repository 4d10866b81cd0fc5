#include "cbav/templates.hpp"

#include "cbav/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <unordered_map>

namespace cbav {

namespace {

double capsule(const Vec3& p, const Vec3& a, const Vec3& b, double r) {
  const Vec3 pa = p - a;
  const Vec3 ba = b - a;
  const double h = std::clamp(pa.dot(ba) / ba.squaredNorm(), 0.0, 1.0);
  return (pa - ba * h).norm() - r;
}

double segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) { return capsule(p, a, b, 0.0); }

double smooth_min(double a, double b, double k) {
  const double h = std::max(k - std::abs(a - b), 0.0) / k;
  return std::min(a, b) - h * h * k * 0.25;
}

struct JointSpec {
  const char* name;
  Vec3 position;
  int parent;
};

const std::vector<JointSpec>& humanoid_joints() {
  static const std::vector<JointSpec> joints = {
      {"pelvis", {0.0, 0.0, 0.0}, -1},          {"spine", {0.0, 0.22, 0.0}, 0},
      {"neck", {0.0, 0.50, 0.0}, 1},            {"head", {0.0, 0.60, 0.0}, 2},
      {"left_shoulder", {0.17, 0.44, 0.0}, 1},  {"left_elbow", {0.44, 0.44, 0.0}, 4},
      {"left_wrist", {0.68, 0.44, 0.0}, 5},     {"right_shoulder", {-0.17, 0.44, 0.0}, 1},
      {"right_elbow", {-0.44, 0.44, 0.0}, 7},   {"right_wrist", {-0.68, 0.44, 0.0}, 8},
      {"left_hip", {0.10, -0.08, 0.0}, 0},      {"left_knee", {0.11, -0.47, 0.0}, 10},
      {"left_ankle", {0.12, -0.85, 0.0}, 11},   {"right_hip", {-0.10, -0.08, 0.0}, 0},
      {"right_knee", {-0.11, -0.47, 0.0}, 13},  {"right_ankle", {-0.12, -0.85, 0.0}, 14},
  };
  return joints;
}

// Segments owned by each joint: to every child, plus an end segment for leaves.
std::vector<std::vector<std::pair<Vec3, Vec3>>> humanoid_bones() {
  const auto& joints = humanoid_joints();
  std::vector<std::vector<std::pair<Vec3, Vec3>>> bones(joints.size());
  for (std::size_t j = 0; j < joints.size(); ++j)
    if (joints[j].parent >= 0)
      bones[joints[j].parent].emplace_back(joints[joints[j].parent].position, joints[j].position);
  bones[3].emplace_back(joints[3].position, Vec3(0.0, 0.74, 0.0));
  bones[6].emplace_back(joints[6].position, Vec3(0.80, 0.44, 0.0));
  bones[9].emplace_back(joints[9].position, Vec3(-0.80, 0.44, 0.0));
  bones[12].emplace_back(joints[12].position, Vec3(0.12, -0.89, 0.10));
  bones[15].emplace_back(joints[15].position, Vec3(-0.12, -0.89, 0.10));
  return bones;
}

}  // namespace

TemplateMesh make_icosphere(int subdivisions, double radius, const Vec3& center) {
  if (subdivisions < 0) throw std::invalid_argument("subdivisions must be non-negative");
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> verts = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                             {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (auto& v : verts) v.normalize();
  std::vector<Eigen::Vector3i> tris = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                                       {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                                       {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                                       {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> midpoints;
    auto midpoint = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      const auto it = midpoints.find(key);
      if (it != midpoints.end()) return it->second;
      verts.push_back((verts[a] + verts[b]).normalized());
      const int index = static_cast<int>(verts.size()) - 1;
      midpoints.emplace(key, index);
      return index;
    };
    std::vector<Eigen::Vector3i> next;
    next.reserve(tris.size() * 4);
    for (const auto& tri : tris) {
      const int a = midpoint(tri[0], tri[1]);
      const int b = midpoint(tri[1], tri[2]);
      const int c = midpoint(tri[2], tri[0]);
      next.emplace_back(tri[0], a, c);
      next.emplace_back(tri[1], b, a);
      next.emplace_back(tri[2], c, b);
      next.emplace_back(a, b, c);
    }
    tris = std::move(next);
  }

  TemplateMesh mesh;
  mesh.vertices.resize(static_cast<Eigen::Index>(verts.size()), 3);
  for (std::size_t i = 0; i < verts.size(); ++i) mesh.vertices.row(i) = (center + radius * verts[i]).transpose();
  mesh.faces.resize(static_cast<Eigen::Index>(tris.size()), 3);
  for (std::size_t i = 0; i < tris.size(); ++i) mesh.faces.row(i) = tris[i].transpose();
  mesh.joints = center.transpose();
  mesh.parents = {-1};
  mesh.skinning_weights = Eigen::MatrixXd::Ones(mesh.num_vertices(), 1);
  return mesh;
}

double humanoid_implicit(const Vec3& x) {
  // Torso is a capsule squashed front to back.
  const Vec3 torso_p(x.x(), x.y(), x.z() / 0.65);
  double d = 0.65 * capsule(torso_p, {0.0, 0.02, 0.0}, {0.0, 0.38, 0.0}, 0.14);
  constexpr double k = 0.05;
  d = smooth_min(d, capsule(x, {0.0, 0.40, 0.0}, {0.0, 0.56, 0.0}, 0.055), k);
  d = smooth_min(d, (x - Vec3(0.0, 0.66, 0.01)).norm() - 0.105, 0.03);
  for (double side : {1.0, -1.0}) {
    d = smooth_min(d, capsule(x, {side * 0.15, 0.44, 0.0}, {side * 0.44, 0.44, 0.0}, 0.056), k);
    d = smooth_min(d, capsule(x, {side * 0.44, 0.44, 0.0}, {side * 0.68, 0.44, 0.0}, 0.05), 0.03);
    d = smooth_min(d, capsule(x, {side * 0.68, 0.44, 0.0}, {side * 0.79, 0.44, 0.0}, 0.045), 0.02);
    d = smooth_min(d, capsule(x, {side * 0.10, -0.06, 0.0}, {side * 0.11, -0.47, 0.0}, 0.08), k);
    d = smooth_min(d, capsule(x, {side * 0.11, -0.47, 0.0}, {side * 0.12, -0.85, 0.0}, 0.06), 0.03);
    d = smooth_min(d, capsule(x, {side * 0.12, -0.86, 0.0}, {side * 0.12, -0.88, 0.10}, 0.048), 0.03);
  }
  return d;
}

const std::vector<std::string>& humanoid_joint_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& j : humanoid_joints()) out.emplace_back(j.name);
    return out;
  }();
  return names;
}

TemplateMesh surface_nets(const std::function<double(const Vec3&)>& field, const Eigen::AlignedBox3d& box,
                          double spacing) {
  if (!(spacing > 0.0)) throw std::invalid_argument("surface_nets: spacing must be positive");
  const Vec3 origin = box.min();
  const Eigen::Vector3i n = ((box.max() - box.min()) / spacing).array().ceil().cast<int>() + 1;
  auto lattice = [&](int i, int j, int k) { return (k * n.y() + j) * n.x() + i; };
  std::vector<double> values(static_cast<std::size_t>(n.prod()));
  for (int k = 0; k < n.z(); ++k)
    for (int j = 0; j < n.y(); ++j)
      for (int i = 0; i < n.x(); ++i) values[lattice(i, j, k)] = field(origin + spacing * Vec3(i, j, k));

  auto cell = [&](int i, int j, int k) { return (k * (n.y() - 1) + j) * (n.x() - 1) + i; };
  std::unordered_map<int, int> cell_vertex;
  std::vector<Vec3> verts;
  static const int corner_offsets[8][3] = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0},
                                           {0, 0, 1}, {1, 0, 1}, {0, 1, 1}, {1, 1, 1}};
  static const int cube_edges[12][2] = {{0, 1}, {2, 3}, {4, 5}, {6, 7}, {0, 2}, {1, 3},
                                        {4, 6}, {5, 7}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};
  for (int k = 0; k + 1 < n.z(); ++k)
    for (int j = 0; j + 1 < n.y(); ++j)
      for (int i = 0; i + 1 < n.x(); ++i) {
        double v[8];
        for (int c = 0; c < 8; ++c)
          v[c] = values[lattice(i + corner_offsets[c][0], j + corner_offsets[c][1], k + corner_offsets[c][2])];
        Vec3 sum = Vec3::Zero();
        int crossings = 0;
        for (const auto& e : cube_edges) {
          const double a = v[e[0]];
          const double b = v[e[1]];
          if ((a < 0.0) == (b < 0.0)) continue;
          const double t = a / (a - b);
          const Vec3 pa(corner_offsets[e[0]][0], corner_offsets[e[0]][1], corner_offsets[e[0]][2]);
          const Vec3 pb(corner_offsets[e[1]][0], corner_offsets[e[1]][1], corner_offsets[e[1]][2]);
          sum += pa + t * (pb - pa);
          ++crossings;
        }
        if (crossings == 0) continue;
        cell_vertex.emplace(cell(i, j, k), static_cast<int>(verts.size()));
        verts.push_back(origin + spacing * (Vec3(i, j, k) + sum / crossings));
      }

  std::vector<Eigen::Vector4i> quads;
  for (int k = 1; k + 1 < n.z(); ++k)
    for (int j = 1; j + 1 < n.y(); ++j)
      for (int i = 1; i + 1 < n.x(); ++i) {
        const double v0 = values[lattice(i, j, k)];
        for (int axis = 0; axis < 3; ++axis) {
          int di[3] = {0, 0, 0};
          di[axis] = 1;
          const double v1 = values[lattice(i + di[0], j + di[1], k + di[2])];
          if ((v0 < 0.0) == (v1 < 0.0)) continue;
          const int b = (axis + 1) % 3;
          const int c = (axis + 2) % 3;
          int quad[4];
          static const int deltas[4][2] = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
          for (int q = 0; q < 4; ++q) {
            int idx[3] = {i, j, k};
            idx[b] -= deltas[q][0];
            idx[c] -= deltas[q][1];
            quad[q] = cell_vertex.at(cell(idx[0], idx[1], idx[2]));
          }
          if (v0 < 0.0)
            quads.emplace_back(quad[0], quad[1], quad[2], quad[3]);
          else
            quads.emplace_back(quad[3], quad[2], quad[1], quad[0]);
        }
      }

  std::vector<std::vector<int>> neighbors(verts.size());
  for (const auto& q : quads)
    for (int e = 0; e < 4; ++e) {
      const int a = q[e];
      const int b = q[(e + 1) % 4];
      if (std::find(neighbors[a].begin(), neighbors[a].end(), b) == neighbors[a].end()) neighbors[a].push_back(b);
      if (std::find(neighbors[b].begin(), neighbors[b].end(), a) == neighbors[b].end()) neighbors[b].push_back(a);
    }

  auto project = [&](Vec3 p) {
    constexpr double h = 1e-5;
    for (int it = 0; it < 4; ++it) {
      const double f = field(p);
      Vec3 g;
      for (int a = 0; a < 3; ++a) {
        Vec3 e = Vec3::Zero();
        e[a] = h;
        g[a] = (field(p + e) - field(p - e)) / (2 * h);
      }
      if (g.squaredNorm() < 1e-12) break;
      p -= f * g / g.squaredNorm();
    }
    return p;
  };
  for (int it = 0; it < 10; ++it) {
    std::vector<Vec3> next(verts.size());
    for (std::size_t v = 0; v < verts.size(); ++v) {
      Vec3 avg = Vec3::Zero();
      for (int nb : neighbors[v]) avg += verts[nb];
      avg /= static_cast<double>(neighbors[v].size());
      next[v] = project(verts[v] + 0.5 * (avg - verts[v]));
    }
    verts = std::move(next);
  }

  TemplateMesh mesh;
  mesh.vertices.resize(static_cast<Eigen::Index>(verts.size()), 3);
  for (std::size_t v = 0; v < verts.size(); ++v) mesh.vertices.row(v) = verts[v].transpose();
  mesh.faces.resize(static_cast<Eigen::Index>(quads.size() * 2), 3);
  for (std::size_t q = 0; q < quads.size(); ++q) {
    const auto& quad = quads[q];
    if ((verts[quad[0]] - verts[quad[2]]).norm() <= (verts[quad[1]] - verts[quad[3]]).norm()) {
      mesh.faces.row(2 * q) << quad[0], quad[1], quad[2];
      mesh.faces.row(2 * q + 1) << quad[0], quad[2], quad[3];
    } else {
      mesh.faces.row(2 * q) << quad[0], quad[1], quad[3];
      mesh.faces.row(2 * q + 1) << quad[1], quad[2], quad[3];
    }
  }
  return mesh;
}

TemplateMesh make_humanoid(double grid_spacing) {
  const Eigen::AlignedBox3d box(Vec3(-0.92, -1.02, -0.25), Vec3(0.92, 0.86, 0.28));
  TemplateMesh mesh = surface_nets(humanoid_implicit, box, grid_spacing);
  if (!is_watertight(mesh)) throw std::logic_error("humanoid polygonization is not watertight");

  const auto& joints = humanoid_joints();
  const int num_joints = static_cast<int>(joints.size());
  mesh.joints.resize(num_joints, 3);
  mesh.parents.resize(num_joints);
  for (int j = 0; j < num_joints; ++j) {
    mesh.joints.row(j) = joints[j].position.transpose();
    mesh.parents[j] = joints[j].parent;
  }

  const auto bones = humanoid_bones();
  const int m = mesh.num_vertices();
  mesh.skinning_weights = Eigen::MatrixXd::Zero(m, num_joints);
  for (int v = 0; v < m; ++v) {
    const Vec3 p = mesh.vertex(v);
    std::vector<std::pair<double, int>> scored;
    for (int j = 0; j < num_joints; ++j) {
      double dist = std::numeric_limits<double>::infinity();
      for (const auto& [a, b] : bones[j]) dist = std::min(dist, segment_distance(p, a, b));
      scored.emplace_back(dist, j);
    }
    std::sort(scored.begin(), scored.end());
    double total = 0.0;
    for (int r = 0; r < 3; ++r) {
      const double w = 1.0 / std::pow(scored[r].first + 0.01, 8);
      mesh.skinning_weights(v, scored[r].second) = w;
      total += w;
    }
    mesh.skinning_weights.row(v) /= total;
  }

  const Points normals = vertex_normals(mesh);
  Points girth = 0.02 * normals;
  Points height = Points::Zero(m, 3);
  height.col(1) = 0.05 * mesh.vertices.col(1);
  mesh.blendshapes = {girth, height};
  Points joint_height = Points::Zero(num_joints, 3);
  joint_height.col(1) = 0.05 * mesh.joints.col(1);
  mesh.joint_blendshapes = {Points::Zero(num_joints, 3), joint_height};
  validate(mesh);
  return mesh;
}

TemplateMesh make_template(const std::string& name) {
  if (name == "humanoid") return make_humanoid();
  if (name == "icosphere") return make_icosphere(3, 0.5);
  throw ConfigError("unknown template '" + name + "' (expected humanoid or icosphere)");
}

}  // namespace cbav
