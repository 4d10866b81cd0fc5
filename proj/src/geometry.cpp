#include "cbav/geometry.hpp"

#include "cbav/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace cbav {

namespace {

std::uint64_t edge_key(int a, int b) {
  const auto lo = static_cast<std::uint64_t>(std::min(a, b));
  const auto hi = static_cast<std::uint64_t>(std::max(a, b));
  return (hi << 32) | lo;
}

std::uint64_t directed_key(int a, int b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

class Fnv1a {
 public:
  void bytes(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      hash_ ^= p[i];
      hash_ *= 1099511628211ull;
    }
  }
  template <typename Derived>
  void matrix(const Eigen::DenseBase<Derived>& m) {
    const auto rows = static_cast<std::int64_t>(m.rows());
    const auto cols = static_cast<std::int64_t>(m.cols());
    bytes(&rows, sizeof(rows));
    bytes(&cols, sizeof(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const auto v = m(i, j);
        bytes(&v, sizeof(v));
      }
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 1469598103934665603ull;
};

double corner_angle(const Vec3& at, const Vec3& p, const Vec3& q) {
  const Vec3 e1 = p - at;
  const Vec3 e2 = q - at;
  return std::atan2(e1.cross(e2).norm(), e1.dot(e2));
}

}  // namespace

void validate(const TemplateMesh& mesh) {
  const int m = mesh.num_vertices();
  if (m == 0) throw DataError("mesh has no vertices");
  if (mesh.faces.size() > 0 && (mesh.faces.minCoeff() < 0 || mesh.faces.maxCoeff() >= m))
    throw DataError("face index out of range");
  if (!mesh.vertices.allFinite()) throw DataError("non-finite vertex coordinates");
  if (mesh.vertex_colors.rows() != 0 && mesh.vertex_colors.rows() != m)
    throw DataError("vertex color count does not match vertex count");
  const int j = mesh.num_joints();
  if (j > 0) {
    if (static_cast<int>(mesh.parents.size()) != j) throw DataError("parent array size mismatch");
    for (int i = 0; i < j; ++i)
      if (mesh.parents[i] >= i || (mesh.parents[i] < 0 && i != 0))
        throw DataError("kinematic tree must be topologically ordered with root 0");
    if (mesh.skinning_weights.rows() != m || mesh.skinning_weights.cols() != j)
      throw DataError("skinning weights must be M x J");
    if (mesh.skinning_weights.minCoeff() < 0.0) throw DataError("negative skinning weight");
    const Eigen::VectorXd sums = mesh.skinning_weights.rowwise().sum();
    if ((sums.array() - 1.0).abs().maxCoeff() > 1e-6)
      throw DataError("skinning weight rows must sum to one");
  }
  for (const auto& b : mesh.blendshapes)
    if (b.rows() != m) throw DataError("blendshape row count mismatch");
  if (!mesh.joint_blendshapes.empty()) {
    if (mesh.joint_blendshapes.size() != mesh.blendshapes.size())
      throw DataError("joint blendshape count mismatch");
    for (const auto& b : mesh.joint_blendshapes)
      if (b.rows() != j) throw DataError("joint blendshape row count mismatch");
  }
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t hash) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= p[i];
    hash *= 1099511628211ull;
  }
  return hash;
}

std::uint64_t template_hash(const TemplateMesh& mesh) {
  Fnv1a h;
  h.matrix(mesh.vertices);
  h.matrix(mesh.faces);
  h.matrix(mesh.joints);
  for (int p : mesh.parents) h.bytes(&p, sizeof(p));
  h.matrix(mesh.skinning_weights);
  for (const auto& b : mesh.blendshapes) h.matrix(b);
  for (const auto& b : mesh.joint_blendshapes) h.matrix(b);
  return h.value();
}

Eigen::AlignedBox3d bounding_box(const TemplateMesh& mesh) {
  Eigen::AlignedBox3d box;
  for (int i = 0; i < mesh.num_vertices(); ++i) box.extend(mesh.vertex(i));
  return box;
}

double bbox_diagonal(const TemplateMesh& mesh) { return bounding_box(mesh).diagonal().norm(); }

bool is_watertight(const TemplateMesh& mesh) {
  if (mesh.num_faces() == 0) return false;
  std::unordered_map<std::uint64_t, int> directed;
  directed.reserve(static_cast<std::size_t>(mesh.num_faces()) * 3);
  for (int f = 0; f < mesh.num_faces(); ++f)
    for (int k = 0; k < 3; ++k) {
      const int a = mesh.faces(f, k);
      const int b = mesh.faces(f, (k + 1) % 3);
      if (a == b) return false;
      if (++directed[directed_key(a, b)] > 1) return false;
    }
  for (const auto& [key, count] : directed) {
    const int a = static_cast<int>(key >> 32);
    const int b = static_cast<int>(key & 0xffffffffu);
    if (directed.find(directed_key(b, a)) == directed.end()) return false;
  }
  return true;
}

PoseParams PoseParams::identity(const TemplateMesh& mesh) {
  PoseParams pose;
  pose.joint_rotations = Points::Zero(mesh.num_joints(), 3);
  pose.shape_coeffs = Eigen::VectorXd::Zero(mesh.num_shapes());
  return pose;
}

bool PoseParams::operator==(const PoseParams& other) const {
  return joint_rotations.rows() == other.joint_rotations.rows() &&
         joint_rotations == other.joint_rotations &&
         shape_coeffs.size() == other.shape_coeffs.size() && shape_coeffs == other.shape_coeffs &&
         root_translation == other.root_translation;
}

Mat3 axis_angle_to_matrix(const Vec3& axis_angle) {
  const double angle = axis_angle.norm();
  if (!std::isfinite(angle)) throw std::invalid_argument("non-finite axis-angle rotation");
  if (angle < 1e-300) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, axis_angle / angle).toRotationMatrix();
}

TemplateMesh skin(const TemplateMesh& mesh, const PoseParams& pose) {
  const int num_joints = mesh.num_joints();
  if (pose.joint_rotations.rows() != num_joints)
    throw std::invalid_argument("pose joint count does not match the mesh");
  if (pose.shape_coeffs.size() != 0 && pose.shape_coeffs.size() != mesh.num_shapes())
    throw std::invalid_argument("pose shape coefficient count does not match the mesh blendshapes");
  if (!pose.root_translation.allFinite()) throw std::invalid_argument("non-finite root translation");

  TemplateMesh out = mesh;
  Points shaped = mesh.vertices;
  Points joints = mesh.joints;
  for (Eigen::Index k = 0; k < pose.shape_coeffs.size(); ++k) {
    shaped += pose.shape_coeffs[k] * mesh.blendshapes[k];
    if (!mesh.joint_blendshapes.empty()) joints += pose.shape_coeffs[k] * mesh.joint_blendshapes[k];
  }

  if (num_joints == 0) {
    out.vertices = shaped.rowwise() + pose.root_translation.transpose();
    return out;
  }

  std::vector<Eigen::Isometry3d> global(num_joints);
  std::vector<Eigen::Matrix<double, 3, 4>> skinning(num_joints);
  for (int j = 0; j < num_joints; ++j) {
    const int parent = mesh.parents[j];
    const Vec3 offset = parent < 0 ? Vec3(joints.row(j)) : Vec3(joints.row(j) - joints.row(parent));
    Eigen::Isometry3d local = Eigen::Isometry3d::Identity();
    local.linear() = axis_angle_to_matrix(pose.joint_rotations.row(j).transpose());
    local.translation() = offset;
    global[j] = parent < 0 ? local : global[parent] * local;
    Eigen::Isometry3d rel = global[j] * Eigen::Translation3d(-Vec3(joints.row(j)));
    skinning[j] = rel.matrix().topRows<3>();
  }

  for (int i = 0; i < mesh.num_vertices(); ++i) {
    Eigen::Matrix<double, 3, 4> blended = Eigen::Matrix<double, 3, 4>::Zero();
    for (int j = 0; j < num_joints; ++j) {
      const double w = mesh.skinning_weights(i, j);
      if (w != 0.0) blended += w * skinning[j];
    }
    const Vec3 v = shaped.row(i).transpose();
    out.vertices.row(i) = (blended.leftCols<3>() * v + blended.col(3) + pose.root_translation).transpose();
  }
  for (int j = 0; j < num_joints; ++j)
    out.joints.row(j) = (global[j].translation() + pose.root_translation).transpose();
  return out;
}

Mat3 Camera::basis() const {
  const Vec3 forward = (look_at - position).normalized();
  const Vec3 right = forward.cross(up).normalized();
  const Vec3 true_up = right.cross(forward);
  Mat3 b;
  b.row(0) = right.transpose();
  b.row(1) = true_up.transpose();
  b.row(2) = forward.transpose();
  return b;
}

Vec3 Camera::pixel_ray(double px, double py) const {
  const Mat3 b = basis();
  const double tan_half = std::tan(0.5 * fov_y);
  const double aspect = static_cast<double>(width) / height;
  const double sx = (2.0 * px / width - 1.0) * tan_half * aspect;
  const double sy = (1.0 - 2.0 * py / height) * tan_half;
  return (b.row(2).transpose() + sx * b.row(0).transpose() + sy * b.row(1).transpose()).normalized();
}

Vec3 Camera::project(const Vec3& world) const {
  const Mat3 b = basis();
  const Vec3 view = b * (world - position);
  const double tan_half = std::tan(0.5 * fov_y);
  const double aspect = static_cast<double>(width) / height;
  const double px = (view.x() / view.z() / (tan_half * aspect) + 1.0) * 0.5 * width;
  const double py = (1.0 - view.y() / view.z() / tan_half) * 0.5 * height;
  return {px, py, view.z()};
}

void validate(const Camera& camera) {
  if (!(camera.fov_y > 0.0 && camera.fov_y < M_PI)) throw std::invalid_argument("camera fov_y must lie in (0, pi)");
  if (camera.width <= 0 || camera.height <= 0) throw std::invalid_argument("camera resolution must be positive");
  const Vec3 forward = camera.look_at - camera.position;
  if (forward.norm() == 0.0) throw std::invalid_argument("camera position coincides with look_at");
  if (forward.normalized().cross(camera.up).norm() < 1e-12)
    throw std::invalid_argument("camera up vector is parallel to the view direction");
}

AccelStructure::AccelStructure(const TemplateMesh& mesh) : vertices_(mesh.vertices), faces_(mesh.faces) {
  const int nf = mesh.num_faces();
  if (nf == 0) throw std::invalid_argument("cannot build an accelerator over an empty mesh");
  if (faces_.minCoeff() < 0 || faces_.maxCoeff() >= mesh.num_vertices())
    throw std::invalid_argument("face index out of range");

  face_normals_ = Points::Zero(nf, 3);
  face_areas_.assign(nf, 0.0);
  vertex_normals_ = Points::Zero(mesh.num_vertices(), 3);
  std::vector<Eigen::AlignedBox3d> boxes(nf);
  Points centroids(nf, 3);
  for (int f = 0; f < nf; ++f) {
    const Vec3 a = vertex(faces_(f, 0));
    const Vec3 b = vertex(faces_(f, 1));
    const Vec3 c = vertex(faces_(f, 2));
    const Vec3 n = (b - a).cross(c - a);
    const double len = n.norm();
    face_areas_[f] = 0.5 * len;
    if (len > 0.0) face_normals_.row(f) = (n / len).transpose();
    boxes[f].extend(a);
    boxes[f].extend(b);
    boxes[f].extend(c);
    centroids.row(f) = ((a + b + c) / 3.0).transpose();

    const Vec3 fn = face_normals_.row(f).transpose();
    vertex_normals_.row(faces_(f, 0)) += corner_angle(a, b, c) * fn.transpose();
    vertex_normals_.row(faces_(f, 1)) += corner_angle(b, c, a) * fn.transpose();
    vertex_normals_.row(faces_(f, 2)) += corner_angle(c, a, b) * fn.transpose();
    for (int k = 0; k < 3; ++k) {
      auto [it, inserted] = edge_normals_.try_emplace(edge_key(faces_(f, k), faces_(f, (k + 1) % 3)), Vec3::Zero());
      it->second += fn;
    }
  }
  for (int v = 0; v < vertex_normals_.rows(); ++v) {
    const double len = vertex_normals_.row(v).norm();
    if (len > 0.0) vertex_normals_.row(v) /= len;
  }
  for (auto& [key, n] : edge_normals_) {
    const double len = n.norm();
    if (len > 0.0) n /= len;
  }

  face_order_.resize(nf);
  std::iota(face_order_.begin(), face_order_.end(), 0);
  nodes_.reserve(2 * static_cast<std::size_t>(nf));
  build_node(face_order_, 0, nf, boxes, centroids);
}

int AccelStructure::build_node(std::vector<int>& order, int begin, int end,
                               const std::vector<Eigen::AlignedBox3d>& boxes, const Points& centroids) {
  const int index = static_cast<int>(nodes_.size());
  nodes_.emplace_back();
  Eigen::AlignedBox3d box;
  Eigen::AlignedBox3d centroid_box;
  for (int i = begin; i < end; ++i) {
    box.extend(boxes[order[i]]);
    centroid_box.extend(Vec3(centroids.row(order[i])));
  }
  nodes_[index].box = box;
  constexpr int kLeafSize = 4;
  if (end - begin <= kLeafSize) {
    nodes_[index].first = begin;
    nodes_[index].count = end - begin;
    return index;
  }
  int axis = 0;
  centroid_box.diagonal().maxCoeff(&axis);
  const int mid = begin + (end - begin) / 2;
  std::nth_element(order.begin() + begin, order.begin() + mid, order.begin() + end, [&](int a, int b) {
    const double ca = centroids(a, axis);
    const double cb = centroids(b, axis);
    return ca < cb || (ca == cb && a < b);
  });
  const int left = build_node(order, begin, mid, boxes, centroids);
  const int right = build_node(order, mid, end, boxes, centroids);
  nodes_[index].left = left;
  nodes_[index].right = right;
  return index;
}

Vec3 AccelStructure::edge_pseudo_normal(int a, int b) const {
  const auto it = edge_normals_.find(edge_key(a, b));
  if (it == edge_normals_.end()) throw std::invalid_argument("edge does not belong to the mesh");
  return it->second;
}

std::pair<double, Vec3> AccelStructure::face_query(int f, const Vec3& x) const {
  const Vec3 a = vertex(faces_(f, 0));
  const Vec3 b = vertex(faces_(f, 1));
  const Vec3 c = vertex(faces_(f, 2));
  const Vec3 w = closest_point_on_triangle<double>(x, a, b, c);
  const Vec3 p = w[0] * a + w[1] * b + w[2] * c;
  return {(x - p).squaredNorm(), w};
}

AccelStructure build_bvh(const TemplateMesh& mesh) { return AccelStructure(mesh); }

ClosestPoint closest_point(const AccelStructure& accel, const Vec3& x) {
  if (!x.allFinite()) throw std::invalid_argument("closest_point: non-finite query");
  if (accel.nodes_.empty()) throw std::invalid_argument("closest_point: empty accelerator");
  double best = std::numeric_limits<double>::infinity();
  int best_face = -1;
  Vec3 best_w = Vec3::Zero();

  std::array<int, 128> stack{};
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const auto& node = accel.nodes_[stack[--top]];
    if (node.box.squaredExteriorDistance(x) > best) continue;
    if (node.leaf()) {
      for (int i = node.first; i < node.first + node.count; ++i) {
        const int f = accel.face_order_[i];
        const auto [d2, w] = accel.face_query(f, x);
        if (d2 < best || (d2 == best && f < best_face)) {
          best = d2;
          best_face = f;
          best_w = w;
        }
      }
      continue;
    }
    const double dl = accel.nodes_[node.left].box.squaredExteriorDistance(x);
    const double dr = accel.nodes_[node.right].box.squaredExteriorDistance(x);
    if (dl <= dr) {
      stack[top++] = node.right;
      stack[top++] = node.left;
    } else {
      stack[top++] = node.left;
      stack[top++] = node.right;
    }
  }

  ClosestPoint cp;
  cp.face = best_face;
  cp.bary = Vec2(best_w[0], best_w[1]);
  const Vec3 a = accel.vertex(accel.faces_(best_face, 0));
  const Vec3 b = accel.vertex(accel.faces_(best_face, 1));
  const Vec3 c = accel.vertex(accel.faces_(best_face, 2));
  cp.point = best_w[0] * a + best_w[1] * b + best_w[2] * c;
  cp.distance = std::sqrt(best);
  return cp;
}

Vec3 pseudo_normal(const AccelStructure& accel, const ClosestPoint& cp) {
  if (cp.face < 0 || cp.face >= accel.num_faces()) throw std::invalid_argument("pseudo_normal: invalid face");
  if (accel.face_area(cp.face) <= 0.0) throw std::invalid_argument("pseudo_normal: zero-area face");
  constexpr double kZero = 1e-12;
  const std::array<double, 3> w = {cp.bary[0], cp.bary[1], 1.0 - cp.bary[0] - cp.bary[1]};
  std::array<int, 3> nonzero{};
  int count = 0;
  for (int k = 0; k < 3; ++k)
    if (w[k] > kZero) nonzero[count++] = k;
  const auto& faces = accel.faces();
  if (count == 1) return accel.vertex_pseudo_normal(faces(cp.face, nonzero[0]));
  if (count == 2) return accel.edge_pseudo_normal(faces(cp.face, nonzero[0]), faces(cp.face, nonzero[1]));
  return accel.face_normal(cp.face);
}

LocalQuery local_coords(const AccelStructure& accel, const ClosestPoint& cp, const Vec3& x) {
  LocalQuery q;
  q.face = cp.face;
  const Vec3 diff = x - cp.point;
  const double dist = diff.norm();
  const Vec3 n = pseudo_normal(accel, cp);
  const double sign = diff.dot(n) < 0.0 ? -1.0 : 1.0;
  q.uvd = Vec3(cp.bary[0], cp.bary[1], sign * dist);
  q.dir = dist > kDegenerateDistance ? Vec3(diff / dist) : n;
  return q;
}

Mat3 face_frame(const AccelStructure& accel, int face) {
  const auto& faces = accel.faces();
  const Vec3 a = accel.vertex(faces(face, 0));
  const Vec3 b = accel.vertex(faces(face, 1));
  const Vec3 n = accel.face_normal(face);
  const Vec3 t = (b - a).normalized();
  Mat3 frame;
  frame.row(0) = t.transpose();
  frame.row(1) = n.cross(t).transpose();
  frame.row(2) = n.transpose();
  return frame;
}

Points vertex_normals(const TemplateMesh& mesh) {
  Points normals = Points::Zero(mesh.num_vertices(), 3);
  for (int f = 0; f < mesh.num_faces(); ++f) {
    const Vec3 a = mesh.vertex(mesh.faces(f, 0));
    const Vec3 b = mesh.vertex(mesh.faces(f, 1));
    const Vec3 c = mesh.vertex(mesh.faces(f, 2));
    const Vec3 n = (b - a).cross(c - a);
    if (n.norm() == 0.0) continue;
    const Vec3 fn = n.normalized();
    normals.row(mesh.faces(f, 0)) += corner_angle(a, b, c) * fn.transpose();
    normals.row(mesh.faces(f, 1)) += corner_angle(b, c, a) * fn.transpose();
    normals.row(mesh.faces(f, 2)) += corner_angle(c, a, b) * fn.transpose();
  }
  for (int v = 0; v < normals.rows(); ++v) {
    const double len = normals.row(v).norm();
    if (len > 0.0) normals.row(v) /= len;
  }
  return normals;
}

}  // namespace cbav
