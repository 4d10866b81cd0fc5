#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cstdint>
#include <limits>
#include <unordered_map>
#include <vector>

namespace cbav {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Faces = Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor>;

// Triangle mesh with an optional skeleton. Free meshes (scans, extracted
// surfaces) leave joints and skinning weights empty.
struct TemplateMesh {
  Points vertices;
  Faces faces;
  Points joints;
  std::vector<int> parents;          // parents[j] < j, -1 for the root
  Eigen::MatrixXd skinning_weights;  // M x J, rows sum to one
  std::vector<Points> blendshapes;   // K offsets, each M x 3
  std::vector<Points> joint_blendshapes;  // K offsets, each J x 3 (may be empty)
  Points vertex_colors;              // empty or M x 3 in [0, 1]

  int num_vertices() const { return static_cast<int>(vertices.rows()); }
  int num_faces() const { return static_cast<int>(faces.rows()); }
  int num_joints() const { return static_cast<int>(joints.rows()); }
  int num_shapes() const { return static_cast<int>(blendshapes.size()); }
  bool has_colors() const { return vertex_colors.rows() == vertices.rows() && vertices.rows() > 0; }
  Vec3 vertex(int i) const { return vertices.row(i).transpose(); }
};

// Throws DataError when face indices, skinning weights or blendshape shapes
// are inconsistent.
void validate(const TemplateMesh& mesh);

// FNV-1a over topology, rest vertices, joints and weights.
std::uint64_t template_hash(const TemplateMesh& mesh);
// FNV-1a of raw bytes, continuing from `hash`.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t hash = 1469598103934665603ull);

Eigen::AlignedBox3d bounding_box(const TemplateMesh& mesh);
double bbox_diagonal(const TemplateMesh& mesh);

// Every directed edge appears once and its reverse appears once.
bool is_watertight(const TemplateMesh& mesh);

struct PoseParams {
  Points joint_rotations;    // J x 3 axis-angle, radians
  Eigen::VectorXd shape_coeffs;  // K
  Vec3 root_translation = Vec3::Zero();

  static PoseParams identity(const TemplateMesh& mesh);
  bool operator==(const PoseParams& other) const;
};

Mat3 axis_angle_to_matrix(const Vec3& axis_angle);

// Shape blendshapes followed by linear blend skinning over the kinematic tree,
// plus the root translation. Joints are posed with the same transforms.
TemplateMesh skin(const TemplateMesh& mesh, const PoseParams& pose);

struct ClosestPoint {
  int face = -1;
  Vec2 bary = Vec2::Zero();  // weights of m0, m1; m2 gets 1 - u - v
  Vec3 point = Vec3::Zero();
  double distance = 0.0;
};

struct LocalQuery {
  int face = -1;
  Vec3 uvd = Vec3::Zero();
  Vec3 dir = Vec3::UnitZ();
};

struct Camera {
  Vec3 position = Vec3(0, 0, 2);
  Vec3 look_at = Vec3::Zero();
  Vec3 up = Vec3::UnitY();
  double fov_y = 0.9;
  int width = 256;
  int height = 256;

  // Rows: right, true up, forward.
  Mat3 basis() const;
  // Unit direction through the center of pixel (px, py); row 0 is the top.
  Vec3 pixel_ray(double px, double py) const;
  // Image-plane coordinates (pixels) and view depth of a world point.
  Vec3 project(const Vec3& world) const;
};

void validate(const Camera& camera);

// Closest point on triangle (a, b, c). Returns barycentric weights of a, b, c;
// clamped regions produce exact zeros.
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 1> closest_point_on_triangle(const Eigen::Matrix<Scalar, 3, 1>& p,
                                                      const Eigen::Matrix<Scalar, 3, 1>& a,
                                                      const Eigen::Matrix<Scalar, 3, 1>& b,
                                                      const Eigen::Matrix<Scalar, 3, 1>& c) {
  using V = Eigen::Matrix<Scalar, 3, 1>;
  const V ab = b - a;
  const V ac = c - a;
  const V ap = p - a;
  const Scalar d1 = ab.dot(ap);
  const Scalar d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) return V(1, 0, 0);

  const V bp = p - b;
  const Scalar d3 = ab.dot(bp);
  const Scalar d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) return V(0, 1, 0);

  const Scalar vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) {
    const Scalar v = d1 / (d1 - d3);
    return V(1 - v, v, 0);
  }

  const V cp = p - c;
  const Scalar d5 = ab.dot(cp);
  const Scalar d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) return V(0, 0, 1);

  const Scalar vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) {
    const Scalar w = d2 / (d2 - d6);
    return V(1 - w, 0, w);
  }

  const Scalar va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {
    const Scalar w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return V(0, 1 - w, w);
  }

  const Scalar denom = Scalar(1) / (va + vb + vc);
  const Scalar v = vb * denom;
  const Scalar w = vc * denom;
  return V(1 - v - w, v, w);
}

// Bounding-volume hierarchy over a mesh plus the normals needed for signed
// queries. Immutable after construction; queries are safe concurrently.
class AccelStructure {
 public:
  struct Node {
    Eigen::AlignedBox3d box;
    int left = -1;
    int right = -1;
    int first = 0;
    int count = 0;
    bool leaf() const { return left < 0; }
  };

  AccelStructure() = default;
  explicit AccelStructure(const TemplateMesh& mesh);

  const Points& vertices() const { return vertices_; }
  const Faces& faces() const { return faces_; }
  const std::vector<Node>& nodes() const { return nodes_; }
  int num_faces() const { return static_cast<int>(faces_.rows()); }

  Vec3 vertex(int i) const { return vertices_.row(i).transpose(); }
  Vec3 face_normal(int f) const { return face_normals_.row(f).transpose(); }
  double face_area(int f) const { return face_areas_[f]; }
  Vec3 vertex_pseudo_normal(int v) const { return vertex_normals_.row(v).transpose(); }
  Vec3 edge_pseudo_normal(int a, int b) const;
  // Distance-squared and barycentrics of x against one face.
  std::pair<double, Vec3> face_query(int f, const Vec3& x) const;

 private:
  int build_node(std::vector<int>& order, int begin, int end,
                 const std::vector<Eigen::AlignedBox3d>& boxes, const Points& centroids);

  Points vertices_;
  Faces faces_;
  std::vector<Node> nodes_;
  std::vector<int> face_order_;
  Points face_normals_;
  std::vector<double> face_areas_;
  Points vertex_normals_;
  std::unordered_map<std::uint64_t, Vec3> edge_normals_;

  friend ClosestPoint closest_point(const AccelStructure&, const Vec3&);
};

AccelStructure build_bvh(const TemplateMesh& mesh);

// Nearest surface point; equidistant faces resolve to the lowest face index.
ClosestPoint closest_point(const AccelStructure& accel, const Vec3& x);

// Face normal inside a face, angle-weighted average of incident face normals
// on edges and vertices.
Vec3 pseudo_normal(const AccelStructure& accel, const ClosestPoint& cp);

inline constexpr double kDegenerateDistance = 1e-9;

LocalQuery local_coords(const AccelStructure& accel, const ClosestPoint& cp, const Vec3& x);

// Orthonormal face frame, rows: edge tangent (m0 -> m1), bitangent, normal.
Mat3 face_frame(const AccelStructure& accel, int face);

// Angle-weighted vertex normals of a mesh.
Points vertex_normals(const TemplateMesh& mesh);

}  // namespace cbav
