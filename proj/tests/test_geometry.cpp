#include "test_util.hpp"

#include "cbav/errors.hpp"
#include "cbav/templates.hpp"

#include <doctest.h>

#include <numbers>
#include <random>

using namespace cbav;

TEST_SUITE("geometry") {

TEST_CASE("closest point on a triangle: vertex, edge and interior regions") {
  const Vec3 a(0, 0, 0), b(1, 0, 0), c(0, 1, 0);
  CHECK(closest_point_on_triangle<double>(Vec3(-1, -1, 0.3), a, b, c) == Vec3(1, 0, 0));
  CHECK(closest_point_on_triangle<double>(Vec3(2, -0.5, 0), a, b, c) == Vec3(0, 1, 0));
  const Vec3 w = closest_point_on_triangle<double>(Vec3(0.5, -2, 1), a, b, c);
  CHECK(w.isApprox(Vec3(0.5, 0.5, 0.0)));
  const Vec3 in = closest_point_on_triangle<double>(Vec3(0.2, 0.3, 5), a, b, c);
  CHECK(in.isApprox(Vec3(0.5, 0.2, 0.3)));
}

TEST_CASE("BVH closest point matches brute force") {
  const TemplateMesh mesh = make_humanoid();
  REQUIRE(mesh.num_faces() <= 5000);
  const AccelStructure accel(mesh);
  std::mt19937_64 rng(7);
  const Eigen::AlignedBox3d box = bounding_box(mesh);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const Vec3 t(u(rng), u(rng), u(rng));
    const Vec3 p = box.min() - 0.1 * box.sizes() + 1.2 * box.sizes().cwiseProduct(t);
    const ClosestPoint cp = closest_point(accel, p);
    CHECK(test::rel_err(cp.distance, test::brute_distance(mesh, p)) < 1e-9);
    CHECK((cp.point - p).norm() == doctest::Approx(cp.distance).epsilon(1e-12));
  }
}

TEST_CASE("equidistant faces resolve to the lowest index") {
  TemplateMesh m;
  m.vertices.resize(4, 3);
  m.vertices << 0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 0;
  m.faces.resize(2, 3);
  m.faces << 0, 1, 2, 1, 3, 2;
  const AccelStructure accel(m);
  // On the shared edge both faces are at distance 1.
  const ClosestPoint cp = closest_point(accel, Vec3(0.5, 0.5, 1.0));
  CHECK(cp.face == 0);
}

TEST_CASE("signed local coordinates on a sphere") {
  const TemplateMesh sphere = make_icosphere(3, 1.0);
  const AccelStructure accel(sphere);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const Vec3 dir = Vec3(g(rng), g(rng), g(rng)).normalized();
    const double r = 0.5 + 0.01 * i;
    const Vec3 x = r * dir;
    const ClosestPoint cp = closest_point(accel, x);
    const LocalQuery q = local_coords(accel, cp, x);
    CHECK(std::abs(std::abs(q.uvd[2]) - (x - cp.point).norm()) < 1e-9);
    CHECK(q.dir.norm() == doctest::Approx(1.0).epsilon(1e-9));
    // Points well inside or outside the polyhedron get the matching sign.
    if (r < 0.9) CHECK(q.uvd[2] < 0.0);
    if (r > 1.01) CHECK(q.uvd[2] > 0.0);
    CHECK(q.uvd[0] >= 0.0);
    CHECK(q.uvd[1] >= 0.0);
    CHECK(q.uvd[0] + q.uvd[1] <= 1.0 + 1e-12);
  }
}

TEST_CASE("on-surface query uses the face normal as direction") {
  const TemplateMesh sphere = make_icosphere(2, 1.0);
  const AccelStructure accel(sphere);
  const Vec3 x = (sphere.vertex(sphere.faces(5, 0)) + sphere.vertex(sphere.faces(5, 1)) +
                  sphere.vertex(sphere.faces(5, 2))) / 3.0;
  const ClosestPoint cp = closest_point(accel, x);
  const LocalQuery q = local_coords(accel, cp, x);
  CHECK(std::abs(q.uvd[2]) < 1e-12);
  CHECK((q.dir - accel.face_normal(cp.face)).norm() < 1e-9);
}

TEST_CASE("face frame is orthonormal with the normal last") {
  const TemplateMesh sphere = make_icosphere(1, 1.0);
  const AccelStructure accel(sphere);
  for (int f = 0; f < accel.num_faces(); ++f) {
    const Mat3 r = face_frame(accel, f);
    CHECK((r * r.transpose() - Mat3::Identity()).norm() < 1e-12);
    CHECK((r.row(2).transpose() - accel.face_normal(f)).norm() < 1e-12);
    CHECK(r.determinant() == doctest::Approx(1.0));
  }
}

TEST_CASE("rodrigues rotation matches an axis rotation") {
  const Mat3 r = axis_angle_to_matrix(Vec3(0, 0, std::numbers::pi / 2));
  CHECK((r * Vec3::UnitX() - Vec3::UnitY()).norm() < 1e-12);
  CHECK((axis_angle_to_matrix(Vec3::Zero()) - Mat3::Identity()).norm() == 0.0);
  const Mat3 small = axis_angle_to_matrix(Vec3(1e-12, 0, 0));
  CHECK((small * small.transpose() - Mat3::Identity()).norm() < 1e-12);
}

TEST_CASE("skinning with the identity pose reproduces the rest mesh") {
  const TemplateMesh h = make_humanoid();
  const TemplateMesh posed = skin(h, PoseParams::identity(h));
  CHECK((posed.vertices - h.vertices).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("skinning is rigid for a single-bone mesh") {
  const TemplateMesh s = make_icosphere(1, 1.0, Vec3(0.3, 0.0, 0.0));
  PoseParams p = PoseParams::identity(s);
  p.joint_rotations.row(0) = Vec3(0.0, 0.7, 0.0).transpose();
  p.root_translation = Vec3(0.1, 0.2, 0.3);
  const TemplateMesh posed = skin(s, p);
  const Mat3 r = axis_angle_to_matrix(Vec3(0.0, 0.7, 0.0));
  const Vec3 j = s.joints.row(0).transpose();
  for (int v = 0; v < s.num_vertices(); ++v) {
    const Vec3 expect = r * (s.vertex(v) - j) + j + p.root_translation;
    CHECK((posed.vertex(v) - expect).norm() < 1e-12);
  }
}

TEST_CASE("skin rejects a pose with the wrong joint count") {
  const TemplateMesh h = make_humanoid();
  PoseParams p = PoseParams::identity(h);
  p.joint_rotations.conservativeResize(3, 3);
  CHECK_THROWS(skin(h, p));
}

TEST_CASE("bundled templates are watertight and deterministic") {
  const TemplateMesh h = make_humanoid();
  CHECK(is_watertight(h));
  CHECK(h.num_joints() == 16);
  CHECK(template_hash(h) == template_hash(make_humanoid()));
  CHECK(is_watertight(make_icosphere(2)));
  CHECK(make_icosphere(3).num_vertices() == 642);
}

TEST_CASE("camera projection inverts pixel rays") {
  Camera cam;
  cam.position = Vec3(0.3, 0.2, 2.5);
  cam.look_at = Vec3(0.0, 0.1, 0.0);
  cam.width = 200;
  cam.height = 120;
  for (double px : {0.5, 37.25, 199.5})
    for (double py : {0.5, 60.0, 119.5}) {
      const Vec3 d = cam.pixel_ray(px, py);
      CHECK(d.norm() == doctest::Approx(1.0));
      const Vec3 p = cam.project(cam.position + 1.7 * d);
      CHECK(p.x() == doctest::Approx(px));
      CHECK(p.y() == doctest::Approx(py));
    }
  // The image center looks straight ahead.
  CHECK((cam.pixel_ray(100.0, 60.0) - (cam.look_at - cam.position).normalized()).norm() < 1e-12);
}

}
