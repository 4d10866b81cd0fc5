#include "test_util.hpp"

#include "cbav/checkpoint.hpp"
#include "cbav/errors.hpp"
#include "cbav/templates.hpp"
#include "cbav/training.hpp"

#include <doctest.h>

#include <sstream>

using namespace cbav;

namespace {

TrainConfig small_config() {
  TrainConfig c = TrainConfig::desk();
  c.feature_dim = 4;
  c.hidden_width = 32;
  c.points_per_iter = 256;
  c.batch_subjects = 1;
  c.iterations = 5;
  c.seed = 17;
  return c;
}

std::vector<Scan> small_scans(const TemplateMesh& tmpl, int n) {
  std::vector<Scan> out;
  for (int i = 0; i < n; ++i) {
    out.push_back(synth_scan(tmpl, 100 + i, 0.02));
    out.back().subject_id = i;
  }
  return out;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("L_3D matches a hand evaluation") {
  PointSet gt;
  gt.x = Points::Zero(2, 3);
  gt.s = Eigen::Vector2d(0.1, -0.2);
  gt.c = (Points(2, 3) << 0.5, 0.5, 0.5, 1.0, 0.0, 0.0).finished();
  gt.n = (Points(2, 3) << 0, 0, 1, 1, 0, 0).finished();
  const Eigen::Vector2d s(0.05, -0.1);
  const double eps = 0.01;
  // Offsets layout: +x, -x, +y, -y, +z, -z blocks of two rows.
  Eigen::VectorXd s_fd(12);
  s_fd << 0.0, 0.02, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.015, 0.0, 0.0, 0.0;
  const Points c = (Points(2, 3) << 0.4, 0.6, 0.5, 0.9, 0.1, 0.0).finished();
  TrainConfig cfg;
  const Loss3d l = loss_3d(s, s_fd, c, gt, eps, cfg);
  // Gradients: point 0 -> (0, 0, 0.75); point 1 -> (1, 0, 0).
  const double sdf_l1 = (0.05 + 0.1) / 2;
  const double normal_l1 = (0.25 + 0.0) / 2;
  const double rgb = ((0.1 + 0.1 + 0.0) + (0.1 + 0.1 + 0.0)) / 2;
  CHECK(l.sdf_l1 == doctest::Approx(sdf_l1));
  CHECK(l.normal_l1 == doctest::Approx(normal_l1));
  CHECK(l.l_sdf == doctest::Approx(sdf_l1 + 1e-2 * normal_l1));
  CHECK(l.l_rgb == doctest::Approx(rgb));
  CHECK(l.total == doctest::Approx(1e3 * l.l_sdf + 1e2 * l.l_rgb));

  // same data with point 1 marked free: only its SDF error counts
  gt.num_free = 1;
  const Loss3d f = loss_3d(s, s_fd, c, gt, eps, cfg);
  CHECK(f.sdf_l1 == doctest::Approx(sdf_l1));
  CHECK(f.normal_l1 == doctest::Approx(0.25 / 2));
  CHECK(f.l_rgb == doctest::Approx(0.2 / 2));
  CHECK(f.grad_s[1] == doctest::Approx(1e3 / 2));
  for (int k = 0; k < 6; ++k) CHECK(f.grad_fd[2 * k + 1] == 0.0);
  CHECK(f.grad_c.row(1).norm() == 0.0);
  CHECK(f.grad_c.row(0).norm() > 0.0);
}

TEST_CASE("L_3D gradients match central differences") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 1.0);
  const int n = 5;
  PointSet gt;
  gt.x = Points::Zero(n, 3);
  gt.s = Eigen::VectorXd::NullaryExpr(n, [&] { return g(rng); });
  gt.c = Points::NullaryExpr(n, 3, [&] { return 0.5 + 0.2 * g(rng); });
  gt.n = Points::NullaryExpr(n, 3, [&] { return g(rng); }).rowwise().normalized();
  Eigen::VectorXd s = Eigen::VectorXd::NullaryExpr(n, [&] { return g(rng); });
  Eigen::VectorXd s_fd = Eigen::VectorXd::NullaryExpr(6 * n, [&] { return 0.01 * g(rng); });
  Points c = Points::NullaryExpr(n, 3, [&] { return 0.5 + 0.2 * g(rng); });
  const TrainConfig cfg;
  const double eps = 2e-3;
  const Loss3d l = loss_3d(s, s_fd, c, gt, eps, cfg);
  const double h = 1e-7;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd a = s, b = s;
    a[i] += h;
    b[i] -= h;
    CHECK(l.grad_s[i] == doctest::Approx((loss_3d(a, s_fd, c, gt, eps, cfg).total -
                                          loss_3d(b, s_fd, c, gt, eps, cfg).total) / (2 * h)).epsilon(1e-4));
  }
  for (int i = 0; i < 6 * n; ++i) {
    Eigen::VectorXd a = s_fd, b = s_fd;
    a[i] += h;
    b[i] -= h;
    CHECK(l.grad_fd[i] == doctest::Approx((loss_3d(s, a, c, gt, eps, cfg).total -
                                           loss_3d(s, b, c, gt, eps, cfg).total) / (2 * h)).epsilon(1e-4));
  }
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) {
      Points a = c, b = c;
      a(i, k) += h;
      b(i, k) -= h;
      CHECK(l.grad_c(i, k) == doctest::Approx((loss_3d(s, s_fd, a, gt, eps, cfg).total -
                                               loss_3d(s, s_fd, b, gt, eps, cfg).total) / (2 * h)).epsilon(1e-4));
    }
}

TEST_CASE("Adam with zero first momentum takes normalized steps") {
  Eigen::VectorXd p(3);
  p << 1.0, -2.0, 0.5;
  const Eigen::Vector3d g(0.3, -4.0, 0.0);
  AdamState st;
  const AdamConfig cfg{0.1, 0.0, 0.99, 1e-8};
  adam_step(p, g, st, cfg);
  // m_hat = g and v_hat = g^2 after one step.
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.3 / (0.3 + 1e-8)));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.1 * 4.0 / (4.0 + 1e-8)));
  CHECK(p[2] == 0.5);
  // Second step with the same gradient: v_hat = g^2 again.
  const double before = p[0];
  adam_step(p, g, st, cfg);
  const double v = 0.99 * 0.01 * 0.09 + 0.01 * 0.09;
  CHECK(p[0] == doctest::Approx(before - 0.1 * 0.3 / (std::sqrt(v / (1 - 0.99 * 0.99)) + 1e-8)));
}

TEST_CASE("regularizer is the sum of Frobenius norms over the batch rows") {
  Dictionary s = init_dictionary(3, 4, 2, 1, FeatureKind::geometry, 1.0);
  Dictionary c = init_dictionary(3, 4, 2, 2, FeatureKind::texture, 1.0);
  const RegLoss all = loss_reg(s, c);
  CHECK(all.value == doctest::Approx(s.entries.norm() + c.entries.norm()));
  const RegLoss one = loss_reg_rows(s, c, {1});
  CHECK(one.value == doctest::Approx(s.entries.row(1).norm() + c.entries.row(1).norm()));
  CHECK(one.grad_shape.row(0).norm() == 0.0);
  CHECK((one.grad_shape.row(1) - s.entries.row(1) / s.entries.row(1).norm()).norm() < 1e-12);
}

TEST_CASE("scan sampler labels agree with brute-force distances") {
  TemplateMesh sphere = make_icosphere(3, 0.5);
  sphere.vertex_colors = Points::Constant(sphere.num_vertices(), 3, 0.25);
  const ScanSampler sampler(sphere);
  std::mt19937_64 rng(5);
  const PointSet ps = sampler.sample(400, rng, 0.005, 0.025);
  CHECK(ps.size() == 400);
  const double diag = sampler.diagonal();
  double narrow = 0.0, wide = 0.0;
  for (int i = 0; i < 400; ++i) {
    const Vec3 x = ps.x.row(i).transpose();
    const double d = test::brute_distance(sphere, x);
    CHECK(std::abs(std::abs(ps.s[i]) - d) < 1e-9);
    if (std::abs(x.norm() - 0.5) > 0.01) CHECK((ps.s[i] > 0) == (x.norm() > 0.5));
    CHECK((ps.c.row(i).transpose() - Vec3::Constant(0.25)).norm() < 1e-12);
    CHECK(ps.n.row(i).norm() == doctest::Approx(1.0));
    (i < 200 ? narrow : wide) += d * d;
  }
  // Offsets are truncated Gaussians; rms scales with the two shell widths.
  CHECK(std::sqrt(narrow / 200) < 0.01 * diag);
  CHECK(std::sqrt(wide / 200) > 0.01 * diag);
  CHECK(std::sqrt(wide / 200) < 0.05 * diag);
}

TEST_CASE("free-space samples cover the grown box with truncated targets") {
  TemplateMesh sphere = make_icosphere(3, 0.5);
  const ScanSampler sampler(sphere);
  std::mt19937_64 rng(9);
  const PointSet ps = sampler.sample(400, rng, 0.005, 0.025, 0.25);
  REQUIRE(ps.num_free == 100);
  const Eigen::AlignedBox3d box = sampler.free_box();
  const double extent = bounding_box(sphere).sizes().maxCoeff();
  CHECK((box.sizes() - bounding_box(sphere).sizes() - Vec3::Constant(0.5 * extent)).norm() < 1e-12);
  const double reach = 3.0 * 0.025 * sampler.diagonal();
  int clamped = 0;
  for (int i = 0; i < 400; ++i) {
    const Vec3 x = ps.x.row(i).transpose();
    const double d = test::brute_distance(sphere, x);
    // the faceted sphere sits inside radius 0.5; skip the sign test near it
    const double signed_d = std::abs(x.norm() - 0.5) < 0.01 ? std::copysign(d, ps.s[i]) : (x.norm() > 0.5 ? d : -d);
    if (i < 300) {
      CHECK(std::abs(ps.s[i] - signed_d) < 1e-9);
      CHECK(std::abs(ps.s[i]) <= reach + 1e-12);
    } else {
      CHECK(box.contains(x));
      CHECK(std::abs(ps.s[i] - std::clamp(signed_d, -reach, reach)) < 1e-9);
      if (std::abs(ps.s[i]) == reach) ++clamped;
    }
  }
  // most of the box lies beyond the shell
  CHECK(clamped > 50);
  CHECK_THROWS_AS(sampler.sample(10, rng, 0.005, 0.0, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(sampler.sample(10, rng, 0.005, 0.025, 1.0), std::invalid_argument);
  CHECK(sampler.sample(10, rng, 0.005, 0.025).num_free == 0);
}

TEST_CASE("sampler rejects open meshes") {
  TemplateMesh m;
  m.vertices.resize(3, 3);
  m.vertices << 0, 0, 0, 1, 0, 0, 0, 1, 0;
  m.faces.resize(1, 3);
  m.faces << 0, 1, 2;
  m.vertex_colors = Points::Zero(3, 3);
  CHECK_THROWS_AS(ScanSampler{m}, DataError);
}

TEST_CASE("synthetic scans are deterministic, watertight and colored") {
  const TemplateMesh h = make_humanoid();
  const Scan a = synth_scan(h, 4);
  const Scan b = synth_scan(h, 4);
  CHECK(a.mesh.vertices == b.mesh.vertices);
  CHECK(a.mesh.vertex_colors == b.mesh.vertex_colors);
  CHECK(is_watertight(a.mesh));
  CHECK(a.mesh.has_colors());
  CHECK((synth_scan(h, 5).mesh.vertices - a.mesh.vertices).norm() > 0.0);
  // Offsets move vertices outward by at most the configured fraction.
  const double diag = bbox_diagonal(h);
  CHECK((a.mesh.vertices - h.vertices).rowwise().norm().maxCoeff() <= 0.01 * diag + 1e-12);
}

TEST_CASE("a 3D-only step touches only the batch rows") {
  const TemplateMesh tmpl = make_icosphere(2, 0.5);
  TrainConfig cfg = small_config();
  Trainer t(tmpl, small_scans(tmpl, 3), cfg);
  const Model before = t.model();
  const IterationStats st = t.step();
  REQUIRE(st.batch.size() == 1);
  for (int i = 0; i < 3; ++i) {
    const bool in_batch = i == st.batch[0];
    CHECK((t.model().shape.entries.row(i) == before.shape.entries.row(i)) == !in_batch);
    CHECK((t.model().color.entries.row(i) == before.color.entries.row(i)) == !in_batch);
  }
}

TEST_CASE("training is reproducible and resumable") {
  const TemplateMesh tmpl = make_icosphere(2, 0.5);
  const TrainConfig cfg = small_config();
  std::ostringstream trace_a, trace_b;
  Trainer a(tmpl, small_scans(tmpl, 2), cfg);
  Trainer b(tmpl, small_scans(tmpl, 2), cfg);
  a.run(4, {}, &trace_a);
  b.run(4, {}, &trace_b);
  CHECK(trace_a.str() == trace_b.str());
  CHECK(serialize_model(a.snapshot()) == serialize_model(b.snapshot()));

  Trainer resumed(tmpl, small_scans(tmpl, 2), cfg, deserialize_model(serialize_model(a.snapshot())));
  const IterationStats x = a.step();
  const IterationStats y = resumed.step();
  CHECK(x.l_sdf == y.l_sdf);
  CHECK(x.l_rgb == y.l_rgb);
  CHECK(x.batch == y.batch);
  CHECK(serialize_model(a.snapshot()) == serialize_model(resumed.snapshot()));
}

TEST_CASE("resume rejects a model for a different template") {
  const TemplateMesh tmpl = make_icosphere(2, 0.5);
  const TemplateMesh other = make_icosphere(2, 0.6);
  const TrainConfig cfg = small_config();
  Trainer a(tmpl, small_scans(tmpl, 2), cfg);
  CHECK_THROWS_AS(Trainer(other, small_scans(other, 2), cfg, a.snapshot()), DataError);
}

TEST_CASE("non-finite losses abort with a numeric error") {
  const TemplateMesh tmpl = make_icosphere(2, 0.5);
  const TrainConfig cfg = small_config();
  Model m = init_model(tmpl, 1, cfg);
  Eigen::VectorXd p = m.decoders.sdf.pack();
  p[0] = std::numeric_limits<double>::quiet_NaN();
  m.decoders.sdf.unpack(p);
  Trainer t(tmpl, small_scans(tmpl, 1), cfg, m);
  CHECK_THROWS_AS(t.step(), NumericError);
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.validate();
  c.lr = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig::desk();
  c.free_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.free_fraction = 0.2;
  c.shell_wide = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  TrainConfig paper = TrainConfig::paper();
  CHECK(paper.lambda_n == 1e-2);
  CHECK(paper.adam_beta1 == 0.0);
  CHECK(paper.adam_beta2 == 0.99);
  CHECK(paper.feature_dim == 32);
  CHECK(paper.points_per_iter == 20480);
  CHECK(paper.batch_subjects == 8);
  CHECK(paper.total_iterations(16) == 8000 * 2);
}

}
