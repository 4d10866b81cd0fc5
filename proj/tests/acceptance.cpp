#include "test_util.hpp"

#include "cbav/adversarial.hpp"
#include "cbav/avatar.hpp"
#include "cbav/checkpoint.hpp"
#include "cbav/config.hpp"
#include "cbav/errors.hpp"
#include "cbav/image_io.hpp"
#include "cbav/mesh_io.hpp"
#include "cbav/mesher.hpp"
#include "cbav/metrics.hpp"
#include "cbav/templates.hpp"
#include "cbav/training.hpp"

#include "cli_io.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <sys/wait.h>

namespace fs = std::filesystem;
using namespace cbav;

namespace {

// Pinned tolerances.
constexpr int kC1Queries = 1000;
constexpr int kC1MaxFaces = 5000;
constexpr double kC1RelErr = 1e-9;
constexpr double kC1Seconds = 5.0;

constexpr int kC2Configs = 100;
constexpr double kC2RelErr = 1e-4;
constexpr double kC2R1RelErr = 1e-3;
constexpr double kC2Step = 1e-6;
constexpr double kC2Boundary = 1e-4;  // minimum |pre-activation| for R1 checks
// Central differences with step 1e-6 carry ~1e-10 absolute roundoff, so
// relative error is measured against at least this magnitude.
constexpr double kC2Floor = 1e-5;

constexpr int kC3Res = 64;
constexpr double kC3RadiusVoxels = 1.5;
constexpr int kC3RaySteps = 128;
constexpr double kC3RayErr = 1e-4;
constexpr double kC3GradErr = 1e-6;

constexpr int kC4Iterations = 500;
constexpr double kC4Seconds = 300.0;
constexpr double kC4Chamfer = 0.01;  // fraction of the bbox diagonal
constexpr double kC4Normal = 0.95;

constexpr int kC5Subjects = 8;
constexpr int kC5Iterations = 1000;
constexpr int kC5GeometryIters = 100;
constexpr int kC5TextureIters = 300;
constexpr double kC5Chamfer = 0.02;

constexpr double kC7Probe = 1e-6;

constexpr double kC8RoundTrip = 1e-6;
constexpr double kC8Ortho = 1e-6;

constexpr int kC9Iterations = 30;

constexpr double kC10Seconds = 1800.0;

constexpr int kMetricSamples = 20000;
constexpr int kExtractRes = 64;

struct Result {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

class Cli {
 public:
  Cli(fs::path exe, fs::path log) : exe_(std::move(exe)), log_(std::move(log)) {}

  // Runs the CLI with `args`; throws with the log path on a nonzero exit.
  void operator()(const std::string& args) const {
    const std::string cmd = quote(exe_) + " " + args + " >> " + quote(log_) + " 2>&1";
    {
      std::ofstream(log_, std::ios::app) << "$ cbav " << args << '\n';
    }
    const int rc = std::system(cmd.c_str());
    const int code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    if (code != 0)
      throw std::runtime_error("cbav " + args.substr(0, args.find(' ')) + " exited with " + std::to_string(code) +
                               " (see " + log_.string() + ")");
  }

 private:
  fs::path exe_;
  fs::path log_;
};

RunConfig desk_config(int iterations, std::uint64_t seed) {
  RunConfig rc;
  rc.preset = "desk";
  rc.template_name = "humanoid";
  rc.train = TrainConfig::desk();
  rc.train.iterations = iterations;
  rc.train.checkpoint_every = std::max(1, iterations / 5);
  rc.train.adversarial = false;
  rc.train.seed = seed;
  return rc;
}

void write_config(const RunConfig& rc, const fs::path& path) { write_file(path, format_run_config(rc)); }

double rel(double a, double b, double floor = kC2Floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// 1. Closest-point queries against brute force.
Result criterion1() {
  const TemplateMesh mesh = make_humanoid();
  if (mesh.num_faces() > kC1MaxFaces) return {false, "template exceeds the face budget"};
  const Eigen::AlignedBox3d box = bounding_box(mesh);
  std::mt19937_64 rng(1);
  std::vector<Vec3> q(kC1Queries);
  for (auto& p : q)
    for (int k = 0; k < 3; ++k) {
      std::uniform_real_distribution<double> u(box.min()[k] - 0.2 * box.sizes()[k], box.max()[k] + 0.2 * box.sizes()[k]);
      p[k] = u(rng);
    }
  const auto t0 = std::chrono::steady_clock::now();
  const AccelStructure accel(mesh);
  std::vector<double> d(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) d[i] = (closest_point(accel, q[i]).point - q[i]).norm();
  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double b = test::brute_distance(mesh, q[i]);
    worst = std::max(worst, std::abs(d[i] - b) / std::max(b, 1e-12));
  }
  return {worst < kC1RelErr && elapsed < kC1Seconds,
          std::to_string(mesh.num_faces()) + " faces, max rel err " + fmt(worst) + ", " + fmt(elapsed) + " s"};
}

// 2. Reverse-mode gradients against central differences.
Result criterion2() {
  const TemplateMesh tmpl = make_icosphere(1, 0.5);
  const AccelStructure accel(tmpl);
  const int f = 4;
  double worst_dec = 0.0, worst_cb = 0.0, worst_disc = 0.0, worst_r1 = 0.0;
  int r1_configs = 0;
  for (int cfg = 0; cfg < kC2Configs; ++cfg) {
    std::mt19937_64 rng(1000 + cfg);
    std::normal_distribution<double> g(0.0, 1.0);
    const Decoders dec = make_decoders(f, rng(), 16);
    Codebook cb(tmpl.num_vertices(), f);
    cb.features = Eigen::MatrixXd::NullaryExpr(cb.features.rows(), cb.features.cols(), [&] { return 0.5 * g(rng); });
    Vec3 x(g(rng), g(rng), g(rng));
    x = x.normalized() * (0.3 + 0.4 * std::uniform_real_distribution<double>(0, 1)(rng));
    const double ws = g(rng);
    const Vec3 wc(g(rng), g(rng), g(rng));
    auto loss = [&](const Decoders& d, const Codebook& c) {
      const FieldSample s = query_field(accel, c, d, x);
      return ws * s.s + wc.dot(s.c);
    };
    const FieldSample s0 = query_field(accel, cb, dec, x);
    const FieldGradient fg = field_backward(s0, dec, tmpl.num_vertices(), ws, wc);

    for (int which = 0; which < 2; ++which) {
      const Decoder& net = which == 0 ? dec.sdf : dec.color;
      const Eigen::VectorXd p = net.pack();
      const Eigen::VectorXd gp = which == 0 ? fg.sdf.pack() : fg.color.pack();
      std::uniform_int_distribution<Eigen::Index> pick(0, p.size() - 1);
      for (int t = 0; t < 8; ++t) {
        const Eigen::Index k = pick(rng);
        Decoders a = dec, b = dec;
        Eigen::VectorXd pa = p, pb = p;
        pa[k] += kC2Step;
        pb[k] -= kC2Step;
        (which == 0 ? a.sdf : a.color).unpack(pa);
        (which == 0 ? b.sdf : b.color).unpack(pb);
        worst_dec = std::max(worst_dec, rel(gp[k], (loss(a, cb) - loss(b, cb)) / (2 * kC2Step)));
      }
    }
    for (int v : s0.support)
      for (int c = 0; c < 2 * f; ++c) {
        Codebook a = cb, b = cb;
        a.features(v, c) += kC2Step;
        b.features(v, c) -= kC2Step;
        worst_cb = std::max(worst_cb, rel(fg.codebook(v, c), (loss(dec, a) - loss(dec, b)) / (2 * kC2Step)));
      }

    // Discriminator: logistic terms and the R1 penalty.
    const Discriminator disc = make_discriminator(2, rng());
    const Eigen::MatrixXd real = Eigen::MatrixXd::NullaryExpr(12, 3, [&] { return 0.6 * g(rng); });
    const Eigen::MatrixXd fake = Eigen::MatrixXd::NullaryExpr(12, 3, [&] { return 0.6 * g(rng); });
    const GanLosses gl = gan_losses(disc, real, fake, 0.0);
    const Eigen::VectorXd p = disc.pack();
    const Eigen::VectorXd gp = gl.d_grad.pack();
    std::uniform_int_distribution<Eigen::Index> pick(0, p.size() - 1);
    for (int t = 0; t < 8; ++t) {
      const Eigen::Index k = pick(rng);
      Discriminator a = disc, b = disc;
      Eigen::VectorXd pa = p, pb = p;
      pa[k] += kC2Step;
      pb[k] -= kC2Step;
      a.unpack(pa);
      b.unpack(pb);
      worst_disc = std::max(
          worst_disc,
          rel(gp[k], (gan_losses(a, real, fake, 0.0).d_loss - gan_losses(b, real, fake, 0.0).d_loss) / (2 * kC2Step)));
    }
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 12; k += 4) {
        Eigen::MatrixXd a = fake, b = fake;
        a(k, j) += kC2Step;
        b(k, j) -= kC2Step;
        worst_disc = std::max(worst_disc, rel(gl.g_input_grad(k, j), (gan_losses(disc, real, a, 0.0).g_loss -
                                                                      gan_losses(disc, real, b, 0.0).g_loss) /
                                                                         (2 * kC2Step)));
      }

    // R1 only away from rectifier boundaries.
    const auto& layers = disc.layers();
    Eigen::MatrixXd z1 = layers[0].weight * real;
    z1.colwise() += layers[0].bias;
    const Eigen::MatrixXd h1 = z1.unaryExpr([&](double v) { return v > 0 ? v : disc.negative_slope() * v; });
    Eigen::MatrixXd z2 = layers[1].weight * h1;
    z2.colwise() += layers[1].bias;
    if (std::min(z1.cwiseAbs().minCoeff(), z2.cwiseAbs().minCoeff()) < kC2Boundary) continue;
    ++r1_configs;
    const R1Result r1 = r1_penalty(disc, real);
    const Eigen::VectorXd gr = r1.grad.pack();
    for (int t = 0; t < 8; ++t) {
      const Eigen::Index k = pick(rng);
      Discriminator a = disc, b = disc;
      Eigen::VectorXd pa = p, pb = p;
      pa[k] += kC2Step;
      pb[k] -= kC2Step;
      a.unpack(pa);
      b.unpack(pb);
      worst_r1 = std::max(worst_r1,
                          rel(gr[k], (r1_penalty(a, real).value - r1_penalty(b, real).value) / (2 * kC2Step)));
    }
  }
  const bool pass = worst_dec < kC2RelErr && worst_cb < kC2RelErr && worst_disc < kC2RelErr &&
                    worst_r1 < kC2R1RelErr && r1_configs >= kC2Configs / 2;
  return {pass, std::to_string(kC2Configs) + " configs; max rel err decoders " + fmt(worst_dec) + ", codebook " +
                    fmt(worst_cb) + ", discriminator " + fmt(worst_disc) + ", R1 " + fmt(worst_r1) + " (" +
                    std::to_string(r1_configs) + " configs)"};
}

// 3. Analytic sphere: marching cubes, ray intersection, spatial gradient.
Result criterion3() {
  const double r = 0.6;
  auto sphere = [r](const Vec3& x) { return x.norm() - r; };
  const BatchField batch = [r](const Points& x) { return Eigen::VectorXd(x.rowwise().norm().array() - r); };
  const Eigen::AlignedBox3d box(Vec3::Constant(-1.0), Vec3::Constant(1.0));
  const VoxelGrid grid = sample_grid(batch, box, kC3Res);
  const TemplateMesh mesh = marching_cubes(grid);
  double radius_err = 0.0;
  for (int i = 0; i < mesh.num_vertices(); ++i) radius_err = std::max(radius_err, std::abs(mesh.vertex(i).norm() - r));
  const double voxel = grid.spacing().maxCoeff();

  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  double ray_err = 0.0;
  int hits = 0;
  for (int i = 0; i < 200; ++i) {
    const Vec3 origin = 2.0 * Vec3(g(rng), g(rng), g(rng)).normalized();
    const Vec3 target = 0.5 * r * Vec3(g(rng), g(rng), g(rng)).normalized();
    const Vec3 dir = (target - origin).normalized();
    const auto hit = intersect_ray(sphere, {origin, dir, 0.0, 4.0}, kC3RaySteps);
    // Analytic first root of |o + t d| = r.
    const double b = origin.dot(dir);
    const double c = origin.squaredNorm() - r * r;
    const double t_true = -b - std::sqrt(b * b - c);
    if (!hit) {
      ray_err = std::numeric_limits<double>::infinity();
      continue;
    }
    ++hits;
    ray_err = std::max(ray_err, std::abs(hit->t - t_true));
  }

  double grad_err = 0.0;
  for (int i = 0; i < 200; ++i) {
    const Vec3 x = (0.2 + std::abs(g(rng))) * Vec3(g(rng), g(rng), g(rng)).normalized();
    grad_err = std::max(grad_err, (spatial_gradient(sphere, x, 1e-5) - x.normalized()).norm());
  }
  const bool pass = is_watertight(mesh) && radius_err < kC3RadiusVoxels * voxel && ray_err < kC3RayErr &&
                    grad_err < kC3GradErr;
  return {pass, "MC radius err " + fmt(radius_err / voxel) + " voxels, ray err " + fmt(ray_err) + " (" +
                    std::to_string(hits) + " rays), gradient err " + fmt(grad_err)};
}

MeshMetrics mesh_vs_scan(const fs::path& predicted, const fs::path& scan) {
  const TemplateMesh ref = read_mesh(scan);
  return compare_meshes(read_mesh(predicted), ref, kMetricSamples, 7, 0.01 * bbox_diagonal(ref));
}

// 4. Overfit a single scan.
Result criterion4(const Cli& cli, const fs::path& dir) {
  fs::create_directories(dir);
  cli("synth --count 1 --seed 41 --out " + quote(dir / "scans"));
  write_config(desk_config(kC4Iterations, 4), dir / "run.toml");
  const auto t0 = std::chrono::steady_clock::now();
  cli("train --config " + quote(dir / "run.toml") + " --scans " + quote(dir / "scans") + " --out " +
      quote(dir / "model.ckpt"));
  const double train_s = seconds_since(t0);
  cli("sample --ckpt " + quote(dir / "model.ckpt") + " --index 0 --out " + quote(dir / "a0.cbav"));
  cli("extract --ckpt " + quote(dir / "model.ckpt") + " --avatar " + quote(dir / "a0.cbav") + " --res " +
      std::to_string(kExtractRes) + " --out " + quote(dir / "a0.ply"));
  const double total_s = seconds_since(t0);
  const TemplateMesh scan = read_mesh(dir / "scans" / "scan_000.ply");
  const double diag = bbox_diagonal(scan);
  const MeshMetrics m = mesh_vs_scan(dir / "a0.ply", dir / "scans" / "scan_000.ply");
  const bool pass = total_s <= kC4Seconds && m.chamfer < kC4Chamfer * diag && m.normal_consistency > kC4Normal;
  return {pass, std::to_string(kC4Iterations) + " iterations, train " + fmt(train_s) + " s, total " + fmt(total_s) +
                    " s; chamfer " + fmt(100 * m.chamfer / diag) + "% of diagonal, NC " + fmt(m.normal_consistency) +
                    ", f-score@1% " + fmt(m.fscore)};
}

struct Pipeline {
  bool ok = false;
  std::string error;
  double seconds = 0.0;
  fs::path dir;
  MeshMetrics fit_metrics;
  double diag = 0.0;
  bool decoder_unchanged = false;
  bool final_watertight = false;
  bool final_colored = false;
  int pngs = 0;
  std::vector<int> upper;
};

// 5 and 10. synth -> train -> fit -> swap -> paint -> repose -> extract -> render.
Pipeline run_pipeline(const Cli& cli, const fs::path& dir) {
  Pipeline p;
  p.dir = dir;
  try {
    fs::create_directories(dir);
    const auto t0 = std::chrono::steady_clock::now();
    cli("synth --count " + std::to_string(kC5Subjects + 1) + " --seed 500 --out " + quote(dir / "all"));
    fs::create_directories(dir / "train");
    fs::create_directories(dir / "heldout");
    for (const auto& e : fs::directory_iterator(dir / "all")) {
      const std::string name = e.path().filename().string();
      const bool held = name.rfind("scan_008", 0) == 0;
      fs::copy_file(e.path(), dir / (held ? "heldout" : "train") / name, fs::copy_options::overwrite_existing);
    }
    write_config(desk_config(kC5Iterations, 5), dir / "run.toml");
    const fs::path ckpt = dir / "model.ckpt";
    cli("train --config " + quote(dir / "run.toml") + " --scans " + quote(dir / "train") + " --out " + quote(ckpt));
    const std::uint64_t ckpt_hash_before = fnv1a(read_file(ckpt).data(), read_file(ckpt).size());

    const fs::path scan = dir / "heldout" / "scan_008.ply";
    cli("fit --ckpt " + quote(ckpt) + " --scan " + quote(scan) + " --config " + quote(dir / "run.toml") +
        " --geometry-iters " + std::to_string(kC5GeometryIters) + " --texture-iters " +
        std::to_string(kC5TextureIters) + " --out " + quote(dir / "fitted.cbav"));
    cli("extract --ckpt " + quote(ckpt) + " --avatar " + quote(dir / "fitted.cbav") + " --res " +
        std::to_string(kExtractRes) + " --out " + quote(dir / "fitted.ply"));
    const std::string ckpt_bytes = read_file(ckpt);
    const Model model = deserialize_model(ckpt_bytes);
    const Avatar fitted = load_avatar(dir / "fitted.cbav");
    p.decoder_unchanged = fnv1a(ckpt_bytes.data(), ckpt_bytes.size()) == ckpt_hash_before &&
                          fitted.checkpoint_hash == decoder_hash(model.decoders);
    p.diag = bbox_diagonal(read_mesh(scan));
    p.fit_metrics = mesh_vs_scan(dir / "fitted.ply", scan);

    // Texture of a training subject on the upper body.
    const TemplateMesh tmpl = make_humanoid();
    const double chest = tmpl.joints(1, 1);
    p.upper = select_vertices(tmpl, [chest](const Vec3& x) { return x.y() > chest; });
    write_vertex_set(p.upper, dir / "upper.txt");
    cli("sample --ckpt " + quote(ckpt) + " --index 0 --out " + quote(dir / "donor.cbav"));
    cli("swap --ckpt " + quote(ckpt) + " --dst " + quote(dir / "fitted.cbav") + " --src " + quote(dir / "donor.cbav") +
        " --vertices " + quote(dir / "upper.txt") + " --kinds texture --out " + quote(dir / "swapped.cbav"));

    // Paint a red square over a rasterized front view.
    Camera cam;
    const Eigen::AlignedBox3d box = bounding_box(read_mesh(dir / "fitted.ply"));
    cam.look_at = box.center();
    cam.position = box.center() + Vec3(0.0, 0.0, 2.5);
    cam.width = cam.height = 128;
    cbav::cli::write_camera(cam, dir / "camera.json");
    cli("rasterize --mesh " + quote(dir / "fitted.ply") + " --camera " + quote(dir / "camera.json") + " --out " +
        quote(dir / "view.png"));
    RgbImage image = read_png(dir / "view.png");
    RgbImage mask(image.width, image.height, Vec3f::Zero());
    for (int y = 40; y < 64; ++y)
      for (int x = 52; x < 76; ++x) {
        image.at(x, y) = Vec3f(0.9f, 0.1f, 0.1f);
        mask.at(x, y) = Vec3f::Ones();
      }
    write_png(image, dir / "edited.png");
    write_png(mask, dir / "mask.png");
    cli("paint --ckpt " + quote(ckpt) + " --avatar " + quote(dir / "swapped.cbav") + " --image " +
        quote(dir / "edited.png") + " --mask " + quote(dir / "mask.png") + " --camera " + quote(dir / "camera.json") +
        " --target " + quote(dir / "fitted.ply") + " --config " + quote(dir / "run.toml") + " --iters 100 --out " +
        quote(dir / "painted.cbav"));

    // Raise the left arm.
    PoseParams pose = fitted.pose;
    const auto& names = humanoid_joint_names();
    const auto shoulder = std::find(names.begin(), names.end(), "left_shoulder") - names.begin();
    pose.joint_rotations.row(shoulder) += Eigen::RowVector3d(0.0, 0.0, 0.6);
    cbav::cli::write_pose(pose, -1, dir / "pose.json");
    cli("repose --ckpt " + quote(ckpt) + " --avatar " + quote(dir / "painted.cbav") + " --pose " +
        quote(dir / "pose.json") + " --out " + quote(dir / "reposed.cbav"));
    cli("extract --ckpt " + quote(ckpt) + " --avatar " + quote(dir / "reposed.cbav") + " --res " +
        std::to_string(kExtractRes) + " --out " + quote(dir / "final.ply"));
    cli("render --ckpt " + quote(ckpt) + " --avatar " + quote(dir / "reposed.cbav") +
        " --views 4 --res 128 --out " + quote(dir / "turntable"));
    p.seconds = seconds_since(t0);

    const TemplateMesh final_mesh = read_mesh(dir / "final.ply");
    p.final_watertight = is_watertight(final_mesh);
    p.final_colored = final_mesh.has_colors();
    for (const auto& e : fs::directory_iterator(dir / "turntable")) p.pngs += e.path().extension() == ".png";
    p.ok = true;
  } catch (const std::exception& e) {
    p.error = e.what();
  }
  return p;
}

Result criterion5(const Pipeline& p) {
  if (!p.ok) return {false, "pipeline failed: " + p.error};
  const bool pass = p.fit_metrics.chamfer < kC5Chamfer * p.diag && p.decoder_unchanged;
  return {pass, std::to_string(kC5Subjects) + " training scans, fit " +
                    std::to_string(kC5GeometryIters + kC5TextureIters) + " iterations; chamfer " +
                    fmt(100 * p.fit_metrics.chamfer / p.diag) + "% of diagonal, NC " +
                    fmt(p.fit_metrics.normal_consistency) +
                    (p.decoder_unchanged ? ", decoder hash unchanged" : ", decoder hash CHANGED")};
}

// 6. Which dictionary rows a step writes.
Result criterion6() {
  const TemplateMesh tmpl = make_humanoid();
  std::vector<Scan> scans;
  for (int i = 0; i < 4; ++i) {
    scans.push_back(synth_scan(tmpl, 60 + i));
    scans.back().subject_id = i;
  }
  TrainConfig cfg = TrainConfig::desk();
  cfg.feature_dim = 4;
  cfg.hidden_width = 32;
  cfg.points_per_iter = 512;
  cfg.batch_subjects = 2;
  cfg.seed = 6;

  auto changed_rows = [](const Model& a, const Model& b) {
    std::set<int> rows;
    for (int i = 0; i < a.num_subjects(); ++i)
      if (a.shape.entries.row(i) != b.shape.entries.row(i) || a.color.entries.row(i) != b.color.entries.row(i))
        rows.insert(i);
    return rows;
  };

  Trainer plain(tmpl, scans, cfg);
  const Model before = plain.model();
  const IterationStats st = plain.step();
  const std::set<int> batch(st.batch.begin(), st.batch.end());
  const std::set<int> plain_rows = changed_rows(before, plain.model());
  const bool local = plain_rows == batch;

  cfg.adversarial = true;
  cfg.adv_every = 1;
  cfg.patches_per_step = 1;
  cfg.patch_size = 16;
  cfg.image_size = 64;
  cfg.ray_steps = 32;
  Trainer adv(tmpl, scans, cfg);
  const Model before_adv = adv.model();
  const IterationStats st_adv = adv.step();
  const std::set<int> adv_rows = changed_rows(before_adv, adv.model());
  int outside = 0;
  for (int r : adv_rows) outside += !std::count(st_adv.batch.begin(), st_adv.batch.end(), r);
  const int n_outside = before_adv.num_subjects() - static_cast<int>(st_adv.batch.size());
  return {local && outside == n_outside,
          "3D-only step wrote " + std::to_string(plain_rows.size()) + " rows (batch " + std::to_string(batch.size()) +
              "), adversarial step wrote " + std::to_string(outside) + " of " + std::to_string(n_outside) +
              " rows outside the batch"};
}

// 7. Editing audits on the pipeline avatars.
Result criterion7(const Pipeline& p) {
  if (!p.ok) return {false, "pipeline failed: " + p.error};
  const TemplateMesh tmpl = make_humanoid();
  const Model model = load_checkpoint(p.dir / "model.ckpt", tmpl);
  const Avatar fitted = load_avatar(p.dir / "fitted.cbav");
  const Avatar donor = load_avatar(p.dir / "donor.cbav");
  const Avatar swapped = load_avatar(p.dir / "swapped.cbav");
  const Avatar painted = load_avatar(p.dir / "painted.cbav");
  const Avatar reposed = load_avatar(p.dir / "reposed.cbav");

  const bool swap_geo = swapped.codebook.geometry() == fitted.codebook.geometry();
  const bool paint_geo = painted.codebook.geometry() == swapped.codebook.geometry();
  const bool paint_changed = painted.codebook.texture() != swapped.codebook.texture();

  // Queries whose three support vertices were all transferred.
  std::vector<bool> in(tmpl.num_vertices(), false);
  for (int v : p.upper) in[v] = true;
  const AvatarScene scene(swapped, tmpl, model.decoders);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0.0, 0.01);
  int supported = 0;
  bool fused_equal = true;
  for (int i = 0; i < 2000; ++i) {
    const int v = std::uniform_int_distribution<int>(0, tmpl.num_vertices() - 1)(rng);
    const Vec3 x = scene.posed().vertex(v) + Vec3(g(rng), g(rng), g(rng));
    const ClosestPoint cp = closest_point(scene.accel(), x);
    const LocalQuery q = local_coords(scene.accel(), cp, x);
    bool all = true;
    for (int k = 0; k < 3; ++k) all = all && in[tmpl.faces(q.face, k)];
    if (!all) continue;
    ++supported;
    const auto got = lookup_fused(swapped.codebook, tmpl.faces, q);
    const auto src = lookup_fused(donor.codebook, tmpl.faces, q);
    const auto dst = lookup_fused(fitted.codebook, tmpl.faces, q);
    fused_equal = fused_equal && got.second == src.second && got.first == dst.first;
  }

  // Repose: same bytes, same field values at matching local coordinates.
  const bool bytes_equal = codebook_checksum(reposed.codebook) == codebook_checksum(painted.codebook) &&
                           reposed.codebook.features == painted.codebook.features;
  const AvatarScene a(painted, tmpl, model.decoders);
  const AvatarScene b(reposed, tmpl, model.decoders);
  double probe_err = 0.0;
  int probes = 0;
  for (int f = 0; f < tmpl.num_faces(); f += 7) {
    auto probe = [&](const AvatarScene& s) {
      const Vec3 p0 = s.posed().vertex(tmpl.faces(f, 0));
      const Vec3 p1 = s.posed().vertex(tmpl.faces(f, 1));
      const Vec3 p2 = s.posed().vertex(tmpl.faces(f, 2));
      const Vec3 n = (p1 - p0).cross(p2 - p0).normalized();
      return Vec3((p0 + p1 + p2) / 3.0 + 0.002 * n);
    };
    const Vec3 xa = probe(a), xb = probe(b);
    const FieldSample sa = query_field(a.accel(), painted.codebook, model.decoders, xa);
    const FieldSample sb = query_field(b.accel(), reposed.codebook, model.decoders, xb);
    if (sa.query.face != f || sb.query.face != f) continue;
    ++probes;
    probe_err = std::max({probe_err, std::abs(sa.s - sb.s), (sa.c - sb.c).cwiseAbs().maxCoeff()});
  }
  const bool pass = swap_geo && paint_geo && paint_changed && supported > 0 && fused_equal && bytes_equal &&
                    probes > 0 && probe_err < kC7Probe;
  std::string detail;
  detail += std::string("swap geometry ") + (swap_geo ? "identical" : "CHANGED");
  detail += std::string(", paint geometry ") + (paint_geo ? "identical" : "CHANGED");
  detail += std::string(paint_changed ? "" : " (paint left texture unchanged)");
  detail += ", " + std::to_string(supported) + " supported queries " + (fused_equal ? "match" : "DIFFER");
  detail += std::string(", repose codebook ") + (bytes_equal ? "identical" : "CHANGED");
  detail += ", probe err " + fmt(probe_err) + " over " + std::to_string(probes) + " probes";
  return {pass, detail};
}

// 8. PCA on the trained dictionaries.
Result criterion8(const Pipeline& p) {
  if (!p.ok) return {false, "pipeline failed: " + p.error};
  const TemplateMesh tmpl = make_humanoid();
  const Model model = load_checkpoint(p.dir / "model.ckpt", tmpl);
  double mean_err = 0.0, round_trip = 0.0, ortho = 0.0;
  for (const Dictionary* dict : {&model.shape, &model.color}) {
    const int n = dict->size();
    const PcaModel pca = pca_fit(*dict, n - 1);
    const Eigen::VectorXd mean = dict->entries.colwise().mean().transpose();
    mean_err = std::max(mean_err, (pca_decode(pca, Eigen::VectorXd::Zero(pca.dim())) - mean).cwiseAbs().maxCoeff());
    for (int i = 0; i < n; ++i) {
      const Eigen::VectorXd row = dict->entries.row(i).transpose();
      round_trip = std::max(round_trip, (pca_decode(pca, pca_project(pca, row)) - row).norm() / row.norm());
    }
    const Eigen::MatrixXd gram = pca.eigvecs * pca.eigvecs.transpose();
    ortho = std::max(ortho, (gram - Eigen::MatrixXd::Identity(pca.dim(), pca.dim())).cwiseAbs().maxCoeff());
  }
  // the model dims are clamped to N - 1 inside pca_fit
  const int dg = pca_fit(model.shape, model.pca_dim_geometry).dim();
  const int dt = pca_fit(model.color, model.pca_dim_texture).dim();
  const Avatar zero = init_avatar(model, tmpl, Eigen::VectorXd::Zero(dg), Eigen::VectorXd::Zero(dt));
  const Avatar mean = mean_avatar(model, tmpl);
  const double avatar_err = (zero.codebook.features - mean.codebook.features).cwiseAbs().maxCoeff();
  const bool pass = mean_err < 1e-12 && avatar_err < 1e-12 && round_trip < kC8RoundTrip && ortho < kC8Ortho;
  return {pass, "zero-coefficient err " + fmt(std::max(mean_err, avatar_err)) + ", round-trip rel " +
                    fmt(round_trip) + ", orthonormality " + fmt(ortho)};
}

// 9. Bit-identical reruns and checkpoint round-trip.
Result criterion9(const Cli& cli, const fs::path& dir) {
  fs::create_directories(dir);
  cli("synth --count 2 --seed 90 --out " + quote(dir / "scans"));
  RunConfig rc = desk_config(kC9Iterations, 9);
  rc.train.points_per_iter = 512;
  write_config(rc, dir / "run.toml");
  for (const char* name : {"a", "b"})
    cli("--threads 1 train --config " + quote(dir / "run.toml") + " --scans " + quote(dir / "scans") + " --out " +
        quote(dir / (std::string(name) + ".ckpt")));
  const bool ckpt_same = read_file(dir / "a.ckpt") == read_file(dir / "b.ckpt");
  const bool trace_same = read_file(dir / "a.ckpt.loss.csv") == read_file(dir / "b.ckpt.loss.csv");
  save_checkpoint(load_checkpoint(dir / "a.ckpt"), dir / "c.ckpt");
  const bool round_trip = read_file(dir / "a.ckpt") == read_file(dir / "c.ckpt");
  return {ckpt_same && trace_same && round_trip,
          std::string("checkpoints ") + (ckpt_same ? "identical" : "DIFFER") + ", loss traces " +
              (trace_same ? "identical" : "DIFFER") + ", save/load " + (round_trip ? "byte-identical" : "DIFFERS")};
}

Result criterion10(const Pipeline& p) {
  if (!p.ok) return {false, "pipeline failed: " + p.error};
  const bool pass = p.seconds < kC10Seconds && p.final_watertight && p.final_colored && p.pngs == 8;
  return {pass, "pipeline " + fmt(p.seconds) + " s, final mesh " + (p.final_watertight ? "watertight" : "OPEN") +
                    (p.final_colored ? " and colored" : " without colors") + ", " + std::to_string(p.pngs) +
                    " turntable PNGs"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  fs::path cli_path;
  fs::path work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--cli", cli_path, "Path to the cbav executable")->required();
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  set_log_quiet(true);

  fs::create_directories(work);
  const Cli cli(fs::absolute(cli_path), fs::absolute(work / "cli.log"));
  std::ofstream(work / "cli.log", std::ios::trunc);
  auto wanted = [&](int id) { return only.empty() || std::count(only.begin(), only.end(), id); };

  const std::map<int, std::string> names{
      {1, "closest-point oracle"}, {2, "gradient suite"},     {3, "analytic geometry"},
      {4, "overfit experiment"},   {5, "inversion experiment"}, {6, "update locality"},
      {7, "editing audits"},       {8, "PCA suite"},           {9, "reproducibility"},
      {10, "end-to-end pipeline"}};
  std::map<int, Result> results;
  auto run = [&](int id, const std::function<Result()>& fn) {
    if (!wanted(id)) return;
    Result r;
    try {
      r = fn();
    } catch (const std::exception& e) {
      r = {false, std::string("error: ") + e.what()};
    }
    results[id] = r;
    std::printf("criterion %2d %-22s %s  %s\n", id, names.at(id).c_str(), r.pass ? "PASS" : "FAIL", r.detail.c_str());
    std::fflush(stdout);
  };

  run(1, criterion1);
  run(2, criterion2);
  run(3, criterion3);
  run(6, criterion6);
  run(9, [&] { return criterion9(cli, fs::absolute(work / "c9")); });
  run(4, [&] { return criterion4(cli, fs::absolute(work / "c4")); });
  Pipeline pipeline;
  if (wanted(5) || wanted(7) || wanted(8) || wanted(10)) pipeline = run_pipeline(cli, fs::absolute(work / "pipeline"));
  run(5, [&] { return criterion5(pipeline); });
  run(7, [&] { return criterion7(pipeline); });
  run(8, [&] { return criterion8(pipeline); });
  run(10, [&] { return criterion10(pipeline); });

  int passed = 0;
  for (const auto& [id, r] : results) passed += r.pass;
  std::printf("%d/%zu criteria passed\n", passed, results.size());
  return passed == static_cast<int>(results.size()) ? 0 : 1;
}
