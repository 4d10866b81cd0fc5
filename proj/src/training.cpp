#include "cbav/training.hpp"

#include "cbav/adversarial.hpp"
#include "cbav/errors.hpp"
#include "cbav/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>

namespace cbav {

namespace {

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

void rng_from_string(std::mt19937_64& rng, const std::string& state) {
  std::istringstream in(state);
  in >> rng;
  if (!in) throw DataError("corrupt random generator state");
}

Vec3 palette_pick(std::mt19937_64& rng, const std::vector<Vec3>& palette) {
  std::uniform_int_distribution<std::size_t> pick(0, palette.size() - 1);
  return palette[pick(rng)];
}

Vec3 jitter(const Vec3& c, std::mt19937_64& rng, double amount) {
  std::uniform_real_distribution<double> u(-amount, amount);
  return (c + Vec3(u(rng), u(rng), u(rng))).cwiseMax(0.0).cwiseMin(1.0);
}

// Distance from each vertex to the nearest vertex of a surface facing it.
std::vector<double> facing_clearance(const TemplateMesh& mesh, const Points& normals) {
  const int m = mesh.num_vertices();
  std::vector<double> out(m, std::numeric_limits<double>::infinity());
  parallel_for(m, [&](std::size_t begin, std::size_t end) {
    for (std::size_t v = begin; v < end; ++v) {
      const Vec3 p = mesh.vertex(static_cast<int>(v));
      const Vec3 n = normals.row(v).transpose();
      double best = std::numeric_limits<double>::infinity();
      for (int w = 0; w < m; ++w) {
        const Vec3 q = mesh.vertex(w);
        const Vec3 d = q - p;
        if (n.dot(normals.row(w).transpose()) >= -0.5 || d.dot(n) <= 0.0) continue;
        best = std::min(best, d.norm());
      }
      out[v] = best;
    }
  });
  return out;
}

}  // namespace

std::vector<SamplePoint> PointSet::to_samples() const {
  std::vector<SamplePoint> out(size());
  for (int i = 0; i < size(); ++i)
    out[i] = {x.row(i).transpose(), s[i], c.row(i).transpose(), n.row(i).transpose()};
  return out;
}

TrainConfig TrainConfig::paper() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.feature_dim = 8;
  c.points_per_iter = 2048;
  c.batch_subjects = 2;
  c.epochs = 0;
  c.iterations = 1000;
  c.patches_per_step = 2;
  c.patch_size = 32;
  c.image_size = 256;
  c.adv_every = 10;
  return c;
}

int TrainConfig::total_iterations(int num_subjects) const {
  if (iterations > 0) return iterations;
  const int per_epoch = (num_subjects + batch_subjects - 1) / std::max(1, batch_subjects);
  return epochs * std::max(1, per_epoch);
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("invalid training configuration: ") + what);
  };
  for (double l : {lambda_n, lambda_sdf, lambda_rgb, lambda_reg, lambda_r1, lambda_adv})
    require(l >= 0.0 && std::isfinite(l), "loss weights must be finite and non-negative");
  require(lr > 0.0, "lr must be positive");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1 must be in [0, 1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2 must be in [0, 1)");
  require(adam_eps > 0.0, "adam_eps must be positive");
  require(points_per_iter >= 1, "points_per_iter must be >= 1");
  require(batch_subjects >= 1, "batch_subjects must be >= 1");
  require(epochs >= 0 && iterations >= 0, "epochs and iterations must be >= 0");
  require(checkpoint_every >= 0, "checkpoint_every must be >= 0");
  require(feature_dim >= 1, "feature_dim must be >= 1");
  require(hidden_width >= 1, "hidden_width must be >= 1");
  require(pca_dim_geometry >= 1 && pca_dim_texture >= 1, "PCA dimensions must be >= 1");
  require(shell_narrow >= 0.0 && shell_wide >= 0.0, "shell widths must be >= 0");
  require(free_fraction >= 0.0 && free_fraction < 1.0, "free_fraction must be in [0, 1)");
  require(free_fraction == 0.0 || shell_wide > 0.0, "free samples need shell_wide > 0");
  require(fd_eps > 0.0, "fd_eps must be positive");
  require(adv_every >= 1, "adv_every must be >= 1");
  require(patches_per_step >= 1, "patches_per_step must be >= 1");
  require(patch_size >= 2 && image_size >= patch_size, "patch_size must be in [2, image_size]");
  require(ray_steps >= 2, "ray_steps must be >= 2");
  require(ray_refine >= 0, "ray_refine must be >= 0");
  require(ring_radius > 0.0, "ring_radius must be positive");
  require(camera_fov > 0.0 && camera_fov < std::numbers::pi, "camera_fov must be in (0, pi)");
}

Scan synth_scan(const TemplateMesh& tmpl, std::uint64_t seed, double amplitude) {
  validate(tmpl);
  std::mt19937_64 rng(seed);
  const double diag = bbox_diagonal(tmpl);
  const Points normals = vertex_normals(tmpl);

  struct Wave {
    Vec3 k;
    double phase;
    double weight;
  };
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<Wave> waves;
  double weight_sum = 0.0;
  for (int i = 0; i < 8; ++i) {
    Vec3 dir(gauss(rng), gauss(rng), gauss(rng));
    dir.normalize();
    const double wavelength = diag * (0.12 + 0.3 * uniform(rng));
    const double w = 0.5 + uniform(rng);
    waves.push_back({dir * (2.0 * std::numbers::pi / wavelength), 2.0 * std::numbers::pi * uniform(rng), w});
    weight_sum += w;
  }

  Scan scan;
  scan.mesh = tmpl;
  scan.pose = PoseParams::identity(tmpl);
  const int m = tmpl.num_vertices();
  if (amplitude > 0.0) {
    const std::vector<double> clearance = facing_clearance(tmpl, normals);
    for (int v = 0; v < m; ++v) {
      const Vec3 p = tmpl.vertex(v);
      double noise = 0.0;
      for (const auto& w : waves) noise += w.weight * std::sin(w.k.dot(p) + w.phase);
      noise /= weight_sum;
      const double peak = std::min(amplitude * diag, 0.25 * clearance[v]);
      scan.mesh.vertices.row(v) += peak * (0.5 + 0.5 * noise) * normals.row(v);
    }
  }

  // Procedural clothing colors.
  const std::vector<Vec3> skins{{0.96, 0.80, 0.69}, {0.87, 0.67, 0.53}, {0.72, 0.53, 0.40},
                                {0.55, 0.38, 0.26}, {0.38, 0.25, 0.17}};
  const std::vector<Vec3> shirts{{0.80, 0.12, 0.12}, {0.12, 0.35, 0.75}, {0.15, 0.60, 0.25}, {0.92, 0.80, 0.20},
                                 {0.55, 0.20, 0.60}, {0.95, 0.95, 0.95}, {0.10, 0.10, 0.12}};
  const std::vector<Vec3> pants{{0.15, 0.20, 0.40}, {0.25, 0.25, 0.25}, {0.45, 0.35, 0.22}, {0.05, 0.05, 0.08},
                                {0.50, 0.55, 0.45}};
  const std::vector<Vec3> hairs{{0.10, 0.07, 0.05}, {0.35, 0.22, 0.12}, {0.75, 0.60, 0.30}, {0.60, 0.60, 0.60}};
  const Vec3 skin = jitter(palette_pick(rng, skins), rng, 0.03);
  const Vec3 shirt = jitter(palette_pick(rng, shirts), rng, 0.05);
  const Vec3 stripe = jitter(Vec3::Ones() - shirt, rng, 0.1);
  const Vec3 pant = jitter(palette_pick(rng, pants), rng, 0.04);
  const Vec3 hair = palette_pick(rng, hairs);
  const Vec3 shoe = jitter(Vec3(0.12, 0.1, 0.08), rng, 0.05);
  const Vec3 logo = jitter(Vec3(0.95, 0.85, 0.1), rng, 0.05);
  const bool striped = uniform(rng) < 0.6;
  const double stripe_width = 0.03 + 0.04 * uniform(rng);
  const bool long_sleeves = uniform(rng) < 0.5;

  const Eigen::AlignedBox3d box = bounding_box(tmpl);
  const double height = box.sizes().y();
  scan.mesh.vertex_colors.resize(m, 3);
  const bool humanoid = tmpl.num_joints() == 16;
  for (int v = 0; v < m; ++v) {
    const Vec3 p = tmpl.vertex(v);
    const double rel = (p.y() - box.min().y()) / height;
    int region = 0;  // 0 skin, 1 shirt, 2 pants, 3 shoes, 4 hair
    if (humanoid) {
      Eigen::Index j = 0;
      tmpl.skinning_weights.row(v).maxCoeff(&j);
      switch (j) {
        case 1: case 4: case 7: region = 1; break;
        case 5: case 8: region = long_sleeves ? 1 : 0; break;
        case 0: case 10: case 11: case 13: case 14: region = 2; break;
        case 12: case 15: region = 3; break;
        case 3: region = (p.y() > 0.66 || p.z() < -0.03) ? 4 : 0; break;
        default: region = 0;
      }
    } else {
      region = rel > 0.85 ? 4 : (rel > 0.5 ? 1 : (rel > 0.1 ? 2 : 3));
    }
    Vec3 c = skin;
    switch (region) {
      case 1: {
        c = shirt;
        if (striped && static_cast<long>(std::floor(p.y() / stripe_width)) % 2 == 0) c = stripe;
        const Vec3 rel_chest = (p - box.center()).cwiseQuotient(box.sizes());
        // Off-center chest logo so the front and back of a subject differ.
        if (p.z() > 0.0 && rel_chest.x() > 0.01 && rel_chest.x() < 0.08 && rel_chest.y() > 0.14 &&
            rel_chest.y() < 0.22)
          c = logo;
        break;
      }
      case 2: c = pant; break;
      case 3: c = shoe; break;
      case 4: c = hair; break;
      default: break;
    }
    scan.mesh.vertex_colors.row(v) = c.transpose();
  }
  return scan;
}

ScanSampler::ScanSampler(const TemplateMesh& scan_mesh) {
  if (scan_mesh.num_faces() == 0) throw DataError("scan has no faces");
  if (!is_watertight(scan_mesh)) throw DataError("scan mesh is not watertight; signed distances are undefined");
  accel_ = AccelStructure(scan_mesh);
  colors_ = scan_mesh.has_colors() ? scan_mesh.vertex_colors : Points(Points::Ones(scan_mesh.num_vertices(), 3));
  normals_ = vertex_normals(scan_mesh);
  area_cdf_.resize(scan_mesh.num_faces());
  double total = 0.0;
  for (int f = 0; f < scan_mesh.num_faces(); ++f) {
    total += accel_.face_area(f);
    area_cdf_[f] = total;
  }
  diagonal_ = bbox_diagonal(scan_mesh);
  const Eigen::AlignedBox3d tight = bounding_box(scan_mesh);
  const Vec3 grow = Vec3::Constant(0.25 * tight.sizes().maxCoeff());
  free_box_ = Eigen::AlignedBox3d(tight.min() - grow, tight.max() + grow);
}

Points ScanSampler::surface_points(int n, std::mt19937_64& rng, Points* normals) const {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Points out(n, 3);
  if (normals) normals->resize(n, 3);
  const double total = area_cdf_.back();
  for (int i = 0; i < n; ++i) {
    const double r = u(rng) * total;
    const int f = static_cast<int>(std::min<std::ptrdiff_t>(
        std::upper_bound(area_cdf_.begin(), area_cdf_.end(), r) - area_cdf_.begin(), area_cdf_.size() - 1));
    const double r1 = std::sqrt(u(rng));
    const double r2 = u(rng);
    const Vec3 a = accel_.vertex(accel_.faces()(f, 0));
    const Vec3 b = accel_.vertex(accel_.faces()(f, 1));
    const Vec3 c = accel_.vertex(accel_.faces()(f, 2));
    out.row(i) = ((1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c).transpose();
    if (normals) normals->row(i) = accel_.face_normal(f).transpose();
  }
  return out;
}

PointSet ScanSampler::sample(int n, std::mt19937_64& rng, double narrow, double wide, double free_fraction) const {
  if (n < 0) throw std::invalid_argument("ScanSampler::sample: negative count");
  if (!(free_fraction >= 0.0 && free_fraction < 1.0))
    throw std::invalid_argument("ScanSampler::sample: free_fraction must be in [0, 1)");
  const int num_free = static_cast<int>(std::floor(free_fraction * n));
  if (num_free > 0 && !(wide > 0.0)) throw std::invalid_argument("ScanSampler::sample: free samples need a wide shell");
  const int shell = n - num_free;
  Points x(n, 3);
  x.topRows(shell) = surface_points(shell, rng);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int half = (shell + 1) / 2;
  for (int i = 0; i < shell; ++i) {
    const double sigma = (i < half ? narrow : wide) * diagonal_;
    if (sigma <= 0.0) continue;
    Vec3 offset;
    do {
      offset = sigma * Vec3(gauss(rng), gauss(rng), gauss(rng));
    } while (offset.norm() > 3.0 * sigma);
    x.row(i) += offset.transpose();
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = shell; i < n; ++i)
    for (int k = 0; k < 3; ++k) x(i, k) = free_box_.min()[k] + u(rng) * free_box_.sizes()[k];
  PointSet out = label(x);
  out.num_free = num_free;
  const double reach = 3.0 * wide * diagonal_;
  for (int i = shell; i < n; ++i) out.s[i] = std::clamp(out.s[i], -reach, reach);
  return out;
}

PointSet ScanSampler::label(const Points& x) const {
  const int n = static_cast<int>(x.rows());
  PointSet out;
  out.x = x;
  out.s.resize(n);
  out.c.resize(n, 3);
  out.n.resize(n, 3);
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const Vec3 p = x.row(i).transpose();
      const ClosestPoint cp = closest_point(accel_, p);
      const LocalQuery q = local_coords(accel_, cp, p);
      out.s[i] = q.uvd[2];
      const Vec3 w(cp.bary[0], cp.bary[1], 1.0 - cp.bary[0] - cp.bary[1]);
      Vec3 c = Vec3::Zero();
      Vec3 nrm = Vec3::Zero();
      for (int k = 0; k < 3; ++k) {
        const int vid = accel_.faces()(cp.face, k);
        c += w[k] * colors_.row(vid).transpose();
        nrm += w[k] * normals_.row(vid).transpose();
      }
      const double len = nrm.norm();
      out.c.row(i) = c.cwiseMax(0.0).cwiseMin(1.0).transpose();
      out.n.row(i) = (len > 1e-12 ? Vec3(nrm / len) : accel_.face_normal(cp.face)).transpose();
    }
  });
  return out;
}

std::vector<SamplePoint> sample_points(const Scan& scan, int n, std::uint64_t seed, double narrow, double wide) {
  ScanSampler sampler(scan.mesh);
  std::mt19937_64 rng(seed);
  return sampler.sample(n, rng, narrow, wide).to_samples();
}

Loss3d loss_3d(const Eigen::VectorXd& s, const Eigen::VectorXd& s_fd, const Points& c, const PointSet& gt,
               double fd_eps, const TrainConfig& config) {
  const int n = gt.size();
  if (s.size() != n || s_fd.size() != 6 * n || c.rows() != n)
    throw std::invalid_argument("loss_3d: prediction and ground-truth shapes disagree");
  if (gt.num_free < 0 || gt.num_free > n) throw std::invalid_argument("loss_3d: bad free-sample count");
  if (!(fd_eps > 0.0)) throw std::invalid_argument("loss_3d: fd_eps must be positive");
  Loss3d out;
  out.grad_s = Eigen::VectorXd::Zero(n);
  out.grad_fd = Eigen::VectorXd::Zero(6 * n);
  out.grad_c = Points::Zero(n, 3);
  if (n == 0) return out;
  const double inv_n = 1.0 / n;
  const Points grads = fd_gradients(s_fd, n, fd_eps);
  for (int i = 0; i < n; ++i) {
    const double e = gt.s[i] - s[i];
    out.sdf_l1 += std::abs(e);
    out.grad_s[i] = -config.lambda_sdf * sign(e) * inv_n;
    if (i >= n - gt.num_free) continue;

    const double r = 1.0 - gt.n.row(i).dot(grads.row(i));
    out.normal_l1 += std::abs(r);
    const double scale = -config.lambda_sdf * config.lambda_n * sign(r) * inv_n / (2.0 * fd_eps);
    for (int k = 0; k < 3; ++k) {
      out.grad_fd[2 * k * n + i] = scale * gt.n(i, k);
      out.grad_fd[(2 * k + 1) * n + i] = -scale * gt.n(i, k);
    }

    for (int k = 0; k < 3; ++k) {
      const double ec = gt.c(i, k) - c(i, k);
      out.l_rgb += std::abs(ec);
      out.grad_c(i, k) = -config.lambda_rgb * sign(ec) * inv_n;
    }
  }
  out.sdf_l1 *= inv_n;
  out.normal_l1 *= inv_n;
  out.l_rgb *= inv_n;
  out.l_sdf = out.sdf_l1 + config.lambda_n * out.normal_l1;
  out.total = config.lambda_sdf * out.l_sdf + config.lambda_rgb * out.l_rgb;
  return out;
}

RegLoss loss_reg(const Dictionary& shape, const Dictionary& color) {
  std::vector<int> rows(shape.size());
  for (int i = 0; i < shape.size(); ++i) rows[i] = i;
  if (color.size() != shape.size()) throw std::invalid_argument("loss_reg: dictionaries differ in size");
  return loss_reg_rows(shape, color, rows);
}

RegLoss loss_reg_rows(const Dictionary& shape, const Dictionary& color, const std::vector<int>& rows) {
  RegLoss out;
  out.grad_shape = RowMatrix::Zero(shape.entries.rows(), shape.entries.cols());
  out.grad_color = RowMatrix::Zero(color.entries.rows(), color.entries.cols());
  auto term = [&rows](const Dictionary& d, RowMatrix& grad) {
    double sq = 0.0;
    for (int r : rows) {
      if (r < 0 || r >= d.size()) throw std::out_of_range("loss_reg: row index out of range");
      sq += d.entries.row(r).squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (norm > 0.0)
      for (int r : rows) grad.row(r) = d.entries.row(r) / norm;
    return norm;
  };
  out.value = term(shape, out.grad_shape) + term(color, out.grad_color);
  return out;
}

void adam_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grads, AdamState& state,
               const AdamConfig& config) {
  if (grads.size() != params.size()) throw std::invalid_argument("adam_step: gradient size mismatch");
  if (state.m.size() == 0 && state.v.size() == 0) {
    state.m = Eigen::VectorXd::Zero(params.size());
    state.v = Eigen::VectorXd::Zero(params.size());
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("adam_step: optimizer state size mismatch");
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
  }
}

Model init_model(const TemplateMesh& tmpl, int num_subjects, const TrainConfig& config) {
  config.validate();
  if (num_subjects < 1) throw DataError("training needs at least one scan");
  std::mt19937_64 rng(config.seed);
  const std::uint64_t s_shape = rng();
  const std::uint64_t s_color = rng();
  const std::uint64_t s_dec = rng();
  const std::uint64_t s_disc = rng();
  Model model;
  model.template_hash = template_hash(tmpl);
  const int m = tmpl.num_vertices();
  const int f = config.feature_dim;
  model.shape = init_dictionary(num_subjects, m, f, s_shape, FeatureKind::geometry);
  model.color = init_dictionary(num_subjects, m, f, s_color, FeatureKind::texture);
  model.decoders = make_decoders(f, s_dec, config.hidden_width);
  model.has_discriminators = config.adversarial;
  if (config.adversarial) {
    model.disc_color = make_discriminator(config.patch_size, s_disc);
    model.disc_normal = make_discriminator(config.patch_size, s_disc + 1);
  }
  model.pca_dim_geometry = config.pca_dim_geometry;
  model.pca_dim_texture = config.pca_dim_texture;
  model.rng_state = rng_to_string(rng);
  return model;
}

FieldPass forward_pass(const AccelStructure& accel, const Codebook& cb, const Decoders& decoders, const Points& x,
                       double fd_eps, bool with_sdf, bool with_color) {
  FieldPass pass;
  pass.with_sdf = with_sdf;
  pass.with_color = with_color;
  const Eigen::Index n = x.rows();
  pass.queries = prepare_queries(accel, x);
  if (with_sdf) {
    pass.fd_queries = prepare_queries(accel, fd_offsets(x, fd_eps));
    Eigen::MatrixXd in(cb.feature_dim + kEncodedWidth, 7 * n);
    in.leftCols(n) = decoder_inputs(pass.queries, cb, FeatureKind::geometry);
    in.rightCols(6 * n) = decoder_inputs(pass.fd_queries, cb, FeatureKind::geometry);
    const Eigen::MatrixXd out = decoders.sdf.forward(in, pass.sdf_tape);
    pass.s = out.row(0).head(n).transpose();
    pass.s_fd = out.row(0).tail(6 * n).transpose();
  }
  if (with_color) {
    const Eigen::MatrixXd out =
        decoders.color.forward(decoder_inputs(pass.queries, cb, FeatureKind::texture), pass.color_tape);
    pass.c = out.transpose();
  }
  return pass;
}

PassGradient backward_pass(const FieldPass& pass, const Decoders& decoders, int num_vertices,
                           const Eigen::VectorXd& grad_s, const Eigen::VectorXd& grad_fd, const Points& grad_c) {
  const int f = decoders.feature_dim();
  const int n = pass.queries.size();
  PassGradient g;
  g.codebook = Eigen::MatrixXd::Zero(num_vertices, 2 * f);
  if (pass.with_sdf) {
    Eigen::MatrixXd go(1, 7 * n);
    go.row(0).head(n) = grad_s.transpose();
    go.row(0).tail(6 * n) = grad_fd.transpose();
    g.sdf = decoders.sdf.backward(pass.sdf_tape, go);
    scatter_feature_grad(pass.queries, g.sdf.input.leftCols(n), FeatureKind::geometry, f, g.codebook);
    scatter_feature_grad(pass.fd_queries, g.sdf.input.rightCols(6 * n), FeatureKind::geometry, f, g.codebook);
    g.sdf.input.resize(0, 0);
  }
  if (pass.with_color) {
    g.color = decoders.color.backward(pass.color_tape, Eigen::MatrixXd(grad_c.transpose()));
    scatter_feature_grad(pass.queries, g.color.input, FeatureKind::texture, f, g.codebook);
    g.color.input.resize(0, 0);
  }
  return g;
}

Trainer::Trainer(const TemplateMesh& tmpl, std::vector<Scan> scans, const TrainConfig& config)
    : template_(tmpl), scans_(std::move(scans)), config_(config) {
  model_ = init_model(template_, static_cast<int>(scans_.size()), config_);
  setup();
}

Trainer::Trainer(const TemplateMesh& tmpl, std::vector<Scan> scans, const TrainConfig& config, Model resume)
    : template_(tmpl), scans_(std::move(scans)), config_(config), model_(std::move(resume)) {
  config_.validate();
  if (model_.template_hash != template_hash(template_))
    throw DataError("checkpoint was trained on a different template");
  if (model_.num_subjects() != static_cast<int>(scans_.size()))
    throw DataError("checkpoint dictionary size does not match the number of scans");
  if (model_.feature_dim() != config_.feature_dim)
    throw ConfigError("feature_dim differs from the checkpoint");
  if (config_.adversarial && !model_.has_discriminators)
    throw ConfigError("checkpoint has no discriminators; adversarial training cannot resume from it");
  setup();
}

Trainer::~Trainer() = default;

void Trainer::setup() {
  validate(template_);
  const int n = static_cast<int>(scans_.size());
  if (n == 0) throw DataError("training needs at least one scan");
  scan_of_subject_.assign(n, -1);
  for (int k = 0; k < n; ++k) {
    const int id = scans_[k].subject_id;
    if (id < 0 || id >= n) throw DataError("scan subject_id out of range [0, N)");
    if (scan_of_subject_[id] >= 0) throw DataError("duplicate scan subject_id " + std::to_string(id));
    scan_of_subject_[id] = k;
  }
  rng_from_string(rng_, model_.rng_state);
  samplers_.clear();
  posed_.clear();
  posed_meshes_.clear();
  for (int id = 0; id < n; ++id) {
    const Scan& scan = scans_[scan_of_subject_[id]];
    samplers_.push_back(std::make_unique<ScanSampler>(scan.mesh));
    try {
      posed_meshes_.push_back(skin(template_, scan.pose));
    } catch (const std::invalid_argument& e) {
      throw DataError(std::string("scan pose does not fit the template: ") + e.what());
    }
    posed_.push_back(std::make_unique<AccelStructure>(posed_meshes_.back()));
  }
  if (config_.adversarial) {
    if (n < 2) throw ConfigError("adversarial training needs at least two scans for PCA sampling");
    std::vector<Scan> ordered;
    for (int id = 0; id < n; ++id) ordered.push_back(scans_[scan_of_subject_[id]]);
    adversarial_ = std::make_unique<AdversarialBranch>(config_, ordered, posed_meshes_);
  }
}

const AccelStructure& Trainer::posed_accel(int subject) const { return *posed_.at(subject); }

void Trainer::check_finite(const IterationStats& stats) const {
  for (double v : {stats.l_sdf, stats.l_rgb, stats.l_reg, stats.l_adv, stats.total})
    if (!std::isfinite(v)) {
      std::ostringstream msg;
      msg << "non-finite loss at iteration " << stats.iteration << " (L_sdf=" << stats.l_sdf
          << ", L_rgb=" << stats.l_rgb << ", L_reg=" << stats.l_reg << ", L_adv=" << stats.l_adv << ")";
      throw NumericError(msg.str());
    }
}

IterationStats Trainer::step() {
  const int n_subjects = model_.num_subjects();
  const int m = model_.num_vertices();
  const int f = model_.feature_dim();
  IterationStats stats;
  stats.iteration = model_.iteration;

  // Batch: partial Fisher-Yates over subject ids.
  const int b = std::min(config_.batch_subjects, n_subjects);
  std::vector<int> ids(n_subjects);
  for (int i = 0; i < n_subjects; ++i) ids[i] = i;
  for (int i = 0; i < b; ++i) {
    std::uniform_int_distribution<int> pick(i, n_subjects - 1);
    std::swap(ids[i], ids[pick(rng_)]);
  }
  stats.batch.assign(ids.begin(), ids.begin() + b);
  std::sort(stats.batch.begin(), stats.batch.end());

  RowMatrix grad_shape = RowMatrix::Zero(n_subjects, static_cast<Eigen::Index>(m) * f);
  RowMatrix grad_color = RowMatrix::Zero(n_subjects, static_cast<Eigen::Index>(m) * f);
  Decoder::Gradient grad_sdf;
  Decoder::Gradient grad_rgb;

  const int total_points = config_.points_per_iter;
  for (int k = 0; k < b; ++k) {
    const int id = stats.batch[k];
    const int count = total_points / b + (k < total_points % b ? 1 : 0);
    std::mt19937_64 point_rng(rng_());
    const PointSet gt =
      samplers_[id]->sample(count, point_rng, config_.shell_narrow, config_.shell_wide, config_.free_fraction);
    const Codebook cb = codebook_from(model_.shape, model_.color, id);
    const FieldPass pass = forward_pass(*posed_[id], cb, model_.decoders, gt.x, config_.fd_eps);
    const Loss3d loss = loss_3d(pass.s, pass.s_fd, pass.c, gt, config_.fd_eps, config_);
    const double w = static_cast<double>(count) / total_points;
    const PassGradient g =
        backward_pass(pass, model_.decoders, m, w * loss.grad_s, w * loss.grad_fd, Points(w * loss.grad_c));
    Codebook gcb(m, f);
    gcb.features = g.codebook;
    grad_shape.row(id) += flatten(gcb, FeatureKind::geometry).transpose();
    grad_color.row(id) += flatten(gcb, FeatureKind::texture).transpose();
    grad_sdf.add(g.sdf);
    grad_rgb.add(g.color);
    stats.l_sdf += w * loss.l_sdf;
    stats.l_rgb += w * loss.l_rgb;
  }

  const RegLoss reg = loss_reg_rows(model_.shape, model_.color, stats.batch);
  stats.l_reg = reg.value;
  grad_shape += config_.lambda_reg * reg.grad_shape;
  grad_color += config_.lambda_reg * reg.grad_color;
  stats.total = config_.lambda_sdf * stats.l_sdf + config_.lambda_rgb * stats.l_rgb + config_.lambda_reg * stats.l_reg;

  if (adversarial_ && model_.iteration % config_.adv_every == 0) {
    std::vector<const AccelStructure*> accels;
    for (const auto& a : posed_) accels.push_back(a.get());
    AdversarialBranch::Result adv = adversarial_->step(model_, rng_, accels);
    stats.l_adv = adv.g_loss;
    stats.total += config_.lambda_adv * adv.g_loss;
    grad_shape += config_.lambda_adv * adv.grad_shape;
    grad_color += config_.lambda_adv * adv.grad_color;
    for (auto pair : {std::make_pair(&grad_sdf, &adv.sdf), std::make_pair(&grad_rgb, &adv.color)}) {
      for (auto& l : pair.second->layers) {
        l.weight *= config_.lambda_adv;
        l.bias *= config_.lambda_adv;
      }
      pair.first->add(*pair.second);
    }
  }

  check_finite(stats);
  if (!grad_shape.allFinite() || !grad_color.allFinite())
    throw NumericError("non-finite dictionary gradient at iteration " + std::to_string(stats.iteration));

  const AdamConfig adam{config_.lr, config_.adam_beta1, config_.adam_beta2, config_.adam_eps};
  adam_step(Eigen::Map<Eigen::VectorXd>(model_.shape.entries.data(), model_.shape.entries.size()),
            Eigen::Map<const Eigen::VectorXd>(grad_shape.data(), grad_shape.size()), model_.adam_shape, adam);
  adam_step(Eigen::Map<Eigen::VectorXd>(model_.color.entries.data(), model_.color.entries.size()),
            Eigen::Map<const Eigen::VectorXd>(grad_color.data(), grad_color.size()), model_.adam_color, adam);
  for (auto [net, grad, state] : {std::make_tuple(&model_.decoders.sdf, &grad_sdf, &model_.adam_sdf),
                                  std::make_tuple(&model_.decoders.color, &grad_rgb, &model_.adam_rgb)}) {
    Eigen::VectorXd p = net->pack();
    const Eigen::VectorXd g = grad->pack();
    if (!g.allFinite())
      throw NumericError("non-finite decoder gradient at iteration " + std::to_string(stats.iteration));
    adam_step(p, g, *state, adam);
    net->unpack(p);
  }
  ++model_.iteration;
  return stats;
}

void Trainer::run(std::int64_t total_iterations, const std::function<void(const Trainer&)>& checkpoint_sink,
                  std::ostream* csv) {
  if (csv && model_.iteration == 0) write_loss_header(*csv);
  std::int64_t last_sink = -1;
  while (model_.iteration < total_iterations) {
    const IterationStats stats = step();
    if (csv) write_loss_row(*csv, stats);
    if (config_.checkpoint_every > 0 && model_.iteration % config_.checkpoint_every == 0) {
      std::ostringstream msg;
      msg << "iteration " << model_.iteration << ": L_sdf " << stats.l_sdf << ", L_rgb " << stats.l_rgb
          << ", L_reg " << stats.l_reg << ", L_adv " << stats.l_adv;
      log_info(msg.str());
      if (checkpoint_sink) checkpoint_sink(*this);
      last_sink = model_.iteration;
    }
  }
  if (checkpoint_sink && last_sink != model_.iteration) checkpoint_sink(*this);
}

Model Trainer::snapshot() const {
  Model out = model_;
  out.rng_state = rng_to_string(rng_);
  return out;
}

void write_loss_header(std::ostream& out) { out << "iteration,L_sdf,L_rgb,L_reg,L_adv\n"; }

void write_loss_row(std::ostream& out, const IterationStats& stats) {
  out << stats.iteration << ',' << std::setprecision(17) << stats.l_sdf << ',' << stats.l_rgb << ',' << stats.l_reg
      << ',' << stats.l_adv << '\n';
}

}  // namespace cbav
