#include "cbav/avatar.hpp"

#include "cbav/errors.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace cbav {

namespace {

void check_template(const Model& model, const TemplateMesh& tmpl) {
  if (model.template_hash != template_hash(tmpl))
    throw DataError("template does not match the checkpoint (hash mismatch)");
  if (model.num_vertices() != tmpl.num_vertices()) throw DataError("template vertex count differs from the checkpoint");
}

void check_pose(const PoseParams& pose, const TemplateMesh& tmpl, const char* what) {
  if (pose.joint_rotations.rows() != tmpl.num_joints() || pose.shape_coeffs.size() != tmpl.num_shapes() ||
      !pose.joint_rotations.allFinite() || !pose.shape_coeffs.allFinite() || !pose.root_translation.allFinite())
    throw DataError(std::string(what) + ": pose does not match the template (" +
                    std::to_string(pose.joint_rotations.rows()) + " joints, " +
                    std::to_string(pose.shape_coeffs.size()) + " shape coefficients)");
}

Avatar blank(const Model& model, const TemplateMesh& tmpl, Provenance provenance, std::int64_t source) {
  Avatar a;
  a.codebook = Codebook(tmpl.num_vertices(), model.feature_dim());
  a.pose = PoseParams::identity(tmpl);
  a.template_hash = model.template_hash;
  a.checkpoint_hash = decoder_hash(model.decoders);
  a.provenance = provenance;
  a.source = source;
  return a;
}

Eigen::Map<Eigen::VectorXd> texture_block(Codebook& cb) {
  const Eigen::Index count = static_cast<Eigen::Index>(cb.num_vertices()) * cb.feature_dim;
  return {cb.features.data() + count, count};
}

AdamConfig adam_of(const TrainConfig& c) { return {c.lr, c.adam_beta1, c.adam_beta2, c.adam_eps}; }

// L1 color term and its gradient for one block.
double color_l1(const Points& pred, const Points& target, double weight, Points& grad) {
  const Eigen::Index n = pred.rows();
  grad = Points::Zero(n, 3);
  if (n == 0) return 0.0;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) {
      const double e = target(i, k) - pred(i, k);
      sum += std::abs(e);
      grad(i, k) = -weight * (e > 0.0 ? 1.0 : (e < 0.0 ? -1.0 : 0.0)) / static_cast<double>(n);
    }
  return sum / static_cast<double>(n);
}

}  // namespace

bool Avatar::operator==(const Avatar& other) const {
  return codebook.feature_dim == other.codebook.feature_dim &&
         codebook.features.rows() == other.codebook.features.rows() &&
         codebook.features.cols() == other.codebook.features.cols() && codebook.features == other.codebook.features &&
         pose == other.pose && template_hash == other.template_hash && checkpoint_hash == other.checkpoint_hash &&
         provenance == other.provenance && source == other.source;
}

std::uint64_t decoder_hash(const Decoders& decoders) {
  std::uint64_t h = fnv1a(nullptr, 0);
  for (const Decoder* net : {&decoders.sdf, &decoders.color}) {
    const Eigen::VectorXd p = net->pack();
    const auto size = static_cast<std::int64_t>(p.size());
    h = fnv1a(&size, sizeof(size), h);
    h = fnv1a(p.data(), sizeof(double) * static_cast<std::size_t>(p.size()), h);
  }
  return h;
}

Avatar init_avatar(const Model& model, const TemplateMesh& tmpl, int index) {
  check_template(model, tmpl);
  if (index < 0 || index >= model.num_subjects())
    throw DataError("avatar index " + std::to_string(index) + " out of range [0, " +
                    std::to_string(model.num_subjects()) + ")");
  Avatar a = blank(model, tmpl, Provenance::dictionary, index);
  a.codebook = codebook_from(model.shape, model.color, index);
  return a;
}

Avatar init_avatar(const Model& model, const TemplateMesh& tmpl, std::uint64_t seed) {
  check_template(model, tmpl);
  std::mt19937_64 rng(seed);
  const std::uint64_t s_geo = rng();
  const std::uint64_t s_tex = rng();
  const PcaModel geo = pca_fit(model.shape, model.pca_dim_geometry);
  const PcaModel tex = pca_fit(model.color, model.pca_dim_texture);
  Avatar a = blank(model, tmpl, Provenance::sampled, static_cast<std::int64_t>(seed));
  assign(a.codebook, FeatureKind::geometry, pca_sample(geo, s_geo).row);
  assign(a.codebook, FeatureKind::texture, pca_sample(tex, s_tex).row);
  return a;
}

Avatar init_avatar(const Model& model, const TemplateMesh& tmpl, const Eigen::VectorXd& shape_coeffs,
                   const Eigen::VectorXd& texture_coeffs) {
  check_template(model, tmpl);
  const PcaModel geo = pca_fit(model.shape, model.pca_dim_geometry);
  const PcaModel tex = pca_fit(model.color, model.pca_dim_texture);
  if (shape_coeffs.size() != geo.dim() || texture_coeffs.size() != tex.dim())
    throw std::invalid_argument("init_avatar: coefficient count does not match the PCA models");
  Avatar a = blank(model, tmpl, Provenance::sampled, 0);
  assign(a.codebook, FeatureKind::geometry, pca_decode(geo, shape_coeffs));
  assign(a.codebook, FeatureKind::texture, pca_decode(tex, texture_coeffs));
  return a;
}

Avatar mean_avatar(const Model& model, const TemplateMesh& tmpl) {
  check_template(model, tmpl);
  Avatar a = blank(model, tmpl, Provenance::fitted, 0);
  assign(a.codebook, FeatureKind::geometry, model.shape.entries.colwise().mean().transpose());
  assign(a.codebook, FeatureKind::texture, model.color.entries.colwise().mean().transpose());
  return a;
}

AvatarScene::AvatarScene(const Avatar& avatar, const TemplateMesh& tmpl, const Decoders& decoders)
    : avatar_(&avatar), decoders_(&decoders) {
  if (avatar.template_hash != template_hash(tmpl)) throw DataError("avatar was made for a different template");
  if (avatar.codebook.num_vertices() != tmpl.num_vertices() ||
      avatar.codebook.feature_dim != decoders.feature_dim())
    throw DataError("avatar codebook does not match the template and decoders");
  check_pose(avatar.pose, tmpl, "avatar");
  posed_ = skin(tmpl, avatar.pose);
  accel_ = AccelStructure(posed_);
}

Avatar fit_codebook(const Scan& scan, const TemplateMesh& tmpl, const Model& model, const FitOptions& options,
                    FitTrace* trace) {
  check_template(model, tmpl);
  check_pose(scan.pose, tmpl, "fit");
  if (options.geometry_iterations < 0 || options.texture_iterations < 0 || options.points_per_iter < 1)
    throw ConfigError("fit: iteration counts must be non-negative and points_per_iter positive");
  Avatar avatar = mean_avatar(model, tmpl);
  avatar.pose = scan.pose;
  if (options.geometry_iterations + options.texture_iterations == 0) return avatar;

  const TrainConfig& cfg = options.losses;
  const TemplateMesh posed = skin(tmpl, scan.pose);
  const AccelStructure accel(posed);
  const ScanSampler sampler(scan.mesh);
  std::mt19937_64 rng(options.seed);
  const AdamConfig adam = adam_of(cfg);
  const int m = tmpl.num_vertices();
  Codebook& cb = avatar.codebook;

  AdamState state;
  for (int it = 0; it < options.geometry_iterations; ++it) {
    std::mt19937_64 point_rng(rng());
    const PointSet gt = sampler.sample(options.points_per_iter, point_rng, cfg.shell_narrow, cfg.shell_wide,
                                       cfg.free_fraction);
    const FieldPass pass = forward_pass(accel, cb, model.decoders, gt.x, cfg.fd_eps);
    const Loss3d loss = loss_3d(pass.s, pass.s_fd, pass.c, gt, cfg.fd_eps, cfg);
    if (!std::isfinite(loss.total)) throw NumericError("fit: non-finite loss at iteration " + std::to_string(it));
    const PassGradient g = backward_pass(pass, model.decoders, m, loss.grad_s, loss.grad_fd, loss.grad_c);
    adam_step(Eigen::Map<Eigen::VectorXd>(cb.features.data(), cb.features.size()),
              Eigen::Map<const Eigen::VectorXd>(g.codebook.data(), g.codebook.size()), state, adam);
    if (trace) trace->loss.push_back(loss.total);
  }

  AdamState tex_state;
  for (int it = 0; it < options.texture_iterations; ++it) {
    std::mt19937_64 point_rng(rng());
    const PointSet gt = sampler.sample(options.points_per_iter, point_rng, cfg.shell_narrow, cfg.shell_wide);
    const FieldPass pass = forward_pass(accel, cb, model.decoders, gt.x, cfg.fd_eps, false, true);
    Points grad_c;
    const double l_rgb = color_l1(pass.c, gt.c, cfg.lambda_rgb, grad_c);
    if (!std::isfinite(l_rgb)) throw NumericError("fit: non-finite color loss at iteration " + std::to_string(it));
    PassGradient g = backward_pass(pass, model.decoders, m, {}, {}, grad_c);
    Codebook gcb(m, cb.feature_dim);
    gcb.features = std::move(g.codebook);
    adam_step(texture_block(cb), texture_block(gcb), tex_state, adam);
    if (trace) trace->loss.push_back(cfg.lambda_rgb * l_rgb);
  }
  return avatar;
}

Avatar transfer_region(const Avatar& dst, const Avatar& src, std::span<const int> vertices, KindMask kinds) {
  if (dst.template_hash != src.template_hash) throw DataError("transfer_region: avatars use different templates");
  if (dst.codebook.feature_dim != src.codebook.feature_dim)
    throw DataError("transfer_region: avatars use different feature sizes");
  Avatar out = dst;
  out.codebook = swap_rows(dst.codebook, src.codebook, vertices, kinds);
  return out;
}

Avatar paint_texture(const Avatar& avatar, const PaintInput& paint, const TemplateMesh& tmpl, const Model& model,
                     const PaintOptions& options, FitTrace* trace) {
  check_template(model, tmpl);
  if (options.iterations < 0 || options.points_per_iter < 1)
    throw ConfigError("paint: iterations must be non-negative and points_per_iter positive");
  const Camera& cam = paint.camera;
  validate(cam);
  if (paint.image.width != cam.width || paint.image.height != cam.height)
    throw DataError("paint: image size does not match the camera");
  if (paint.mask.size() != paint.image.pixels.size()) throw DataError("paint: mask size does not match the image");

  const RasterResult raster = rasterize(paint.target, cam);
  std::vector<Vec3> xs;
  std::vector<Vec3> colors;
  std::size_t outside = 0;
  for (std::size_t i = 0; i < paint.mask.size(); ++i) {
    if (!paint.mask[i]) continue;
    if (!raster.mask[i]) {
      ++outside;
      continue;
    }
    const int f = raster.face[i];
    const Vec3& b = raster.bary[i];
    Vec3 x = Vec3::Zero();
    for (int k = 0; k < 3; ++k) x += b[k] * paint.target.vertex(paint.target.faces(f, k));
    xs.push_back(x);
    colors.push_back(paint.image.pixels[i].cast<double>().cwiseMax(0.0).cwiseMin(1.0));
  }
  if (xs.empty()) throw DataError("paint: mask covers no rendered surface");
  if (outside > 0) log_warn("paint: ignoring " + std::to_string(outside) + " masked pixels outside the surface");

  Avatar out = avatar;
  if (options.iterations == 0) return out;
  const AvatarScene scene(out, tmpl, model.decoders);
  const AdamConfig adam = adam_of(options.losses);
  const int m = tmpl.num_vertices();
  const int total = static_cast<int>(xs.size());
  const int batch = std::min(total, options.points_per_iter);
  std::vector<int> order(total);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(options.seed);
  AdamState state;
  for (int it = 0; it < options.iterations; ++it) {
    if (batch < total)
      for (int i = 0; i < batch; ++i) {
        std::uniform_int_distribution<int> pick(i, total - 1);
        std::swap(order[i], order[pick(rng)]);
      }
    Points x(batch, 3);
    Points target(batch, 3);
    for (int i = 0; i < batch; ++i) {
      x.row(i) = xs[order[i]].transpose();
      target.row(i) = colors[order[i]].transpose();
    }
    const FieldPass pass = forward_pass(scene.accel(), out.codebook, model.decoders, x, options.losses.fd_eps, false);
    Points grad_c;
    const double l_rgb = color_l1(pass.c, target, options.losses.lambda_rgb, grad_c);
    if (!std::isfinite(l_rgb)) throw NumericError("paint: non-finite loss at iteration " + std::to_string(it));
    PassGradient g = backward_pass(pass, model.decoders, m, {}, {}, grad_c);
    Codebook gcb(m, out.codebook.feature_dim);
    gcb.features = std::move(g.codebook);
    adam_step(texture_block(out.codebook), texture_block(gcb), state, adam);
    if (trace) trace->loss.push_back(l_rgb);
  }
  return out;
}

Avatar repose(const Avatar& avatar, const PoseParams& pose, const TemplateMesh& tmpl) {
  if (avatar.template_hash != template_hash(tmpl)) throw DataError("repose: avatar was made for a different template");
  check_pose(pose, tmpl, "repose");
  Avatar out = avatar;
  out.pose = pose;
  return out;
}

std::vector<int> read_vertex_set(const std::filesystem::path& path, int num_vertices) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vertex set " + path.string());
  std::vector<int> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    long long v = 0;
    if (!(ss >> v)) {
      if (line.find_first_not_of(" \t\r") != std::string::npos)
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected a vertex index");
      continue;
    }
    std::string rest;
    if (ss >> rest) throw DataError(path.string() + ":" + std::to_string(line_no) + ": one index per line");
    if (v < 0 || v >= num_vertices)
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": vertex " + std::to_string(v) +
                      " out of range");
    out.push_back(static_cast<int>(v));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void write_vertex_set(const std::vector<int>& vertices, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write vertex set " + path.string());
  for (int v : vertices) out << v << '\n';
  if (!out) throw DataError("failed writing vertex set " + path.string());
}

std::vector<int> select_vertices(const TemplateMesh& tmpl, const std::function<bool(const Vec3&)>& keep) {
  std::vector<int> out;
  for (int i = 0; i < tmpl.num_vertices(); ++i)
    if (keep(tmpl.vertex(i))) out.push_back(i);
  return out;
}

}  // namespace cbav
