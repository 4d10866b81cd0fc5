#include "cbav/adversarial.hpp"

#include "cbav/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cbav {

namespace {

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename Eval>
std::vector<std::optional<RayHit>> march(const Eval& eval, const std::vector<Ray>& rays, int steps, int refine) {
  if (steps < 2) throw std::invalid_argument("intersect_ray: steps must be >= 2");
  const std::size_t n = rays.size();
  std::vector<std::optional<RayHit>> hits(n);
  if (n == 0) return hits;
  for (const Ray& r : rays)
    if (!(r.near < r.far)) throw std::invalid_argument("intersect_ray: near must be below far");

  auto t_at = [steps](const Ray& r, int i) { return r.near + (r.far - r.near) * i / (steps - 1); };

  struct Bracket {
    std::size_t ray;
    double ta, tb, sa, sb, t;
  };
  std::vector<Bracket> open;
  // Samples are evaluated in blocks along all still-marching rays; a ray
  // leaves the set at its first sign change.
  constexpr int kBlock = 8;
  std::vector<std::size_t> active(n);
  std::vector<double> last(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) active[k] = k;
  for (int first = 0; first < steps && !active.empty(); first += kBlock) {
    const int count = std::min(kBlock, steps - first);
    Points samples(static_cast<Eigen::Index>(active.size()) * count, 3);
    for (std::size_t a = 0; a < active.size(); ++a) {
      const Ray& r = rays[active[a]];
      for (int i = 0; i < count; ++i) samples.row(a * count + i) = (r.origin + t_at(r, first + i) * r.dir).transpose();
    }
    const Eigen::VectorXd values = eval(samples);
    std::vector<std::size_t> still;
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t k = active[a];
      const Ray& r = rays[k];
      const double* s = values.data() + a * count;
      bool done = false;
      for (int i = 0; i < count && !done; ++i) {
        const int idx = first + i;
        if (idx == 0) {
          if (s[0] <= 0.0) {
            hits[k] = RayHit{r.near, r.origin + r.near * r.dir, true};
            done = true;
          }
        } else if (s[i] <= 0.0) {
          const double ta = t_at(r, idx - 1);
          const double tb = t_at(r, idx);
          const double sa = last[k];
          if (s[i] == 0.0) {
            hits[k] = RayHit{tb, r.origin + tb * r.dir, false};
          } else {
            open.push_back({k, ta, tb, sa, s[i], ta + (tb - ta) * sa / (sa - s[i])});
          }
          done = true;
        }
        last[k] = s[i];
      }
      if (!done) still.push_back(k);
    }
    active = std::move(still);
  }

  for (int round = 0; round < refine && !open.empty(); ++round) {
    Points probe(open.size(), 3);
    for (std::size_t q = 0; q < open.size(); ++q)
      probe.row(q) = (rays[open[q].ray].origin + open[q].t * rays[open[q].ray].dir).transpose();
    const Eigen::VectorXd s = eval(probe);
    std::vector<Bracket> next;
    for (std::size_t q = 0; q < open.size(); ++q) {
      Bracket b = open[q];
      if (s[q] == 0.0) {
        hits[b.ray] = RayHit{b.t, rays[b.ray].origin + b.t * rays[b.ray].dir, false};
        continue;
      }
      if (s[q] > 0.0) {
        b.ta = b.t;
        b.sa = s[q];
      } else {
        b.tb = b.t;
        b.sb = s[q];
      }
      b.t = std::clamp(b.ta + (b.tb - b.ta) * b.sa / (b.sa - b.sb), b.ta, b.tb);
      next.push_back(b);
    }
    open = std::move(next);
  }
  for (const Bracket& b : open) hits[b.ray] = RayHit{b.t, rays[b.ray].origin + b.t * rays[b.ray].dir, false};
  return hits;
}

Eigen::MatrixXd stack_inputs(const std::vector<Patch>& patches) {
  Eigen::MatrixXd out(patches.front().pixels.size(), static_cast<Eigen::Index>(patches.size()));
  for (std::size_t i = 0; i < patches.size(); ++i) out.col(i) = disc_input(patches[i]);
  return out;
}

}  // namespace

std::vector<Camera> camera_ring(const Vec3& center, double radius, const std::vector<double>& angles_deg,
                                double fov_y, int resolution) {
  if (!(radius > 0.0)) throw std::invalid_argument("camera_ring: radius must be positive");
  std::vector<Camera> out;
  for (double deg : angles_deg) {
    const double a = deg * std::numbers::pi / 180.0;
    Camera cam;
    cam.position = center + radius * Vec3(std::cos(a), 0.0, std::sin(a));
    cam.look_at = center;
    cam.up = Vec3::UnitY();
    cam.fov_y = fov_y;
    cam.width = resolution;
    cam.height = resolution;
    out.push_back(cam);
  }
  return out;
}

std::optional<RayHit> intersect_ray(const ScalarField& field, const Ray& ray, int steps, int refine) {
  auto eval = [&field](const Points& x) {
    Eigen::VectorXd v(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) v[i] = field(x.row(i).transpose());
    return v;
  };
  return march(eval, {ray}, steps, refine).front();
}

std::vector<std::optional<RayHit>> intersect_rays(const BatchField& field, const std::vector<Ray>& rays, int steps,
                                                  int refine) {
  return march(field, rays, steps, refine);
}

std::optional<std::pair<double, double>> clip_ray(const Vec3& origin, const Vec3& dir, const Eigen::AlignedBox3d& box) {
  double t0 = 0.0;
  double t1 = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 3; ++k) {
    if (dir[k] == 0.0) {
      if (origin[k] < box.min()[k] || origin[k] > box.max()[k]) return std::nullopt;
      continue;
    }
    double a = (box.min()[k] - origin[k]) / dir[k];
    double b = (box.max()[k] - origin[k]) / dir[k];
    if (a > b) std::swap(a, b);
    t0 = std::max(t0, a);
    t1 = std::min(t1, b);
  }
  if (!(t0 < t1)) return std::nullopt;
  return std::make_pair(t0, t1);
}

PatchRect patch_around(const Camera& camera, const Vec3& world, int size) {
  if (size > camera.width || size > camera.height) throw std::invalid_argument("patch larger than the image");
  const Vec3 p = camera.project(world);
  PatchRect r;
  r.size = size;
  const double px = p.z() > 0.0 && std::isfinite(p.x()) ? p.x() : 0.5 * camera.width;
  const double py = p.z() > 0.0 && std::isfinite(p.y()) ? p.y() : 0.5 * camera.height;
  r.x0 = std::clamp(static_cast<int>(std::lround(px - 0.5 * size)), 0, camera.width - size);
  r.y0 = std::clamp(static_cast<int>(std::lround(py - 0.5 * size)), 0, camera.height - size);
  return r;
}

RgbImage Patch::image() const {
  RgbImage img(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) img.at(x, y) = pixel(x, y).cast<float>();
  return img;
}

Patch crop(const RgbImage& image, const std::vector<std::uint8_t>& mask, const PatchRect& rect, PatchKind kind) {
  if (rect.x0 < 0 || rect.y0 < 0 || rect.x0 + rect.size > image.width || rect.y0 + rect.size > image.height)
    throw std::invalid_argument("crop: rectangle outside the image");
  Patch p(rect.size, kind, true);
  for (int y = 0; y < rect.size; ++y)
    for (int x = 0; x < rect.size; ++x) {
      const int i = y * rect.size + x;
      const std::size_t src = static_cast<std::size_t>(rect.y0 + y) * image.width + rect.x0 + x;
      p.mask[i] = mask[src];
      p.pixels.segment<3>(3 * i) = p.mask[i] ? Vec3(image.pixels[src].cast<double>()) : Vec3(Vec3::Constant(kBackground));
    }
  return p;
}

RenderedPatch render_patch(const TemplateMesh& posed, const AccelStructure& accel, const Codebook& cb,
                           const Decoders& decoders, const Camera& camera, const PatchRect& rect,
                           const RenderSettings& settings) {
  validate(camera);
  if (rect.x0 < 0 || rect.y0 < 0 || rect.x0 + rect.size > camera.width || rect.y0 + rect.size > camera.height)
    throw std::invalid_argument("render_patch: rectangle outside the image");
  RenderedPatch out;
  out.color = Patch(rect.size, PatchKind::color, false);
  out.normal = Patch(rect.size, PatchKind::normal, false);
  out.basis = camera.basis();
  out.fd_eps = settings.fd_eps;

  const Eigen::AlignedBox3d tight = bounding_box(posed);
  const Vec3 half = 0.5 * (1.0 + settings.margin) * tight.sizes();
  const Eigen::AlignedBox3d box(tight.center() - half, tight.center() + half);

  std::vector<Ray> rays;
  std::vector<int> ray_pixel;
  for (int y = 0; y < rect.size; ++y)
    for (int x = 0; x < rect.size; ++x) {
      const Vec3 dir = camera.pixel_ray(rect.x0 + x + 0.5, rect.y0 + y + 0.5);
      const auto span = clip_ray(camera.position, dir, box);
      if (!span) continue;
      rays.push_back({camera.position, dir, span->first, span->second});
      ray_pixel.push_back(y * rect.size + x);
    }
  const NeuralField field{&accel, &cb, &decoders};
  const auto hits = intersect_rays(field.sdf_batch_closure(), rays, settings.steps, settings.refine);

  std::vector<Vec3> points;
  for (std::size_t k = 0; k < hits.size(); ++k)
    if (hits[k]) {
      points.push_back(hits[k]->x);
      out.pixel_of_hit.push_back(ray_pixel[k]);
    }
  const int h = static_cast<int>(points.size());
  Points x(h, 3);
  for (int i = 0; i < h; ++i) x.row(i) = points[i].transpose();
  out.pass = forward_pass(accel, cb, decoders, x, settings.fd_eps);
  out.hits = x;
  out.gradients = fd_gradients(out.pass.s_fd, h, settings.fd_eps);
  for (int i = 0; i < h; ++i) {
    const int pix = out.pixel_of_hit[i];
    out.color.mask[pix] = 1;
    out.normal.mask[pix] = 1;
    out.color.pixels.segment<3>(3 * pix) = out.pass.c.row(i).transpose();
    const Vec3 g = out.gradients.row(i).transpose();
    const double len = g.norm();
    const Vec3 n = len > 0.0 ? Vec3(g / len) : Vec3(-out.basis.row(2).transpose());
    out.normal.pixels.segment<3>(3 * pix) = remap_normal(to_view_normal(camera, n));
  }
  return out;
}

PassGradient render_backward(const RenderedPatch& patch, const Decoders& decoders, int num_vertices,
                             const Eigen::VectorXd& d_color, const Eigen::VectorXd& d_normal) {
  const int h = static_cast<int>(patch.pixel_of_hit.size());
  if (d_color.size() != patch.color.pixels.size() || d_normal.size() != patch.normal.pixels.size())
    throw std::invalid_argument("render_backward: gradient size mismatch");
  Points grad_c(h, 3);
  Eigen::VectorXd grad_fd = Eigen::VectorXd::Zero(6 * h);
  Mat3 view = patch.basis;
  view.row(2) *= -1.0;
  const double inv = 1.0 / (2.0 * patch.fd_eps);
  for (int i = 0; i < h; ++i) {
    const int pix = patch.pixel_of_hit[i];
    grad_c.row(i) = d_color.segment<3>(3 * pix).transpose();
    const Vec3 g = patch.gradients.row(i).transpose();
    const double len = g.norm();
    if (len == 0.0) continue;
    const Vec3 n = g / len;
    const Vec3 dn = view.transpose() * (0.5 * d_normal.segment<3>(3 * pix));
    const Vec3 dg = (dn - n * n.dot(dn)) / len;
    for (int k = 0; k < 3; ++k) {
      grad_fd[2 * k * h + i] = dg[k] * inv;
      grad_fd[(2 * k + 1) * h + i] = -dg[k] * inv;
    }
  }
  return backward_pass(patch.pass, decoders, num_vertices, Eigen::VectorXd::Zero(h), grad_fd, grad_c);
}

RealPatchSet real_patches(const Scan& scan, const Points& joints, const std::vector<Camera>& cameras, int patch_size) {
  if (!scan.mesh.has_colors()) throw DataError("real_patches: scan has no vertex colors");
  RealPatchSet out;
  for (const Camera& cam : cameras) {
    const RasterResult r = rasterize(scan.mesh, cam);
    std::vector<Patch> colors;
    std::vector<Patch> normals;
    std::vector<PatchRect> rects;
    for (Eigen::Index j = 0; j < joints.rows(); ++j) {
      const PatchRect rect = patch_around(cam, joints.row(j).transpose(), patch_size);
      colors.push_back(crop(r.color, r.mask, rect, PatchKind::color));
      normals.push_back(crop(r.normal, r.mask, rect, PatchKind::normal));
      rects.push_back(rect);
    }
    out.color.push_back(std::move(colors));
    out.normal.push_back(std::move(normals));
    out.rects.push_back(std::move(rects));
  }
  return out;
}

Discriminator make_discriminator(int patch_size, std::uint64_t seed) {
  return Discriminator::random({3 * patch_size * patch_size, 256, 128, 1}, OutputActivation::none, seed, 0.2);
}

Eigen::VectorXd disc_input(const Patch& patch) { return 2.0 * patch.pixels.array() - 1.0; }

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

R1Result r1_penalty(const Discriminator& disc, const Eigen::MatrixXd& real) {
  if (disc.num_layers() != 3 || disc.output_dim() != 1)
    throw std::invalid_argument("r1_penalty: expects a three-layer scalar discriminator");
  if (real.rows() != disc.input_dim()) throw std::invalid_argument("r1_penalty: input width mismatch");
  const auto& layers = disc.layers();
  const Eigen::MatrixXd& w1 = layers[0].weight;
  const Eigen::MatrixXd& w2 = layers[1].weight;
  const Eigen::VectorXd w3 = layers[2].weight.row(0).transpose();
  const double slope = disc.negative_slope();
  const double inv_b = 1.0 / static_cast<double>(real.cols());
  auto mask_of = [slope](const Eigen::MatrixXd& z) {
    return z.unaryExpr([slope](double v) { return v > 0.0 ? 1.0 : slope; }).eval();
  };

  Eigen::MatrixXd z1 = w1 * real;
  z1.colwise() += layers[0].bias;
  const Eigen::MatrixXd a1 = mask_of(z1);
  const Eigen::MatrixXd h1 = z1.cwiseProduct(a1);
  Eigen::MatrixXd z2 = w2 * h1;
  z2.colwise() += layers[1].bias;
  const Eigen::MatrixXd a2 = mask_of(z2);

  const Eigen::MatrixXd v = a2.array().colwise() * w3.array();
  const Eigen::MatrixXd u = a1.cwiseProduct(w2.transpose() * v);
  const Eigen::MatrixXd g = w1.transpose() * u;

  R1Result out;
  out.value = g.colwise().squaredNorm().sum() * inv_b;
  out.input_grad = g;
  out.grad.layers.resize(3);
  out.grad.layers[0].weight = (2.0 * inv_b) * u * g.transpose();
  const Eigen::MatrixXd r1 = a1.cwiseProduct((2.0 * inv_b) * (w1 * g));
  out.grad.layers[1].weight = v * r1.transpose();
  out.grad.layers[2].weight = a2.cwiseProduct(w2 * r1).rowwise().sum().transpose();
  for (int l = 0; l < 3; ++l) out.grad.layers[l].bias = Eigen::VectorXd::Zero(layers[l].bias.size());
  return out;
}

GanLosses gan_losses(const Discriminator& disc, const Eigen::MatrixXd& real, const Eigen::MatrixXd& fake,
                     double lambda_r1) {
  if (real.rows() != fake.rows() || real.rows() != disc.input_dim())
    throw std::invalid_argument("gan_losses: patch shapes disagree");
  if (real.cols() == 0 || fake.cols() == 0) throw std::invalid_argument("gan_losses: empty batch");
  GanLosses out;
  Discriminator::Tape tape_r;
  Discriminator::Tape tape_f;
  const Eigen::MatrixXd d_real = disc.forward(real, tape_r);
  const Eigen::MatrixXd d_fake = disc.forward(fake, tape_f);
  const double inv_r = 1.0 / real.cols();
  const double inv_f = 1.0 / fake.cols();
  Eigen::MatrixXd g_real(1, real.cols());
  Eigen::MatrixXd g_fake(1, fake.cols());
  Eigen::MatrixXd g_gen(1, fake.cols());
  for (Eigen::Index i = 0; i < real.cols(); ++i) {
    out.adv_real += softplus(-d_real(0, i)) * inv_r;
    g_real(0, i) = -logistic(-d_real(0, i)) * inv_r;
  }
  for (Eigen::Index i = 0; i < fake.cols(); ++i) {
    out.adv_fake += softplus(d_fake(0, i)) * inv_f;
    g_fake(0, i) = logistic(d_fake(0, i)) * inv_f;
    out.g_loss += softplus(-d_fake(0, i)) * inv_f;
    g_gen(0, i) = -logistic(-d_fake(0, i)) * inv_f;
  }
  const R1Result r1 = r1_penalty(disc, real);
  out.r1 = r1.value;
  out.d_loss = out.adv_real + out.adv_fake + lambda_r1 * r1.value;

  out.d_grad = disc.backward(tape_r, g_real);
  Discriminator::Gradient gf = disc.backward(tape_f, g_fake);
  gf.input.resize(0, 0);
  out.d_grad.input.resize(0, 0);
  out.d_grad.add(gf);
  for (int l = 0; l < 3; ++l) {
    out.d_grad.layers[l].weight += lambda_r1 * r1.grad.layers[l].weight;
    out.d_grad.layers[l].bias += lambda_r1 * r1.grad.layers[l].bias;
  }
  out.g_input_grad = disc.backward(tape_f, g_gen).input;
  return out;
}

AdversarialBranch::AdversarialBranch(const TrainConfig& config, const std::vector<Scan>& scans,
                                     const std::vector<TemplateMesh>& posed_meshes)
    : config_(config), posed_(posed_meshes) {
  if (scans.size() != posed_meshes.size()) throw std::invalid_argument("AdversarialBranch: scan/pose count mismatch");
  for (std::size_t k = 0; k < scans.size(); ++k) {
    const TemplateMesh& posed = posed_meshes[k];
    Points joints = posed.joints;
    if (joints.rows() == 0) {
      joints.resize(1, 3);
      joints.row(0) = bounding_box(posed).center().transpose();
    }
    const Vec3 center = joints.row(0).transpose();
    cameras_.push_back(camera_ring(center, config.ring_radius, {0.0, 90.0, 180.0, 270.0}, config.camera_fov,
                                   config.image_size));
    real_.push_back(real_patches(scans[k], joints, cameras_.back(), config.patch_size));
  }
}

AdversarialBranch::Result AdversarialBranch::step(Model& model, std::mt19937_64& rng,
                                                  const std::vector<const AccelStructure*>& posed_accels) const {
  const int n = model.num_subjects();
  const int m = model.num_vertices();
  const int f = model.feature_dim();
  const PcaModel pca_s = pca_fit(model.shape, std::min(model.pca_dim_geometry, n - 1));
  const PcaModel pca_c = pca_fit(model.color, std::min(model.pca_dim_texture, n - 1));
  const Eigen::VectorXd k_s = pca_sample_coeffs(pca_s, rng());
  const Eigen::VectorXd k_c = pca_sample_coeffs(pca_c, rng());
  Codebook sampled(m, f);
  assign(sampled, FeatureKind::geometry, pca_decode(pca_s, k_s));
  assign(sampled, FeatureKind::texture, pca_decode(pca_c, k_c));
  const Eigen::VectorXd a_s = pca_mixing_weights(pca_s, k_s);
  const Eigen::VectorXd a_c = pca_mixing_weights(pca_c, k_c);

  std::uniform_int_distribution<int> pick_scan(0, n - 1);
  const int scan = pick_scan(rng);
  std::uniform_int_distribution<int> pick_cam(0, static_cast<int>(cameras_[scan].size()) - 1);
  const int cam = pick_cam(rng);
  const RealPatchSet& real = real_[scan];
  std::uniform_int_distribution<int> pick_joint(0, static_cast<int>(real.rects[cam].size()) - 1);

  const RenderSettings settings{config_.ray_steps, config_.ray_refine, config_.fd_eps, 0.1};
  std::vector<RenderedPatch> fakes;
  std::vector<Patch> real_color;
  std::vector<Patch> real_normal;
  std::vector<Patch> fake_color;
  std::vector<Patch> fake_normal;
  for (int p = 0; p < config_.patches_per_step; ++p) {
    const int j = pick_joint(rng);
    fakes.push_back(render_patch(posed_[scan], *posed_accels[scan], sampled, model.decoders, cameras_[scan][cam],
                                 real.rects[cam][j], settings));
    real_color.push_back(real.color[cam][j]);
    real_normal.push_back(real.normal[cam][j]);
    fake_color.push_back(fakes.back().color);
    fake_normal.push_back(fakes.back().normal);
  }

  Result out;
  const AdamConfig adam{config_.lr, config_.adam_beta1, config_.adam_beta2, config_.adam_eps};
  Eigen::MatrixXd d_pixels[2];
  int kind = 0;
  for (auto [disc, state, reals, fks] :
       {std::make_tuple(&model.disc_color, &model.adam_disc_color, &real_color, &fake_color),
        std::make_tuple(&model.disc_normal, &model.adam_disc_normal, &real_normal, &fake_normal)}) {
    const Eigen::MatrixXd r = stack_inputs(*reals);
    const Eigen::MatrixXd fk = stack_inputs(*fks);
    const GanLosses d = gan_losses(*disc, r, fk, config_.lambda_r1);
    out.d_loss += d.d_loss;
    Eigen::VectorXd params = disc->pack();
    adam_step(params, d.d_grad.pack(), *state, adam);
    disc->unpack(params);
    const GanLosses g = gan_losses(*disc, r, fk, 0.0);
    out.g_loss += g.g_loss;
    d_pixels[kind++] = 2.0 * g.g_input_grad;
  }

  Eigen::MatrixXd grad_cb = Eigen::MatrixXd::Zero(m, 2 * f);
  for (std::size_t p = 0; p < fakes.size(); ++p) {
    PassGradient g = render_backward(fakes[p], model.decoders, m, d_pixels[0].col(p), d_pixels[1].col(p));
    grad_cb += g.codebook;
    if (!g.sdf.layers.empty()) out.sdf.add(g.sdf);
    if (!g.color.layers.empty()) out.color.add(g.color);
  }
  Codebook gcb(m, f);
  gcb.features = grad_cb;
  const Eigen::RowVectorXd gs = flatten(gcb, FeatureKind::geometry).transpose();
  const Eigen::RowVectorXd gc = flatten(gcb, FeatureKind::texture).transpose();
  out.grad_shape = a_s * gs;
  out.grad_color = a_c * gc;
  if (out.sdf.layers.empty()) {
    for (const auto& l : model.decoders.sdf.layers())
      out.sdf.layers.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()),
                                Eigen::VectorXd::Zero(l.bias.size())});
  }
  if (out.color.layers.empty()) {
    for (const auto& l : model.decoders.color.layers())
      out.color.layers.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()),
                                  Eigen::VectorXd::Zero(l.bias.size())});
  }
  return out;
}

}  // namespace cbav
