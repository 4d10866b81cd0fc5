#pragma once

#include "cbav/field.hpp"
#include "cbav/raster.hpp"
#include "cbav/training.hpp"

#include <optional>
#include <random>
#include <vector>

namespace cbav {

// Cameras on a horizontal circle (y up) around center, aimed at it. Angle 0
// sits at center + (radius, 0, 0); angles increase toward +z.
std::vector<Camera> camera_ring(const Vec3& center, double radius = 2.0,
                                const std::vector<double>& angles_deg = {0.0, 90.0, 180.0, 270.0},
                                double fov_y = 0.96, int resolution = 256);

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 dir = Vec3::UnitZ();
  double near = 0.0;
  double far = 1.0;
};

struct RayHit {
  double t = 0.0;
  Vec3 x = Vec3::Zero();
  bool inside_start = false;
};

// Uniform samples over [near, far]; the first pair whose signs differ is
// refined with secant steps that stay inside the bracket (one secant step
// plus `refine` regula-falsi updates). A ray that starts inside returns the
// near sample.
std::optional<RayHit> intersect_ray(const ScalarField& field, const Ray& ray, int steps, int refine = 3);
// Same for many rays, with each sampling round evaluated as one batch.
std::vector<std::optional<RayHit>> intersect_rays(const BatchField& field, const std::vector<Ray>& rays, int steps,
                                                  int refine = 3);

// Entry/exit of a ray against a box; nullopt when it misses.
std::optional<std::pair<double, double>> clip_ray(const Vec3& origin, const Vec3& dir, const Eigen::AlignedBox3d& box);

enum class PatchKind { color, normal };

struct PatchRect {
  int x0 = 0;
  int y0 = 0;
  int size = 32;
};

// size x size square centered on the projection of `world`, clamped to the image.
PatchRect patch_around(const Camera& camera, const Vec3& world, int size);

struct Patch {
  int size = 0;
  PatchKind kind = PatchKind::color;
  bool real = false;
  Eigen::VectorXd pixels;  // row-major pixels, interleaved RGB
  std::vector<std::uint8_t> mask;

  Patch() = default;
  Patch(int s, PatchKind k, bool is_real)
      : size(s), kind(k), real(is_real), pixels(Eigen::VectorXd::Constant(3 * s * s, kBackground)),
        mask(static_cast<std::size_t>(s) * s, 0) {}
  Vec3 pixel(int x, int y) const { return pixels.segment<3>(3 * (y * size + x)); }
  RgbImage image() const;
};

Patch crop(const RgbImage& image, const std::vector<std::uint8_t>& mask, const PatchRect& rect, PatchKind kind);

struct RenderSettings {
  int steps = 64;
  int refine = 3;
  double fd_eps = 2e-3;
  double margin = 0.1;  // box inflation relative to the posed template extent
};

struct RenderedPatch {
  Patch color;
  Patch normal;
  std::vector<int> pixel_of_hit;  // patch pixel index per hit
  Points hits;                    // hit positions
  FieldPass pass;                 // decoded hit points with finite-difference offsets
  Points gradients;               // raw finite-difference SDF gradients per hit
  Mat3 basis = Mat3::Identity();
  double fd_eps = 2e-3;
};

// Ray-marched color and normal patches of a neural field over the posed
// template `posed` (whose BVH is `accel`).
RenderedPatch render_patch(const TemplateMesh& posed, const AccelStructure& accel, const Codebook& cb,
                           const Decoders& decoders, const Camera& camera, const PatchRect& rect,
                           const RenderSettings& settings);

// Gradients of a loss with pixel gradients d_color / d_normal (patch layout).
// Hit positions are held fixed.
PassGradient render_backward(const RenderedPatch& patch, const Decoders& decoders, int num_vertices,
                             const Eigen::VectorXd& d_color, const Eigen::VectorXd& d_normal);

// Ground-truth color and normal crops around each projected joint, per camera:
// [camera][joint] -> (color, normal).
struct RealPatchSet {
  std::vector<std::vector<Patch>> color;
  std::vector<std::vector<Patch>> normal;
  std::vector<std::vector<PatchRect>> rects;
};

RealPatchSet real_patches(const Scan& scan, const Points& joints, const std::vector<Camera>& cameras, int patch_size);

// Flattened patch -> 256 -> 128 -> 1 with leaky rectifiers (slope 0.2).
Discriminator make_discriminator(int patch_size, std::uint64_t seed);

// Discriminator input for a patch: pixels mapped to [-1, 1].
Eigen::VectorXd disc_input(const Patch& patch);

struct R1Result {
  double value = 0.0;  // mean over columns of ||grad_x D||^2
  Discriminator::Gradient grad;
  Eigen::MatrixXd input_grad;  // grad_x D per column
};

// Activation pattern held fixed: exact almost everywhere for leaky rectifiers.
R1Result r1_penalty(const Discriminator& disc, const Eigen::MatrixXd& real);

struct GanLosses {
  double adv_real = 0.0;  // mean softplus(-D(real))
  double adv_fake = 0.0;  // mean softplus(D(fake))
  double r1 = 0.0;
  double d_loss = 0.0;    // adv_real + adv_fake + lambda_r1 * r1
  double g_loss = 0.0;    // mean softplus(-D(fake))
  Discriminator::Gradient d_grad;
  Eigen::MatrixXd g_input_grad;  // d g_loss / d fake inputs
};

GanLosses gan_losses(const Discriminator& disc, const Eigen::MatrixXd& real, const Eigen::MatrixXd& fake,
                     double lambda_r1);

double softplus(double x);

// Adversarial part of one training iteration.
class AdversarialBranch {
 public:
  AdversarialBranch(const TrainConfig& config, const std::vector<Scan>& scans,
                    const std::vector<TemplateMesh>& posed_meshes);

  struct Result {
    double g_loss = 0.0;
    double d_loss = 0.0;
    RowMatrix grad_shape;
    RowMatrix grad_color;
    Decoder::Gradient sdf;
    Decoder::Gradient color;
  };

  // Updates the discriminators in `model` and returns generator gradients
  // for a PCA-sampled codebook routed to every dictionary row.
  Result step(Model& model, std::mt19937_64& rng, const std::vector<const AccelStructure*>& posed_accels) const;

 private:
  TrainConfig config_;
  std::vector<TemplateMesh> posed_;
  std::vector<std::vector<Camera>> cameras_;
  std::vector<RealPatchSet> real_;
};

}  // namespace cbav
