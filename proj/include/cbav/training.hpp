#pragma once

#include "cbav/codebook.hpp"
#include "cbav/field.hpp"
#include "cbav/geometry.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace cbav {

struct Scan {
  TemplateMesh mesh;  // watertight, vertex colors
  PoseParams pose;    // registration of the template
  int subject_id = 0;
};

struct SamplePoint {
  Vec3 x = Vec3::Zero();
  double s = 0.0;
  Vec3 c = Vec3::Zero();
  Vec3 n = Vec3::UnitZ();
};

// Structure-of-arrays form used by the training loop.
struct PointSet {
  Points x;
  Eigen::VectorXd s;
  Points c;
  Points n;
  int num_free = 0;  // trailing rows drawn in free space; they supervise the SDF only
  int size() const { return static_cast<int>(x.rows()); }
  std::vector<SamplePoint> to_samples() const;
};

struct TrainConfig {
  // Loss weights.
  double lambda_n = 1e-2;
  double lambda_sdf = 1e3;
  double lambda_rgb = 1e2;
  double lambda_reg = 1e-3;
  double lambda_r1 = 10.0;
  double lambda_adv = 1.0;
  // Optimizer.
  double lr = 1e-3;
  double adam_beta1 = 0.0;
  double adam_beta2 = 0.99;
  double adam_eps = 1e-8;
  // Schedule.
  int points_per_iter = 20480;
  int batch_subjects = 8;
  int epochs = 8000;
  int iterations = 0;  // overrides epochs when positive
  int checkpoint_every = 100;
  std::uint64_t seed = 0;
  // Representation.
  int feature_dim = 32;
  int hidden_width = kHiddenWidth;
  int pca_dim_geometry = 16;
  int pca_dim_texture = 8;
  // Sampling, fractions of the scan's bounding-box diagonal.
  double shell_narrow = 0.005;
  double shell_wide = 0.025;
  double free_fraction = 0.125;  // uniform box samples with truncated SDF targets
  double fd_eps = 2e-3;  // meters
  // Adversarial branch.
  bool adversarial = false;
  int adv_every = 1;
  int patches_per_step = 4;
  int patch_size = 128;
  int image_size = 1024;
  int ray_steps = 64;
  int ray_refine = 3;
  double ring_radius = 2.0;
  double camera_fov = 0.96;

  static TrainConfig paper();
  // Small template-scale settings that run on a laptop CPU.
  static TrainConfig desk();
  int total_iterations(int num_subjects) const;
  void validate() const;
};

// Deterministic synthetic subject: smooth band-limited offsets along the
// template normals (peak `amplitude` times the bbox diagonal, damped where
// opposite surfaces face each other) and procedural region colors.
Scan synth_scan(const TemplateMesh& tmpl, std::uint64_t seed, double amplitude = 0.01);

// A scan prepared for repeated sampling: BVH, area table, vertex normals.
class ScanSampler {
 public:
  explicit ScanSampler(const TemplateMesh& scan_mesh);

  // Area-weighted surface points moved by isotropic Gaussian noise, half with
  // sigma narrow * diagonal and half with wide * diagonal, truncated at 3 sigma.
  // A `free_fraction` share is instead drawn uniformly in free_box() and its
  // SDF target clamped to the 3 * wide shell.
  PointSet sample(int n, std::mt19937_64& rng, double narrow, double wide, double free_fraction = 0.0) const;
  // Ground truth at arbitrary points.
  PointSet label(const Points& x) const;
  // Area-weighted surface points (no ground-truth lookup).
  Points surface_points(int n, std::mt19937_64& rng, Points* normals = nullptr) const;

  double diagonal() const { return diagonal_; }
  // Scan bounds grown by a quarter of the largest extent.
  const Eigen::AlignedBox3d& free_box() const { return free_box_; }
  const AccelStructure& accel() const { return accel_; }

 private:
  AccelStructure accel_;
  Points colors_;
  Points normals_;
  std::vector<double> area_cdf_;
  double diagonal_ = 0.0;
  Eigen::AlignedBox3d free_box_;
};

std::vector<SamplePoint> sample_points(const Scan& scan, int n, std::uint64_t seed, double narrow = 0.005,
                                       double wide = 0.025);

// Predictions for one block of points: SDF at the points, at the six
// finite-difference offsets (fd_offsets layout) and colors.
struct Loss3d {
  double sdf_l1 = 0.0;     // mean |s_gt - s|
  double normal_l1 = 0.0;  // mean |1 - n_gt . grad s|
  double l_sdf = 0.0;
  double l_rgb = 0.0;
  double total = 0.0;
  Eigen::VectorXd grad_s;   // n
  Eigen::VectorXd grad_fd;  // 6n
  Points grad_c;            // n x 3
};

Loss3d loss_3d(const Eigen::VectorXd& s, const Eigen::VectorXd& s_fd, const Points& c, const PointSet& gt,
               double fd_eps, const TrainConfig& config);

struct RegLoss {
  double value = 0.0;
  RowMatrix grad_shape;
  RowMatrix grad_color;
};

// ||D_s||_F + ||D_c||_F with gradients D / ||D||_F.
RegLoss loss_reg(const Dictionary& shape, const Dictionary& color);
// Same, restricted to the listed rows; other gradient rows are zero.
RegLoss loss_reg_rows(const Dictionary& shape, const Dictionary& color, const std::vector<int>& rows);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double eps = 1e-8;
};

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  std::int64_t step = 0;
};

void adam_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grads, AdamState& state,
               const AdamConfig& config);

using Discriminator = Mlp<double>;

// Everything a checkpoint stores.
struct Model {
  std::uint64_t template_hash = 0;
  Dictionary shape;
  Dictionary color;
  Decoders decoders;
  bool has_discriminators = false;
  Discriminator disc_color;
  Discriminator disc_normal;
  AdamState adam_shape;
  AdamState adam_color;
  AdamState adam_sdf;
  AdamState adam_rgb;
  AdamState adam_disc_color;
  AdamState adam_disc_normal;
  std::string rng_state;
  std::int64_t iteration = 0;
  int pca_dim_geometry = 16;
  int pca_dim_texture = 8;

  int feature_dim() const { return shape.feature_dim; }
  int num_vertices() const { return shape.num_vertices; }
  int num_subjects() const { return shape.size(); }
};

Model init_model(const TemplateMesh& tmpl, int num_subjects, const TrainConfig& config);

// One block of points evaluated by the full pipeline with tapes kept.
struct FieldPass {
  QueryBatch queries;
  QueryBatch fd_queries;
  Decoder::Tape sdf_tape;  // columns: points then the six offset blocks
  Decoder::Tape color_tape;
  Eigen::VectorXd s;
  Eigen::VectorXd s_fd;
  Points c;
  bool with_sdf = true;
  bool with_color = true;
};

FieldPass forward_pass(const AccelStructure& accel, const Codebook& cb, const Decoders& decoders, const Points& x,
                       double fd_eps, bool with_sdf = true, bool with_color = true);

struct PassGradient {
  Decoder::Gradient sdf;
  Decoder::Gradient color;
  Eigen::MatrixXd codebook;  // M x 2F
};

// grad_s / grad_fd / grad_c are slices of a Loss3d for this pass.
PassGradient backward_pass(const FieldPass& pass, const Decoders& decoders, int num_vertices,
                           const Eigen::VectorXd& grad_s, const Eigen::VectorXd& grad_fd, const Points& grad_c);

struct IterationStats {
  std::int64_t iteration = 0;
  double l_sdf = 0.0;
  double l_rgb = 0.0;
  double l_reg = 0.0;
  double l_adv = 0.0;
  double total = 0.0;
  std::vector<int> batch;
};

class AdversarialBranch;

class Trainer {
 public:
  // scans[k].subject_id must be a permutation of 0..N-1.
  Trainer(const TemplateMesh& tmpl, std::vector<Scan> scans, const TrainConfig& config);
  Trainer(const TemplateMesh& tmpl, std::vector<Scan> scans, const TrainConfig& config, Model resume);
  ~Trainer();

  IterationStats step();
  // Runs until `total_iterations`; the sink receives the trainer every
  // checkpoint_every iterations and at the end. Rows go to csv if given.
  void run(std::int64_t total_iterations, const std::function<void(const Trainer&)>& checkpoint_sink = {},
           std::ostream* csv = nullptr);

  // Model with the current generator state.
  Model snapshot() const;
  const Model& model() const { return model_; }
  const TrainConfig& config() const { return config_; }
  const std::vector<Scan>& scans() const { return scans_; }
  // Posed template BVH of subject i.
  const AccelStructure& posed_accel(int subject) const;

 private:
  void setup();
  void check_finite(const IterationStats& stats) const;

  TemplateMesh template_;
  std::vector<Scan> scans_;
  TrainConfig config_;
  Model model_;
  std::mt19937_64 rng_;
  std::vector<int> scan_of_subject_;
  std::vector<std::unique_ptr<ScanSampler>> samplers_;
  std::vector<std::unique_ptr<AccelStructure>> posed_;
  std::vector<TemplateMesh> posed_meshes_;
  std::unique_ptr<AdversarialBranch> adversarial_;
};

void write_loss_header(std::ostream& out);
void write_loss_row(std::ostream& out, const IterationStats& stats);

}  // namespace cbav
