#pragma once

#include "cbav/codebook.hpp"
#include "cbav/raster.hpp"
#include "cbav/training.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

namespace cbav {

enum class Provenance { dictionary, sampled, fitted };

struct Avatar {
  Codebook codebook;
  PoseParams pose;
  std::uint64_t template_hash = 0;
  std::uint64_t checkpoint_hash = 0;  // decoder weights this codebook was made for
  Provenance provenance = Provenance::dictionary;
  std::int64_t source = 0;  // dictionary index or sampling seed

  bool operator==(const Avatar& other) const;
};

// Hash of both decoders' packed weights.
std::uint64_t decoder_hash(const Decoders& decoders);

Avatar init_avatar(const Model& model, const TemplateMesh& tmpl, int index);
// Geometry and texture codebooks drawn from independent per-kind PCA models.
Avatar init_avatar(const Model& model, const TemplateMesh& tmpl, std::uint64_t seed);
// Explicit PCA coefficients per kind (zero gives the dictionary mean).
Avatar init_avatar(const Model& model, const TemplateMesh& tmpl, const Eigen::VectorXd& shape_coeffs,
                   const Eigen::VectorXd& texture_coeffs);
Avatar mean_avatar(const Model& model, const TemplateMesh& tmpl);

// Posed template, BVH and field view for one avatar.
class AvatarScene {
 public:
  AvatarScene(const Avatar& avatar, const TemplateMesh& tmpl, const Decoders& decoders);
  AvatarScene(const AvatarScene&) = delete;
  AvatarScene& operator=(const AvatarScene&) = delete;

  const TemplateMesh& posed() const { return posed_; }
  const AccelStructure& accel() const { return accel_; }
  NeuralField field() const { return {&accel_, &avatar_->codebook, decoders_}; }

 private:
  const Avatar* avatar_;
  const Decoders* decoders_;
  TemplateMesh posed_;
  AccelStructure accel_;
};

struct FitOptions {
  int geometry_iterations = 100;
  int texture_iterations = 300;
  int points_per_iter = 2048;
  std::uint64_t seed = 0;
  TrainConfig losses;  // lambdas, learning rate, shell widths, fd_eps
};

struct FitTrace {
  std::vector<double> loss;
};

// Codebook inversion against frozen decoders, starting from the dictionary
// mean. The texture phase updates texture columns only.
Avatar fit_codebook(const Scan& scan, const TemplateMesh& tmpl, const Model& model, const FitOptions& options,
                    FitTrace* trace = nullptr);

Avatar transfer_region(const Avatar& dst, const Avatar& src, std::span<const int> vertices, KindMask kinds);

struct PaintInput {
  RgbImage image;
  std::vector<std::uint8_t> mask;  // width * height, nonzero = painted
  Camera camera;
  TemplateMesh target;             // mesh the image was rendered from
};

struct PaintOptions {
  int iterations = 200;
  int points_per_iter = 2048;
  std::uint64_t seed = 0;
  TrainConfig losses;
};

// Optimizes texture columns so the field colors at the painted surface points
// match the image.
Avatar paint_texture(const Avatar& avatar, const PaintInput& paint, const TemplateMesh& tmpl, const Model& model,
                     const PaintOptions& options, FitTrace* trace = nullptr);

Avatar repose(const Avatar& avatar, const PoseParams& pose, const TemplateMesh& tmpl);

std::vector<int> read_vertex_set(const std::filesystem::path& path, int num_vertices);
void write_vertex_set(const std::vector<int>& vertices, const std::filesystem::path& path);

// Vertices whose rest position satisfies the predicate.
std::vector<int> select_vertices(const TemplateMesh& tmpl, const std::function<bool(const Vec3&)>& keep);

}  // namespace cbav
