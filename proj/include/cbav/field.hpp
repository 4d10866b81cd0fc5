#pragma once

#include "cbav/codebook.hpp"
#include "cbav/geometry.hpp"
#include "cbav/mlp.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>

namespace cbav {

inline constexpr int kFrequencyBands = 5;
inline constexpr int kEncodedWidth = 3 + 3 * 2 * kFrequencyBands + 3;  // 36
inline constexpr int kHiddenWidth = 128;
inline constexpr int kDecoderLayers = 4;

using Decoder = Mlp<double>;
using EncodedInput = Eigen::Matrix<double, kEncodedWidth, 1>;

// [u v d | sin(2^l pi x), cos(2^l pi x) for x in (u, v, d), l ascending | dir]
EncodedInput encode(const Vec3& uvd, const Vec3& dir);

struct Decoders {
  Decoder sdf;    // Phi: F + 36 -> 1, linear output
  Decoder color;  // Psi: F + 36 -> 3, logistic output
  int feature_dim() const { return sdf.input_dim() - kEncodedWidth; }
};

Decoder make_decoder(int feature_dim, int outputs, OutputActivation activation, std::uint64_t seed,
                     int hidden = kHiddenWidth, int layers = kDecoderLayers);
Decoders make_decoders(int feature_dim, std::uint64_t seed, int hidden = kHiddenWidth);

struct SdfEval {
  double s = 0.0;
  Decoder::Tape tape;
};
struct ColorEval {
  Vec3 c = Vec3::Zero();
  Decoder::Tape tape;
};

SdfEval eval_sdf(const Decoder& phi, const Eigen::VectorXd& f_s, const EncodedInput& enc);
ColorEval eval_color(const Decoder& psi, const Eigen::VectorXd& f_c, const EncodedInput& enc);

struct DecoderGradient {
  Decoder::Gradient weights;
  Eigen::VectorXd feature;  // F
  EncodedInput encoded;
};

// Single-sample reverse pass; throws std::logic_error on a stale tape.
DecoderGradient backward(const Decoder& net, const Decoder::Tape& tape, const Eigen::VectorXd& grad_out);

// Everything one query needs to route gradients back to the codebook.
struct FieldSample {
  double s = 0.0;
  Vec3 c = Vec3::Zero();
  LocalQuery query;  // dir already in the face frame
  std::array<int, 3> support{};
  Vec3 weights = Vec3::Zero();  // u, v, 1 - u - v
  EncodedInput encoded;
  Decoder::Tape sdf_tape;
  Decoder::Tape color_tape;
};

FieldSample query_field(const AccelStructure& accel, const Codebook& cb, const Decoders& decoders, const Vec3& x);

struct FieldGradient {
  Decoder::Gradient sdf;
  Decoder::Gradient color;
  Eigen::MatrixXd codebook;  // M x 2F, same layout as Codebook::features
};

FieldGradient field_backward(const FieldSample& sample, const Decoders& decoders, int num_vertices, double grad_s,
                             const Vec3& grad_c);

// Queries prepared for batched decoding: closest point, local frame and
// encoding of every row of x.
struct QueryBatch {
  std::vector<LocalQuery> local;
  Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor> support;
  Points weights;
  Eigen::MatrixXd encoded;  // 36 x n
  int size() const { return static_cast<int>(local.size()); }
};

QueryBatch prepare_queries(const AccelStructure& accel, const Points& x);

// Decoder input columns [fused features | encoding], (F + 36) x n.
Eigen::MatrixXd decoder_inputs(const QueryBatch& batch, const Codebook& cb, FeatureKind kind);

// Accumulates the feature part of input gradients into grad (M x 2F).
void scatter_feature_grad(const QueryBatch& batch, const Eigen::MatrixXd& input_grad, FeatureKind kind,
                          int feature_dim, Eigen::MatrixXd& grad);

using ScalarField = std::function<double(const Vec3&)>;
using BatchField = std::function<Eigen::VectorXd(const Points&)>;

// Central differences over the six axis offsets.
Vec3 spatial_gradient(const ScalarField& field, const Vec3& x, double eps);
// Rows [x + eps e0; x - eps e0; x + eps e1; ...], each block n rows long.
Points fd_offsets(const Points& x, double eps);
// Gradients from values laid out as in fd_offsets.
Points fd_gradients(const Eigen::VectorXd& values, int n, double eps);

// Non-owning view of one avatar's field: posed template, codebook, decoders.
struct NeuralField {
  const AccelStructure* accel = nullptr;
  const Codebook* codebook = nullptr;
  const Decoders* decoders = nullptr;

  double sdf(const Vec3& x) const;
  Eigen::VectorXd sdf(const Points& x) const;
  Points color(const Points& x) const;  // n x 3
  ScalarField sdf_closure() const;
  BatchField sdf_batch_closure() const;
};

}  // namespace cbav
