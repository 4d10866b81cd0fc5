#pragma once

#include "cbav/geometry.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <utility>

namespace cbav {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class FeatureKind { geometry, texture };

// Bit mask over FeatureKind for row swaps.
struct KindMask {
  bool geometry = true;
  bool texture = true;
  static KindMask both() { return {true, true}; }
  static KindMask geometry_only() { return {true, false}; }
  static KindMask texture_only() { return {false, true}; }
};

// Per-subject feature table: M x 2F, geometry columns first.
struct Codebook {
  Eigen::MatrixXd features;
  int feature_dim = 0;

  Codebook() = default;
  Codebook(int num_vertices, int f) : features(Eigen::MatrixXd::Zero(num_vertices, 2 * f)), feature_dim(f) {}

  int num_vertices() const { return static_cast<int>(features.rows()); }
  auto geometry() { return features.leftCols(feature_dim); }
  auto geometry() const { return features.leftCols(feature_dim); }
  auto texture() { return features.rightCols(feature_dim); }
  auto texture() const { return features.rightCols(feature_dim); }
  auto kind(FeatureKind k) { return features.middleCols(k == FeatureKind::geometry ? 0 : feature_dim, feature_dim); }
  auto kind(FeatureKind k) const {
    return features.middleCols(k == FeatureKind::geometry ? 0 : feature_dim, feature_dim);
  }
};

// N stacked per-subject codebooks of one kind, each flattened vertex-major
// into M * F entries.
struct Dictionary {
  RowMatrix entries;
  FeatureKind kind = FeatureKind::geometry;
  int num_vertices = 0;
  int feature_dim = 0;

  int size() const { return static_cast<int>(entries.rows()); }
  // View of row i as an M x F matrix.
  Eigen::Map<const RowMatrix> subject(int i) const {
    return Eigen::Map<const RowMatrix>(entries.row(i).data(), num_vertices, feature_dim);
  }
  Eigen::Map<RowMatrix> subject(int i) {
    return Eigen::Map<RowMatrix>(entries.row(i).data(), num_vertices, feature_dim);
  }
};

Dictionary init_dictionary(int n, int num_vertices, int f, std::uint64_t seed,
                           FeatureKind kind = FeatureKind::geometry, double stddev = 0.01);

// Codebook of subject i assembled from both dictionaries.
Codebook codebook_from(const Dictionary& shape, const Dictionary& color, int i);

// Flattened M * F row for one kind of a codebook.
Eigen::VectorXd flatten(const Codebook& cb, FeatureKind kind);
void assign(Codebook& cb, FeatureKind kind, const Eigen::VectorXd& row);

// Barycentric fusion of the three supporting rows: u f(m0) + v f(m1) + (1-u-v) f(m2).
std::pair<Eigen::VectorXd, Eigen::VectorXd> lookup_fused(const Codebook& cb, const Faces& faces, const LocalQuery& q);

// dst with rows in `vertices` replaced by src rows for the selected kinds.
Codebook swap_rows(const Codebook& dst, const Codebook& src, std::span<const int> vertices, KindMask kinds);

struct PcaModel {
  Eigen::VectorXd mean;        // M * F
  RowMatrix eigvecs;           // D x (M * F), orthonormal rows
  Eigen::VectorXd coeff_mean;  // D
  Eigen::MatrixXd coeff_cov;   // D x D
  Eigen::VectorXd singular_values;  // D
  Eigen::MatrixXd left_vectors;     // N x D left singular vectors of the centered dictionary

  int dim() const { return static_cast<int>(eigvecs.rows()); }
  int num_subjects() const { return static_cast<int>(left_vectors.rows()); }
};

// SVD of the centered dictionary. d is clamped to N - 1 (and M * F) with a warning.
PcaModel pca_fit(const Dictionary& dict, int d);

Eigen::VectorXd pca_project(const PcaModel& model, const Eigen::VectorXd& row);
Eigen::VectorXd pca_decode(const PcaModel& model, const Eigen::VectorXd& coeffs);

struct PcaSample {
  Eigen::VectorXd row;
  Eigen::VectorXd coeffs;
};

// Coefficients drawn from Normal(coeff_mean, coeff_cov + eps I), eps = 1e-8 tr / D.
Eigen::VectorXd pca_sample_coeffs(const PcaModel& model, std::uint64_t seed);
PcaSample pca_sample(const PcaModel& model, std::uint64_t seed);

// Weights a with decode(coeffs) = sum_n a_n * dict.row(n), holding the
// eigenbasis fixed. Used to route gradients of a sampled codebook back to
// every dictionary row.
Eigen::VectorXd pca_mixing_weights(const PcaModel& model, const Eigen::VectorXd& coeffs);

}  // namespace cbav
