#include "cbav/codebook.hpp"

#include "cbav/errors.hpp"

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include <random>
#include <sstream>
#include <stdexcept>

namespace cbav {

Dictionary init_dictionary(int n, int num_vertices, int f, std::uint64_t seed, FeatureKind kind, double stddev) {
  if (n < 1 || num_vertices < 1 || f < 1) throw std::invalid_argument("init_dictionary: sizes must be positive");
  Dictionary dict;
  dict.kind = kind;
  dict.num_vertices = num_vertices;
  dict.feature_dim = f;
  dict.entries.resize(n, static_cast<Eigen::Index>(num_vertices) * f);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  for (Eigen::Index i = 0; i < dict.entries.size(); ++i) dict.entries.data()[i] = normal(rng);
  return dict;
}

Codebook codebook_from(const Dictionary& shape, const Dictionary& color, int i) {
  if (shape.num_vertices != color.num_vertices || shape.feature_dim != color.feature_dim)
    throw std::invalid_argument("codebook_from: dictionary shapes differ");
  if (i < 0 || i >= shape.size() || i >= color.size()) throw std::out_of_range("codebook_from: subject index out of range");
  Codebook cb(shape.num_vertices, shape.feature_dim);
  cb.geometry() = shape.subject(i);
  cb.texture() = color.subject(i);
  return cb;
}

Eigen::VectorXd flatten(const Codebook& cb, FeatureKind kind) {
  const RowMatrix block = cb.kind(kind);
  return Eigen::Map<const Eigen::VectorXd>(block.data(), block.size());
}

void assign(Codebook& cb, FeatureKind kind, const Eigen::VectorXd& row) {
  if (row.size() != static_cast<Eigen::Index>(cb.num_vertices()) * cb.feature_dim)
    throw std::invalid_argument("assign: row length does not match M * F");
  cb.kind(kind) = Eigen::Map<const RowMatrix>(row.data(), cb.num_vertices(), cb.feature_dim);
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> lookup_fused(const Codebook& cb, const Faces& faces, const LocalQuery& q) {
  if (q.face < 0 || q.face >= faces.rows()) throw std::out_of_range("lookup_fused: face index out of range");
  const double u = q.uvd[0];
  const double v = q.uvd[1];
  const double w = 1.0 - u - v;
  const int m0 = faces(q.face, 0);
  const int m1 = faces(q.face, 1);
  const int m2 = faces(q.face, 2);
  if (std::max({m0, m1, m2}) >= cb.num_vertices()) throw std::out_of_range("lookup_fused: vertex index out of range");
  const Eigen::VectorXd fused = u * cb.features.row(m0) + v * cb.features.row(m1) + w * cb.features.row(m2);
  return {fused.head(cb.feature_dim), fused.tail(cb.feature_dim)};
}

Codebook swap_rows(const Codebook& dst, const Codebook& src, std::span<const int> vertices, KindMask kinds) {
  if (dst.features.rows() != src.features.rows() || dst.feature_dim != src.feature_dim ||
      dst.features.cols() != src.features.cols())
    throw std::invalid_argument("swap_rows: codebook shapes differ");
  Codebook out = dst;
  const int f = dst.feature_dim;
  for (int v : vertices) {
    if (v < 0 || v >= dst.num_vertices()) throw std::out_of_range("swap_rows: vertex index out of range");
    if (kinds.geometry) out.features.row(v).head(f) = src.features.row(v).head(f);
    if (kinds.texture) out.features.row(v).tail(f) = src.features.row(v).tail(f);
  }
  return out;
}

PcaModel pca_fit(const Dictionary& dict, int d) {
  const int n = dict.size();
  if (n < 2) throw std::invalid_argument("pca_fit: need at least two dictionary entries");
  if (d < 1) throw std::invalid_argument("pca_fit: dimension must be positive");
  const int cap = static_cast<int>(std::min<Eigen::Index>(n - 1, dict.entries.cols()));
  if (d > cap) {
    std::ostringstream msg;
    msg << "pca_fit: clamping dimension " << d << " to " << cap << " for " << n << " subjects";
    log_warn(msg.str());
    d = cap;
  }

  PcaModel model;
  model.mean = dict.entries.colwise().mean().transpose();
  const Eigen::MatrixXd centered = dict.entries.rowwise() - model.mean.transpose();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinU | Eigen::ComputeThinV);
  model.eigvecs = svd.matrixV().leftCols(d).transpose();
  model.left_vectors = svd.matrixU().leftCols(d);
  model.singular_values = svd.singularValues().head(d);
  // Deterministic sign: largest-magnitude component of each eigenvector positive.
  for (int i = 0; i < d; ++i) {
    Eigen::Index arg = 0;
    model.eigvecs.row(i).cwiseAbs().maxCoeff(&arg);
    if (model.eigvecs(i, arg) < 0.0) {
      model.eigvecs.row(i) *= -1.0;
      model.left_vectors.col(i) *= -1.0;
    }
  }

  const Eigen::MatrixXd coeffs = centered * model.eigvecs.transpose();
  model.coeff_mean = coeffs.colwise().mean().transpose();
  const Eigen::MatrixXd dev = coeffs.rowwise() - model.coeff_mean.transpose();
  model.coeff_cov = dev.transpose() * dev / static_cast<double>(n - 1);
  model.coeff_cov = 0.5 * (model.coeff_cov + model.coeff_cov.transpose()).eval();
  return model;
}

Eigen::VectorXd pca_project(const PcaModel& model, const Eigen::VectorXd& row) {
  if (row.size() != model.mean.size()) throw std::invalid_argument("pca_project: row length mismatch");
  return model.eigvecs * (row - model.mean);
}

Eigen::VectorXd pca_decode(const PcaModel& model, const Eigen::VectorXd& coeffs) {
  if (coeffs.size() != model.dim()) throw std::invalid_argument("pca_decode: coefficient length mismatch");
  return model.mean + model.eigvecs.transpose() * coeffs;
}

Eigen::VectorXd pca_sample_coeffs(const PcaModel& model, std::uint64_t seed) {
  const int d = model.dim();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd z(d);
  for (int i = 0; i < d; ++i) z[i] = normal(rng);
  const double trace = model.coeff_cov.trace();
  if (trace == 0.0) return model.coeff_mean;
  const double eps = 1e-8 * trace / d;
  const Eigen::MatrixXd reg = model.coeff_cov + eps * Eigen::MatrixXd::Identity(d, d);
  Eigen::LLT<Eigen::MatrixXd> llt(reg);
  if (llt.info() != Eigen::Success) throw NumericError("pca_sample: coefficient covariance is not positive definite");
  return model.coeff_mean + llt.matrixL() * z;
}

PcaSample pca_sample(const PcaModel& model, std::uint64_t seed) {
  PcaSample s;
  s.coeffs = pca_sample_coeffs(model, seed);
  s.row = pca_decode(model, s.coeffs);
  return s;
}

Eigen::VectorXd pca_mixing_weights(const PcaModel& model, const Eigen::VectorXd& coeffs) {
  const int n = model.num_subjects();
  Eigen::VectorXd scaled = Eigen::VectorXd::Zero(model.dim());
  const double tol = 1e-12 * (model.singular_values.size() > 0 ? model.singular_values[0] : 0.0);
  for (int i = 0; i < model.dim(); ++i)
    if (model.singular_values[i] > tol) scaled[i] = coeffs[i] / model.singular_values[i];
  const Eigen::VectorXd w = model.left_vectors * scaled;
  return Eigen::VectorXd::Constant(n, 1.0 / n) + w - Eigen::VectorXd::Constant(n, w.mean());
}

}  // namespace cbav
