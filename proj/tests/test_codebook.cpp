#include "cbav/codebook.hpp"
#include "cbav/errors.hpp"

#include <doctest.h>

#include <Eigen/Eigenvalues>

#include <random>

using namespace cbav;

namespace {

Dictionary random_dict(int n, int m, int f, std::uint64_t seed) {
  Dictionary d = init_dictionary(n, m, f, seed, FeatureKind::geometry, 1.0);
  // Unequal row scales keep the components well separated.
  for (int i = 0; i < n; ++i) d.entries.row(i) *= 1.0 + 0.3 * i;
  return d;
}

}  // namespace

TEST_SUITE("codebook") {

TEST_CASE("dictionary rows map to codebooks vertex-major") {
  const Dictionary s = init_dictionary(3, 5, 2, 1);
  const Dictionary c = init_dictionary(3, 5, 2, 2, FeatureKind::texture);
  const Codebook cb = codebook_from(s, c, 1);
  CHECK(cb.num_vertices() == 5);
  for (int v = 0; v < 5; ++v)
    for (int k = 0; k < 2; ++k) {
      CHECK(cb.features(v, k) == s.entries(1, v * 2 + k));
      CHECK(cb.features(v, 2 + k) == c.entries(1, v * 2 + k));
    }
  CHECK(flatten(cb, FeatureKind::geometry) == s.entries.row(1).transpose());
  Codebook other(5, 2);
  assign(other, FeatureKind::texture, c.entries.row(1).transpose());
  CHECK(other.texture() == cb.texture());
}

TEST_CASE("init_dictionary draws with the requested spread") {
  const Dictionary d = init_dictionary(20, 200, 8, 3, FeatureKind::geometry, 0.01);
  const double mean = d.entries.mean();
  const double var = (d.entries.array() - mean).square().mean();
  CHECK(std::abs(mean) < 1e-3);
  CHECK(std::sqrt(var) == doctest::Approx(0.01).epsilon(0.05));
  CHECK(init_dictionary(20, 200, 8, 3).entries == d.entries);
}

TEST_CASE("swap_rows copies only selected rows and kinds") {
  Codebook a(6, 2), b(6, 2);
  a.features.setConstant(1.0);
  b.features.setConstant(2.0);
  const std::vector<int> rows{1, 4};
  const Codebook t = swap_rows(a, b, rows, KindMask::texture_only());
  for (int v = 0; v < 6; ++v) {
    const bool sel = v == 1 || v == 4;
    CHECK(t.features(v, 0) == 1.0);
    CHECK(t.features(v, 1) == 1.0);
    CHECK(t.features(v, 2) == (sel ? 2.0 : 1.0));
    CHECK(t.features(v, 3) == (sel ? 2.0 : 1.0));
  }
  std::vector<int> all(6);
  for (int i = 0; i < 6; ++i) all[i] = i;
  CHECK(swap_rows(a, b, all, KindMask::both()).features == b.features);
  CHECK(swap_rows(a, b, std::vector<int>{}, KindMask::both()).features == a.features);
  CHECK_THROWS(swap_rows(a, b, std::vector<int>{6}, KindMask::both()));
  CHECK_THROWS(swap_rows(a, Codebook(5, 2), rows, KindMask::both()));
}

TEST_CASE("disjoint transfers commute") {
  Codebook base(8, 1), s1(8, 1), s2(8, 1);
  base.features.setZero();
  s1.features.setConstant(1.0);
  s2.features.setConstant(2.0);
  const std::vector<int> r1{0, 1, 2}, r2{5, 6};
  const Codebook x = swap_rows(swap_rows(base, s1, r1, KindMask::both()), s2, r2, KindMask::both());
  const Codebook y = swap_rows(swap_rows(base, s2, r2, KindMask::both()), s1, r1, KindMask::both());
  CHECK(x.features == y.features);
}

TEST_CASE("PCA: zero coefficients decode the mean") {
  const Dictionary d = random_dict(6, 10, 3, 5);
  const PcaModel p = pca_fit(d, 4);
  const Eigen::VectorXd mean = d.entries.colwise().mean().transpose();
  CHECK((pca_decode(p, Eigen::VectorXd::Zero(4)) - mean).norm() < 1e-12);
}

TEST_CASE("PCA: full-rank round trip and orthonormal components") {
  const Dictionary d = random_dict(6, 10, 3, 6);
  const PcaModel p = pca_fit(d, 5);
  CHECK(p.dim() == 5);
  CHECK((p.eigvecs * p.eigvecs.transpose() - Eigen::MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-6);
  for (int i = 0; i < d.size(); ++i) {
    const Eigen::VectorXd row = d.entries.row(i).transpose();
    const Eigen::VectorXd back = pca_decode(p, pca_project(p, row));
    CHECK((back - row).norm() / row.norm() < 1e-6);
  }
  // Covariance is symmetric and positive semi-definite.
  CHECK((p.coeff_cov - p.coeff_cov.transpose()).norm() == 0.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(p.coeff_cov);
  CHECK(es.eigenvalues().minCoeff() > -1e-12);
}

TEST_CASE("PCA components agree with the covariance eigenvectors") {
  const Dictionary d = random_dict(7, 4, 2, 8);
  const PcaModel p = pca_fit(d, 3);
  const Eigen::MatrixXd x = d.entries.rowwise() - d.entries.colwise().mean();
  const Eigen::MatrixXd cov = x.transpose() * x / (d.size() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  for (int k = 0; k < 3; ++k) {
    const Eigen::VectorXd e = es.eigenvectors().col(cov.rows() - 1 - k);
    CHECK(std::abs(std::abs(e.dot(p.eigvecs.row(k).transpose())) - 1.0) < 1e-8);
    const double lambda = es.eigenvalues()[cov.rows() - 1 - k];
    CHECK(p.coeff_cov(k, k) == doctest::Approx(lambda).epsilon(1e-8));
  }
}

TEST_CASE("PCA dimension clamps to N - 1") {
  const Dictionary d = random_dict(3, 5, 2, 9);
  CHECK(pca_fit(d, 16).dim() == 2);
  CHECK_THROWS(pca_fit(init_dictionary(1, 5, 2, 1), 2));
}

TEST_CASE("PCA samples are deterministic per seed and differ across seeds") {
  const Dictionary d = random_dict(6, 10, 3, 10);
  const PcaModel p = pca_fit(d, 4);
  const PcaSample a = pca_sample(p, 1);
  CHECK(pca_sample(p, 1).row == a.row);
  CHECK((pca_sample(p, 2).row - a.row).norm() > 0.0);
  CHECK((pca_decode(p, a.coeffs) - a.row).norm() < 1e-12);
}

TEST_CASE("PCA sample statistics follow the coefficient covariance") {
  const Dictionary d = random_dict(6, 10, 3, 12);
  const PcaModel p = pca_fit(d, 3);
  const int n = 20000;
  Eigen::MatrixXd z(n, 3);
  for (int i = 0; i < n; ++i) z.row(i) = pca_sample_coeffs(p, 1000 + i).transpose();
  const Eigen::RowVectorXd mu = z.colwise().mean();
  const Eigen::MatrixXd c = (z.rowwise() - mu).transpose() * (z.rowwise() - mu) / (n - 1);
  CHECK((c - p.coeff_cov).norm() / p.coeff_cov.norm() < 0.05);
}

TEST_CASE("mixing weights reproduce the decoded row") {
  const Dictionary d = random_dict(6, 10, 3, 13);
  const PcaModel p = pca_fit(d, 5);
  const Eigen::VectorXd k = pca_sample_coeffs(p, 4);
  const Eigen::VectorXd a = pca_mixing_weights(p, k);
  const Eigen::VectorXd mixed = d.entries.transpose() * a;
  CHECK((mixed - pca_decode(p, k)).norm() < 1e-9);
  CHECK(a.sum() == doctest::Approx(1.0));
}

}
