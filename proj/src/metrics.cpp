#include "cbav/metrics.hpp"

#include "cbav/errors.hpp"
#include "cbav/parallel.hpp"

#include <algorithm>
#include <cmath>

namespace cbav {

namespace {

struct OneWay {
  double mean_distance = 0.0;
  double normal_dot = 0.0;
  double within = 0.0;
};

OneWay one_way(const Points& x, const Points& nx, const AccelStructure& target, double threshold) {
  const Eigen::Index n = x.rows();
  std::vector<double> dist(n);
  std::vector<double> dots(n);
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const ClosestPoint cp = closest_point(target, x.row(i).transpose());
      dist[i] = cp.distance;
      dots[i] = std::abs(target.face_normal(cp.face).dot(nx.row(i).transpose()));
    }
  });
  OneWay out;
  for (Eigen::Index i = 0; i < n; ++i) {
    out.mean_distance += dist[i];
    out.normal_dot += dots[i];
    out.within += dist[i] < threshold ? 1.0 : 0.0;
  }
  out.mean_distance /= static_cast<double>(n);
  out.normal_dot /= static_cast<double>(n);
  out.within /= static_cast<double>(n);
  return out;
}

}  // namespace

Points sample_surface(const TemplateMesh& mesh, int n, std::mt19937_64& rng, Points* normals) {
  if (mesh.num_faces() == 0) throw DataError("sample_surface: mesh has no faces");
  std::vector<double> cdf(mesh.num_faces());
  double total = 0.0;
  Points face_n(mesh.num_faces(), 3);
  for (int f = 0; f < mesh.num_faces(); ++f) {
    const Vec3 a = mesh.vertex(mesh.faces(f, 0));
    const Vec3 b = mesh.vertex(mesh.faces(f, 1));
    const Vec3 c = mesh.vertex(mesh.faces(f, 2));
    const Vec3 cr = (b - a).cross(c - a);
    const double len = cr.norm();
    total += 0.5 * len;
    cdf[f] = total;
    face_n.row(f) = (len > 0.0 ? Vec3(cr / len) : Vec3::UnitZ()).transpose();
  }
  if (!(total > 0.0)) throw DataError("sample_surface: mesh has zero area");
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  Points out(n, 3);
  if (normals) normals->resize(n, 3);
  for (int i = 0; i < n; ++i) {
    const double r = uni(rng) * total;
    const int f = static_cast<int>(std::min<std::ptrdiff_t>(
        std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin(), mesh.num_faces() - 1));
    double s = uni(rng);
    double t = uni(rng);
    if (s + t > 1.0) {
      s = 1.0 - s;
      t = 1.0 - t;
    }
    const Vec3 a = mesh.vertex(mesh.faces(f, 0));
    const Vec3 b = mesh.vertex(mesh.faces(f, 1));
    const Vec3 c = mesh.vertex(mesh.faces(f, 2));
    out.row(i) = (a + s * (b - a) + t * (c - a)).transpose();
    if (normals) normals->row(i) = face_n.row(f);
  }
  return out;
}

MeshMetrics compare_meshes(const TemplateMesh& predicted, const TemplateMesh& reference, int n, std::uint64_t seed,
                           double threshold) {
  if (n < 1) throw std::invalid_argument("compare_meshes: need at least one sample");
  std::mt19937_64 rng(seed);
  Points np;
  Points nr;
  const Points xp = sample_surface(predicted, n, rng, &np);
  const Points xr = sample_surface(reference, n, rng, &nr);
  const AccelStructure ap(predicted);
  const AccelStructure ar(reference);
  const OneWay fwd = one_way(xp, np, ar, threshold);
  const OneWay back = one_way(xr, nr, ap, threshold);
  MeshMetrics m;
  m.accuracy = fwd.mean_distance;
  m.completeness = back.mean_distance;
  m.chamfer = 0.5 * (m.accuracy + m.completeness);
  m.normal_consistency = 0.5 * (fwd.normal_dot + back.normal_dot);
  m.precision = fwd.within;
  m.recall = back.within;
  m.fscore = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

}  // namespace cbav
