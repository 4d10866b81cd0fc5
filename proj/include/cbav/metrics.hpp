#pragma once

#include "cbav/geometry.hpp"

#include <cstdint>
#include <random>

namespace cbav {

// Area-weighted surface samples with their face normals.
Points sample_surface(const TemplateMesh& mesh, int n, std::mt19937_64& rng, Points* normals = nullptr);

struct MeshMetrics {
  double accuracy = 0.0;      // mean distance, predicted samples to the reference surface
  double completeness = 0.0;  // mean distance, reference samples to the predicted surface
  double chamfer = 0.0;       // (accuracy + completeness) / 2
  double normal_consistency = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double fscore = 0.0;
};

// Point-to-surface metrics from n samples per mesh; normal consistency is
// the mean |n_p . n_q| against the closest face, averaged over both
// directions. `threshold` is the f-score distance.
MeshMetrics compare_meshes(const TemplateMesh& predicted, const TemplateMesh& reference, int n, std::uint64_t seed,
                           double threshold);

}  // namespace cbav
