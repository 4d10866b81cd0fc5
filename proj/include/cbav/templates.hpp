#pragma once

#include "cbav/geometry.hpp"

#include <functional>
#include <string>

namespace cbav {

// Subdivided icosahedron projected to a sphere: 12, 42, 162, 642, 2562 ...
// vertices. Carries one root joint at the center with unit weights.
TemplateMesh make_icosphere(int subdivisions, double radius = 1.0, const Vec3& center = Vec3::Zero());

// Smooth-union implicit body (capsules and spheres), meters, y up, pelvis at
// the origin. Negative inside.
double humanoid_implicit(const Vec3& x);

// Names of the 16 humanoid joints in kinematic order.
const std::vector<std::string>& humanoid_joint_names();

// Bundled low-poly humanoid template: surface-nets polygonization of
// humanoid_implicit with relaxation, 16 joints, distance-based skinning
// weights, two blendshapes (girth, height). Deterministic.
TemplateMesh make_humanoid(double grid_spacing = 0.044);

// Named template: "humanoid" or "icosphere".
TemplateMesh make_template(const std::string& name);

// Quad-dominant polygonization of an implicit function on a regular grid.
// Quads are split along their shorter diagonal. Used to build templates.
TemplateMesh surface_nets(const std::function<double(const Vec3&)>& field, const Eigen::AlignedBox3d& box,
                          double spacing);

}  // namespace cbav
