#pragma once

#include "cbav/geometry.hpp"
#include "cbav/training.hpp"

#include <filesystem>
#include <vector>

namespace cbav::cli {

// JSON sidecars: {"subject_id", "joint_rotations", "shape_coeffs", "root_translation"}.
void write_pose(const PoseParams& pose, int subject_id, const std::filesystem::path& path);
PoseParams read_pose(const std::filesystem::path& path, int* subject_id = nullptr);

// {"position", "look_at", "up", "fov_y", "width", "height"}.
void write_camera(const Camera& camera, const std::filesystem::path& path);
Camera read_camera(const std::filesystem::path& path);

// scan_*.ply files with matching *.pose.json sidecars, sorted by name.
std::vector<Scan> read_scan_dir(const std::filesystem::path& dir, const TemplateMesh& tmpl);

std::filesystem::path pose_sidecar(const std::filesystem::path& mesh_path);

}  // namespace cbav::cli
