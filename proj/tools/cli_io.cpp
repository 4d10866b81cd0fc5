#include "cli_io.hpp"

#include "cbav/errors.hpp"
#include "cbav/mesh_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>

namespace cbav::cli {

using nlohmann::json;

namespace {

json parse_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void dump(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << std::setw(2) << j << '\n';
  if (!out) throw DataError("failed writing " + path.string());
}

Vec3 vec3(const json& j, const char* key, const std::filesystem::path& path) {
  if (!j.contains(key)) throw DataError(path.string() + ": missing '" + key + "'");
  const auto v = j.at(key).get<std::vector<double>>();
  if (v.size() != 3) throw DataError(path.string() + ": '" + key + "' needs three numbers");
  return {v[0], v[1], v[2]};
}

}  // namespace

void write_pose(const PoseParams& pose, int subject_id, const std::filesystem::path& path) {
  json j;
  j["subject_id"] = subject_id;
  json rot = json::array();
  for (Eigen::Index r = 0; r < pose.joint_rotations.rows(); ++r)
    rot.push_back({pose.joint_rotations(r, 0), pose.joint_rotations(r, 1), pose.joint_rotations(r, 2)});
  j["joint_rotations"] = rot;
  j["shape_coeffs"] = std::vector<double>(pose.shape_coeffs.data(), pose.shape_coeffs.data() + pose.shape_coeffs.size());
  j["root_translation"] = {pose.root_translation.x(), pose.root_translation.y(), pose.root_translation.z()};
  dump(j, path);
}

PoseParams read_pose(const std::filesystem::path& path, int* subject_id) {
  const json j = parse_file(path);
  PoseParams pose;
  try {
    const auto rot = j.at("joint_rotations").get<std::vector<std::vector<double>>>();
    pose.joint_rotations.resize(static_cast<Eigen::Index>(rot.size()), 3);
    for (std::size_t r = 0; r < rot.size(); ++r) {
      if (rot[r].size() != 3) throw DataError(path.string() + ": joint rotations need three numbers each");
      pose.joint_rotations.row(r) << rot[r][0], rot[r][1], rot[r][2];
    }
    const auto shape = j.value("shape_coeffs", std::vector<double>{});
    pose.shape_coeffs = Eigen::Map<const Eigen::VectorXd>(shape.data(), static_cast<Eigen::Index>(shape.size()));
    pose.root_translation = j.contains("root_translation") ? vec3(j, "root_translation", path) : Vec3::Zero();
    if (subject_id) *subject_id = j.value("subject_id", -1);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return pose;
}

void write_camera(const Camera& camera, const std::filesystem::path& path) {
  json j;
  j["position"] = {camera.position.x(), camera.position.y(), camera.position.z()};
  j["look_at"] = {camera.look_at.x(), camera.look_at.y(), camera.look_at.z()};
  j["up"] = {camera.up.x(), camera.up.y(), camera.up.z()};
  j["fov_y"] = camera.fov_y;
  j["width"] = camera.width;
  j["height"] = camera.height;
  dump(j, path);
}

Camera read_camera(const std::filesystem::path& path) {
  const json j = parse_file(path);
  Camera c;
  try {
    c.position = vec3(j, "position", path);
    c.look_at = vec3(j, "look_at", path);
    if (j.contains("up")) c.up = vec3(j, "up", path);
    c.fov_y = j.at("fov_y").get<double>();
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  try {
    validate(c);
  } catch (const std::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return c;
}

std::filesystem::path pose_sidecar(const std::filesystem::path& mesh_path) {
  std::filesystem::path p = mesh_path;
  p.replace_extension(".pose.json");
  return p;
}

std::vector<Scan> read_scan_dir(const std::filesystem::path& dir, const TemplateMesh& tmpl) {
  if (!std::filesystem::is_directory(dir)) throw DataError("scan directory " + dir.string() + " does not exist");
  std::vector<std::filesystem::path> meshes;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".ply" || ext == ".obj")) meshes.push_back(e.path());
  }
  std::sort(meshes.begin(), meshes.end());
  std::vector<Scan> scans;
  for (std::size_t i = 0; i < meshes.size(); ++i) {
    Scan s;
    s.mesh = read_mesh(meshes[i]);
    const auto sidecar = pose_sidecar(meshes[i]);
    if (!std::filesystem::exists(sidecar)) throw DataError(meshes[i].string() + ": missing pose file " + sidecar.string());
    int id = -1;
    s.pose = read_pose(sidecar, &id);
    s.subject_id = id >= 0 ? id : static_cast<int>(i);
    if (s.pose.joint_rotations.rows() != tmpl.num_joints() || s.pose.shape_coeffs.size() != tmpl.num_shapes())
      throw DataError(sidecar.string() + ": pose does not match the template");
    if (!s.mesh.has_colors()) throw DataError(meshes[i].string() + ": scan has no vertex colors");
    scans.push_back(std::move(s));
  }
  return scans;
}

}  // namespace cbav::cli
