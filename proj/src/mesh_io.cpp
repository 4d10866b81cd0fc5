#include "cbav/mesh_io.hpp"

#include "cbav/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

static_assert(std::endian::native == std::endian::little, "PLY I/O assumes a little-endian host");

namespace cbav {

namespace {

std::uint8_t quantize(double c) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0));
}

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw DataError("unexpected end of PLY payload");
  return value;
}

struct PlyProperty {
  std::string name;
  std::string type;
  bool is_list = false;
  std::string count_type;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> properties;
};

double read_scalar(std::istream& in, const std::string& type) {
  if (type == "double" || type == "float64") return get<double>(in);
  if (type == "float" || type == "float32") return get<float>(in);
  if (type == "uchar" || type == "uint8") return get<std::uint8_t>(in);
  if (type == "char" || type == "int8") return get<std::int8_t>(in);
  if (type == "ushort" || type == "uint16") return get<std::uint16_t>(in);
  if (type == "short" || type == "int16") return get<std::int16_t>(in);
  if (type == "uint" || type == "uint32") return get<std::uint32_t>(in);
  if (type == "int" || type == "int32") return get<std::int32_t>(in);
  throw DataError("unsupported PLY property type '" + type + "'");
}

}  // namespace

void write_ply(const TemplateMesh& mesh, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  const bool colors = mesh.has_colors();
  out << "ply\nformat binary_little_endian 1.0\ncomment cbav mesh\n";
  out << "element vertex " << mesh.num_vertices() << "\n";
  out << "property double x\nproperty double y\nproperty double z\n";
  if (colors) out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "element face " << mesh.num_faces() << "\n";
  out << "property list uchar int vertex_indices\nend_header\n";
  for (int i = 0; i < mesh.num_vertices(); ++i) {
    for (int k = 0; k < 3; ++k) put<double>(out, mesh.vertices(i, k));
    if (colors)
      for (int k = 0; k < 3; ++k) put<std::uint8_t>(out, quantize(mesh.vertex_colors(i, k)));
  }
  for (int f = 0; f < mesh.num_faces(); ++f) {
    put<std::uint8_t>(out, 3);
    for (int k = 0; k < 3; ++k) put<std::int32_t>(out, mesh.faces(f, k));
  }
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

TemplateMesh read_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  if (line != "ply") throw DataError("'" + path.string() + "' is not a PLY file");
  std::vector<PlyElement> elements;
  bool binary_le = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string keyword;
    ls >> keyword;
    if (keyword == "format") {
      std::string fmt;
      ls >> fmt;
      binary_le = fmt == "binary_little_endian";
    } else if (keyword == "element") {
      PlyElement e;
      ls >> e.name >> e.count;
      elements.push_back(e);
    } else if (keyword == "property") {
      if (elements.empty()) throw DataError("PLY property before element");
      PlyProperty p;
      ls >> p.type;
      if (p.type == "list") {
        p.is_list = true;
        ls >> p.count_type >> p.type;
      }
      ls >> p.name;
      elements.back().properties.push_back(p);
    } else if (keyword == "end_header") {
      break;
    }
  }
  if (!binary_le) throw DataError("only binary_little_endian PLY is supported");

  TemplateMesh mesh;
  for (const auto& e : elements) {
    if (e.name == "vertex") {
      mesh.vertices.resize(static_cast<Eigen::Index>(e.count), 3);
      bool has_color = false;
      for (const auto& p : e.properties) has_color |= p.name == "red";
      if (has_color) mesh.vertex_colors.resize(static_cast<Eigen::Index>(e.count), 3);
      for (std::size_t i = 0; i < e.count; ++i)
        for (const auto& p : e.properties) {
          if (p.is_list) throw DataError("unexpected list property on vertices");
          const double value = read_scalar(in, p.type);
          const double color_scale = (p.type == "uchar" || p.type == "uint8") ? 1.0 / 255.0 : 1.0;
          if (p.name == "x") mesh.vertices(i, 0) = value;
          else if (p.name == "y") mesh.vertices(i, 1) = value;
          else if (p.name == "z") mesh.vertices(i, 2) = value;
          else if (p.name == "red") mesh.vertex_colors(i, 0) = value * color_scale;
          else if (p.name == "green") mesh.vertex_colors(i, 1) = value * color_scale;
          else if (p.name == "blue") mesh.vertex_colors(i, 2) = value * color_scale;
        }
    } else if (e.name == "face") {
      std::vector<Eigen::Vector3i> tris;
      for (std::size_t i = 0; i < e.count; ++i)
        for (const auto& p : e.properties) {
          if (!p.is_list) {
            read_scalar(in, p.type);
            continue;
          }
          const auto n = static_cast<int>(read_scalar(in, p.count_type));
          std::vector<int> idx(n);
          for (int k = 0; k < n; ++k) idx[k] = static_cast<int>(read_scalar(in, p.type));
          if (p.name != "vertex_indices" && p.name != "vertex_index") continue;
          for (int k = 1; k + 1 < n; ++k) tris.emplace_back(idx[0], idx[k], idx[k + 1]);
        }
      mesh.faces.resize(static_cast<Eigen::Index>(tris.size()), 3);
      for (std::size_t t = 0; t < tris.size(); ++t) mesh.faces.row(t) = tris[t].transpose();
    } else {
      for (std::size_t i = 0; i < e.count; ++i)
        for (const auto& p : e.properties) {
          if (p.is_list) {
            const auto n = static_cast<int>(read_scalar(in, p.count_type));
            for (int k = 0; k < n; ++k) read_scalar(in, p.type);
          } else {
            read_scalar(in, p.type);
          }
        }
    }
  }
  validate(mesh);
  return mesh;
}

void write_obj(const TemplateMesh& mesh, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out.precision(17);
  const bool colors = mesh.has_colors();
  for (int i = 0; i < mesh.num_vertices(); ++i) {
    out << "v " << mesh.vertices(i, 0) << ' ' << mesh.vertices(i, 1) << ' ' << mesh.vertices(i, 2);
    if (colors) out << ' ' << mesh.vertex_colors(i, 0) << ' ' << mesh.vertex_colors(i, 1) << ' ' << mesh.vertex_colors(i, 2);
    out << '\n';
  }
  for (int f = 0; f < mesh.num_faces(); ++f)
    out << "f " << mesh.faces(f, 0) + 1 << ' ' << mesh.faces(f, 1) + 1 << ' ' << mesh.faces(f, 2) + 1 << '\n';
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

TemplateMesh read_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::vector<Vec3> verts;
  std::vector<Vec3> colors;
  std::vector<Eigen::Vector3i> tris;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      Vec3 p;
      ls >> p.x() >> p.y() >> p.z();
      verts.push_back(p);
      Vec3 c;
      if (ls >> c.x() >> c.y() >> c.z()) colors.push_back(c);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string token;
      while (ls >> token) {
        const int i = std::stoi(token.substr(0, token.find('/')));
        idx.push_back(i > 0 ? i - 1 : static_cast<int>(verts.size()) + i);
      }
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) tris.emplace_back(idx[0], idx[k], idx[k + 1]);
    }
  }
  TemplateMesh mesh;
  mesh.vertices.resize(static_cast<Eigen::Index>(verts.size()), 3);
  for (std::size_t i = 0; i < verts.size(); ++i) mesh.vertices.row(i) = verts[i].transpose();
  if (!colors.empty() && colors.size() == verts.size()) {
    mesh.vertex_colors.resize(static_cast<Eigen::Index>(colors.size()), 3);
    for (std::size_t i = 0; i < colors.size(); ++i) mesh.vertex_colors.row(i) = colors[i].transpose();
  }
  mesh.faces.resize(static_cast<Eigen::Index>(tris.size()), 3);
  for (std::size_t t = 0; t < tris.size(); ++t) mesh.faces.row(t) = tris[t].transpose();
  validate(mesh);
  return mesh;
}

void write_mesh(const TemplateMesh& mesh, const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".ply") return write_ply(mesh, path);
  if (ext == ".obj") return write_obj(mesh, path);
  throw DataError("unsupported mesh extension '" + ext + "'");
}

TemplateMesh read_mesh(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".ply") return read_ply(path);
  if (ext == ".obj") return read_obj(path);
  throw DataError("unsupported mesh extension '" + ext + "'");
}

}  // namespace cbav
