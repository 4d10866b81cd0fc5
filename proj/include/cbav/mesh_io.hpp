#pragma once

#include "cbav/geometry.hpp"

#include <filesystem>

namespace cbav {

// Binary little-endian PLY: double x/y/z, optional uchar red/green/blue,
// uchar-counted int face lists. Colors quantize to 1/255.
void write_ply(const TemplateMesh& mesh, const std::filesystem::path& path);
// Reads binary little-endian PLY with float or double coordinates and
// optional uchar or float colors. Skeleton fields stay empty.
TemplateMesh read_ply(const std::filesystem::path& path);

// Wavefront OBJ with optional "v x y z r g b" vertex colors.
void write_obj(const TemplateMesh& mesh, const std::filesystem::path& path);
TemplateMesh read_obj(const std::filesystem::path& path);

// Dispatches on the file extension (.ply / .obj).
void write_mesh(const TemplateMesh& mesh, const std::filesystem::path& path);
TemplateMesh read_mesh(const std::filesystem::path& path);

}  // namespace cbav
