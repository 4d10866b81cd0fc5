#pragma once

#include "cbav/raster.hpp"

#include <filesystem>

namespace cbav {

// 8-bit RGB PNG; values are clamped to [0, 1].
void write_png(const RgbImage& image, const std::filesystem::path& path);
RgbImage read_png(const std::filesystem::path& path);

}  // namespace cbav
