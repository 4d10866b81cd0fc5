#include "cbav/image_io.hpp"

#include "cbav/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace cbav {

void write_png(const RgbImage& image, const std::filesystem::path& path) {
  std::vector<std::uint8_t> buffer(static_cast<std::size_t>(image.width) * image.height * 3);
  for (std::size_t i = 0; i < image.pixels.size(); ++i)
    for (int c = 0; c < 3; ++c)
      buffer[3 * i + c] = static_cast<std::uint8_t>(std::lround(std::clamp(image.pixels[i][c], 0.0f, 1.0f) * 255.0f));
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, buffer.data(), 0, nullptr))
    throw DataError("failed writing PNG '" + path.string() + "': " + png.message);
}

RgbImage read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str()))
    throw DataError("cannot read PNG '" + path.string() + "': " + png.message);
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr))
    throw DataError("cannot decode PNG '" + path.string() + "': " + png.message);
  RgbImage image(static_cast<int>(png.width), static_cast<int>(png.height));
  for (std::size_t i = 0; i < image.pixels.size(); ++i)
    image.pixels[i] = Vec3f(buffer[3 * i], buffer[3 * i + 1], buffer[3 * i + 2]) / 255.0f;
  return image;
}

}  // namespace cbav
