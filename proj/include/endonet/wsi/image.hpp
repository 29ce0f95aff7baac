#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace endonet::wsi {

/// 8-bit RGB raster, row-major, channels interleaved.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h * 3, fill) {}

  bool empty() const noexcept { return width == 0 || height == 0; }
  std::uint8_t* px(std::size_t x, std::size_t y) { return pixels.data() + (y * width + x) * 3; }
  const std::uint8_t* px(std::size_t x, std::size_t y) const { return pixels.data() + (y * width + x) * 3; }
  void set(std::size_t x, std::size_t y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    std::uint8_t* p = px(x, y);
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }

  /// Copy of the w x h window at (x, y); the window must lie inside.
  Image crop(std::size_t x, std::size_t y, std::size_t w, std::size_t h) const;

  bool operator==(const Image&) const = default;
};

struct PngInfo {
  std::size_t width = 0;
  std::size_t height = 0;
};

/// Writes 8-bit RGB without timestamps or text chunks, so equal images give
/// equal bytes.
void write_png(const std::filesystem::path& path, const Image& image, int compression_level = 1);
Image read_png(const std::filesystem::path& path);
/// Header-only read.
PngInfo read_png_info(const std::filesystem::path& path);

}  // namespace endonet::wsi
