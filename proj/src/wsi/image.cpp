#include "endonet/wsi/image.hpp"

#include <png.h>
#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <memory>
#include <string>

#include "endonet/common/error.hpp"

namespace endonet::wsi {

Image Image::crop(std::size_t x, std::size_t y, std::size_t w, std::size_t h) const {
  if (x + w > width || y + h > height) {
    throw Error(ErrorCode::OutsideSlide, "crop window exceeds image bounds");
  }
  Image out(w, h);
  for (std::size_t r = 0; r < h; ++r) {
    std::memcpy(out.px(0, r), px(x, y + r), w * 3);
  }
  return out;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) {
    throw Error(mode[0] == 'r' ? ErrorCode::MissingLevel : ErrorCode::Io,
                "cannot open " + path.string());
  }
  return f;
}

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text) *text = msg;
  png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

struct ReadHandles {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~ReadHandles() { png_destroy_read_struct(&png, info ? &info : nullptr, nullptr); }
};

// Reads header and, when `image` is non-null, the full raster converted to RGB8.
PngInfo read_impl(const std::filesystem::path& path, Image* image) {
  FilePtr f = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw Error(ErrorCode::Corrupt, path.string() + " is not a PNG file");
  }
  std::string message;
  ReadHandles h;
  h.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_fail, png_warn);
  if (!h.png) throw Error(ErrorCode::Io, "png_create_read_struct failed");
  h.info = png_create_info_struct(h.png);
  if (!h.info) throw Error(ErrorCode::Io, "png_create_info_struct failed");
  std::vector<png_bytep> rows;
  PngInfo result;
  if (setjmp(png_jmpbuf(h.png))) {
    throw Error(ErrorCode::Corrupt, path.string() + ": " + message);
  }
  png_init_io(h.png, f.get());
  png_set_sig_bytes(h.png, 8);
  png_read_info(h.png, h.info);
  result.width = png_get_image_width(h.png, h.info);
  result.height = png_get_image_height(h.png, h.info);
  if (!image) return result;

  const int color = png_get_color_type(h.png, h.info);
  const int depth = png_get_bit_depth(h.png, h.info);
  if (depth == 16) png_set_strip_16(h.png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(h.png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(h.png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(h.png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(h.png);
  png_read_update_info(h.png, h.info);

  *image = Image(result.width, result.height);
  rows.resize(result.height);
  for (std::size_t y = 0; y < result.height; ++y) rows[y] = image->px(0, y);
  png_read_image(h.png, rows.data());
  png_read_end(h.png, nullptr);
  return result;
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image, int compression_level) {
  if (image.empty()) throw Error(ErrorCode::InvalidArgument, "write_png: empty image");
  FilePtr f = open_file(path, "wb");
  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, png_fail, png_warn);
  if (!png) throw Error(ErrorCode::Io, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows(image.height);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCode::Io, "writing " + path.string() + ": " + message);
  }
  png_init_io(png, f.get());
  png_set_compression_level(png, compression_level);
  png_set_filter(png, PNG_FILTER_TYPE_BASE, PNG_FILTER_SUB);
  png_set_compression_strategy(png, Z_RLE);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image.height; ++y) rows[y] = const_cast<png_bytep>(image.px(0, y));
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(f.get()) != 0) throw Error(ErrorCode::Io, "flush failed for " + path.string());
}

Image read_png(const std::filesystem::path& path) {
  Image image;
  read_impl(path, &image);
  return image;
}

PngInfo read_png_info(const std::filesystem::path& path) { return read_impl(path, nullptr); }

}  // namespace endonet::wsi
