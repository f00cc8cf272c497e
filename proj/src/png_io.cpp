#include "tdg/png_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <memory>
#include <string>

namespace tdg::png {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

// libpng reports errors by longjmp; the message is parked here first.
struct ErrorSink {
  std::string message;
};

[[noreturn]] void on_error(png_structp png, png_const_charp msg) {
  static_cast<ErrorSink*>(png_get_error_ptr(png))->message = msg;
  png_longjmp(png, 1);
}
void on_warning(png_structp, png_const_charp) {}

}  // namespace

void write(const std::filesystem::path& path, const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw PngError("png write: unsupported channel count");
  if (r.pixels.size() != static_cast<std::size_t>(r.width) * r.height * r.channels) {
    throw PngError("png write: pixel buffer size mismatch for " + path.string());
  }
  File f(std::fopen(path.c_str(), "wb"));
  if (!f) throw PngError("cannot open " + path.string() + " for writing");
  ErrorSink sink;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &sink, on_error, on_warning);
  png_infop info = png_create_info_struct(png);
  const std::size_t stride = static_cast<std::size_t>(r.width) * r.channels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw PngError("png write " + path.string() + ": " + sink.message);
  }
  {
    png_init_io(png, f.get());
    png_set_IHDR(png, info, r.width, r.height, 8, r.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::uint32_t y = 0; y < r.height; ++y) {
      png_write_row(png, const_cast<png_bytep>(r.pixels.data() + y * stride));
    }
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
}

Raster read(const std::filesystem::path& path) {
  File f(std::fopen(path.c_str(), "rb"));
  if (!f) throw PngError("cannot open " + path.string());
  png_byte sig[8] = {};
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw PngError("not a PNG file: " + path.string());
  }
  ErrorSink sink;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &sink, on_error, on_warning);
  png_infop info = png_create_info_struct(png);
  Raster r;
  bool bad_layout = false;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw PngError("png read " + path.string() + ": " + sink.message);
  }
  {
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    bad_layout = png_get_bit_depth(png, info) != 8 || (color != PNG_COLOR_TYPE_RGB && color != PNG_COLOR_TYPE_GRAY);
  }
  if (bad_layout) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw PngError("unsupported PNG layout in " + path.string());
  }
  {
    const int color = png_get_color_type(png, info);
    r.width = png_get_image_width(png, info);
    r.height = png_get_image_height(png, info);
    r.channels = color == PNG_COLOR_TYPE_RGB ? 3 : 1;
    const std::size_t stride = static_cast<std::size_t>(r.width) * r.channels;
    r.pixels.resize(stride * r.height);
    for (std::uint32_t y = 0; y < r.height; ++y) png_read_row(png, r.pixels.data() + y * stride, nullptr);
    png_read_end(png, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return r;
}

}  // namespace tdg::png
