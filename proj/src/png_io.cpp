#include "bnerf/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>
#include <memory>

namespace bnerf {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// libpng reports errors by longjmp; the message is parked here until the setjmp site rethrows.
thread_local std::string png_message;

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
  png_message = msg;
  png_longjmp(png, 1);
}
void png_warning_fn(png_structp, png_const_charp) {}

void write_rows(const std::filesystem::path& path, int w, int h, int color_type, int bit_depth,
                const std::vector<std::vector<png_byte>>& rows) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw InvalidArgument("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw InvalidArgument(path.string() + ": png: " + png_message);
  }
  {
    png_init_io(png, f.get());
    png_set_IHDR(png, info, w, h, bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (const auto& r : rows) png_write_row(png, r.data());
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png8(const std::filesystem::path& path, const Image& im) {
  if (im.channels != 1 && im.channels != 3) throw InvalidArgument("png8 needs 1 or 3 channels");
  std::vector<std::vector<png_byte>> rows(im.height, std::vector<png_byte>(im.width * im.channels));
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < im.channels; ++c)
        rows[y][x * im.channels + c] =
            static_cast<png_byte>(std::lround(std::clamp(im.at(x, y, c), 0.0, 1.0) * 255.0));
  write_rows(path, im.width, im.height, im.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, 8, rows);
}

void write_png16(const std::filesystem::path& path, const Image& im, double scale) {
  if (im.channels != 1) throw InvalidArgument("png16 needs 1 channel");
  if (!(scale > 0.0)) throw InvalidArgument("png16 scale must be positive");
  std::vector<std::vector<png_byte>> rows(im.height, std::vector<png_byte>(im.width * 2));
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x) {
      const auto v = static_cast<unsigned>(std::clamp<long>(std::lround(im.at(x, y) / scale), 0, 65535));
      rows[y][2 * x] = static_cast<png_byte>(v >> 8);  // PNG is big-endian
      rows[y][2 * x + 1] = static_cast<png_byte>(v & 0xff);
    }
  write_rows(path, im.width, im.height, PNG_COLOR_TYPE_GRAY, 16, rows);
}

Image read_png(const std::filesystem::path& path, int* bit_depth_out) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw ParseError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  png_infop info = png_create_info_struct(png);
  Image im;
  std::vector<png_byte> row;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError(path.string() + ": png: " + png_message);
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const int w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int type = png_get_color_type(png, info);
  if (type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (type == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int channels = png_get_channels(png, info);
  const int bd = png_get_bit_depth(png, info);
  if (bit_depth_out) *bit_depth_out = bd;
  row.resize(png_get_rowbytes(png, info));
  im = Image(w, h, channels);
  const double denom = bd == 16 ? 65535.0 : 255.0;
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        const std::size_t k = static_cast<std::size_t>(x) * channels + c;
        const unsigned v = bd == 16 ? (row[2 * k] << 8) | row[2 * k + 1] : row[k];
        im.at(x, y, c) = v / denom;
      }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return im;
}

void write_f32(const std::filesystem::path& p, const Image& im) {
  std::vector<float> v(im.data.begin(), im.data.end());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw InvalidArgument("cannot write " + p.string());
  f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
}

Image read_f32(const std::filesystem::path& p, int w, int h, int c) {
  Image im(w, h, c);
  std::vector<float> v(im.data.size());
  std::ifstream f(p, std::ios::binary);
  f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  if (!f || f.peek() != std::char_traits<char>::eof())
    throw ParseError(p.string() + ": expected " + std::to_string(v.size()) + " float32 values");
  std::copy(v.begin(), v.end(), im.data.begin());
  return im;
}

}  // namespace bnerf
