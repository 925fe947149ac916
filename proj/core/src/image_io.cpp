#include "tomoforge/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

#include "tomoforge/error.hpp"

namespace tomoforge {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

File open_file(const std::string& path, const char* mode) {
  File f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path);
  return f;
}

}  // namespace

Array2<std::uint16_t> read_png16(const std::string& path) {
  File f = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IoError(path + ": not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng init failed");
  }
  Array2<std::uint16_t> out;
  std::string err;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path + ": PNG decode failed");
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY) err = path + ": expected a grayscale PNG";
  else if (depth != 8 && depth != 16) err = path + ": unsupported bit depth " + std::to_string(depth);
  if (err.empty()) {
    const auto w = static_cast<int>(png_get_image_width(png, info));
    const auto h = static_cast<int>(png_get_image_height(png, info));
    if (depth == 16) png_set_swap(png);  // PNG is big-endian; read native order
    png_read_update_info(png, info);
    std::vector<unsigned char> buf(png_get_rowbytes(png, info) * static_cast<std::size_t>(h));
    std::vector<png_bytep> rows(h);
    for (int r = 0; r < h; ++r) rows[r] = buf.data() + png_get_rowbytes(png, info) * r;
    png_read_image(png, rows.data());
    out = Array2<std::uint16_t>(h, w);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        if (depth == 16) {
          std::uint16_t v;
          std::memcpy(&v, rows[r] + 2 * c, 2);
          out(r, c) = v;
        } else {
          out(r, c) = static_cast<std::uint16_t>(rows[r][c] * 257);
        }
      }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (!err.empty()) throw IoError(err);
  return out;
}

void write_png16(const std::string& path, const Array2<std::uint16_t>& img) {
  if (img.rows() == 0 || img.cols() == 0) throw IoError(path + ": empty image");
  File f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng init failed");
  }
  std::vector<unsigned char> buf(static_cast<std::size_t>(img.cols()) * 2 * img.rows());
  for (int r = 0; r < img.rows(); ++r)
    for (int c = 0; c < img.cols(); ++c) {
      const std::uint16_t v = img(r, c);
      const std::size_t k = (static_cast<std::size_t>(r) * img.cols() + c) * 2;
      buf[k] = static_cast<unsigned char>(v >> 8);
      buf[k + 1] = static_cast<unsigned char>(v & 0xff);
    }
  std::vector<png_bytep> rows(img.rows());
  for (int r = 0; r < img.rows(); ++r) rows[r] = buf.data() + static_cast<std::size_t>(r) * img.cols() * 2;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path + ": PNG encode failed");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, img.cols(), img.rows(), 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(f.get()) != 0) throw IoError(path + ": write failed");
}

void write_image_png16(const std::string& path, const Array2<double>& img, double lo, double hi) {
  if (!(hi > lo)) throw std::invalid_argument("write_image_png16: need hi > lo");
  Array2<std::uint16_t> q(img.rows(), img.cols());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double t = std::clamp((img.values()[i] - lo) / (hi - lo), 0.0, 1.0);
    q.values()[i] = static_cast<std::uint16_t>(std::lround(t * 65535.0));
  }
  write_png16(path, q);
}

Array2<double> tile_images(const std::vector<Array2<double>>& images, int cols, int pad) {
  if (images.empty() || cols < 1 || pad < 0) throw std::invalid_argument("tile_images: bad layout");
  const int h = images[0].rows(), w = images[0].cols();
  for (const auto& im : images)
    if (im.rows() != h || im.cols() != w) throw ShapeError("tile_images: tiles differ in size");
  const int n = static_cast<int>(images.size());
  const int ncol = std::min(cols, n), nrow = (n + cols - 1) / cols;
  Array2<double> out(nrow * h + (nrow - 1) * pad, ncol * w + (ncol - 1) * pad, 0.0);
  for (int k = 0; k < n; ++k) {
    const int r0 = (k / cols) * (h + pad), c0 = (k % cols) * (w + pad);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) out(r0 + r, c0 + c) = images[k](r, c);
  }
  return out;
}

}  // namespace tomoforge
