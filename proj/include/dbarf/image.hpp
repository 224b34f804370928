// Image container plus PNG (8-bit color, 16-bit gray) and ASCII PPM I/O.
#pragma once

#include <png.h>

#include <cstdio>
#include <fstream>

#include "dbarf/core.hpp"

namespace dbarf {

// RGB image, values in [0,1], row-major [H,W,3].
struct Image {
  Array rgb;

  Image() = default;
  Image(int h, int w) : rgb(Shape{h, w, 3}) {}
  int height() const { return static_cast<int>(rgb.dim(0)); }
  int width() const { return static_cast<int>(rgb.dim(1)); }
  double& at(int y, int x, int c) { return rgb[(static_cast<int64_t>(y) * width() + x) * 3 + c]; }
  double at(int y, int x, int c) const {
    return rgb[(static_cast<int64_t>(y) * width() + x) * 3 + c];
  }

  Array gray() const {
    Array g(Shape{height(), width()});
    for (int64_t i = 0; i < g.numel(); ++i)
      g[i] = 0.299 * rgb[i * 3] + 0.587 * rgb[i * 3 + 1] + 0.114 * rgb[i * 3 + 2];
    return g;
  }
};

namespace detail {
struct PngCloser {
  std::FILE* f = nullptr;
  ~PngCloser() {
    if (f) std::fclose(f);
  }
};
}  // namespace detail

inline void save_png(const std::string& path, const Image& img) {
  detail::PngCloser fc{std::fopen(path.c_str(), "wb")};
  if (!fc.f) throw IoError("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failure writing " + path);
  }
  png_init_io(png, fc.f);
  const int h = img.height(), w = img.width();
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(img.at(y, x, c), 0.0, 1.0);
        row[static_cast<size_t>(x) * 3 + c] = static_cast<png_byte>(std::lround(v * 255.0));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Image load_png(const std::string& path) {
  detail::PngCloser fc{std::fopen(path.c_str(), "rb")};
  if (!fc.f) throw IoError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng failure reading " + path);
  }
  png_init_io(png, fc.f);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  Image img(h, w);
  std::vector<png_byte> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = row[static_cast<size_t>(x) * 3 + c] / 255.0;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

// 16-bit grayscale PNG for depth maps; `scale` maps counts back to scene
// units (depth = count / 65535 * scale) and is recorded in a sidecar file.
inline void save_depth_png(const std::string& path, const Array& depth, double scale) {
  if (depth.ndim() != 2) throw ShapeError("save_depth_png: expected [H,W]");
  detail::PngCloser fc{std::fopen(path.c_str(), "wb")};
  if (!fc.f) throw IoError("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failure writing " + path);
  }
  png_init_io(png, fc.f);
  const int h = static_cast<int>(depth.dim(0)), w = static_cast<int>(depth.dim(1));
  png_set_IHDR(png, info, w, h, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<size_t>(w) * 2);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double v = std::clamp(depth[static_cast<int64_t>(y) * w + x] / scale, 0.0, 1.0);
      const uint16_t q = static_cast<uint16_t>(std::lround(v * 65535.0));
      row[static_cast<size_t>(x) * 2] = static_cast<png_byte>(q >> 8);  // PNG is big-endian
      row[static_cast<size_t>(x) * 2 + 1] = static_cast<png_byte>(q & 0xff);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::ofstream sidecar(path + ".scale.txt");
  sidecar.precision(17);
  sidecar << "scale " << scale << "\n";
}

// ---------------------------------------------------------------------------
// ASCII PPM (P3)

inline void save_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "P3\n" << img.width() << " " << img.height() << "\n255\n";
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(img.at(y, x, c), 0.0, 1.0);
        f << static_cast<int>(std::lround(v * 255.0)) << (c == 2 && x + 1 == img.width() ? "" : " ");
      }
    f << "\n";
  }
}

inline Image load_ppm(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P3") throw IoError(path + ": not an ASCII PPM (P3) file");
  int w = 0, h = 0, maxval = 0;
  f >> w >> h >> maxval;
  if (w <= 0 || h <= 0 || maxval <= 0) throw IoError(path + ": malformed PPM header");
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        int v = 0;
        if (!(f >> v)) throw IoError(path + ": truncated PPM data");
        img.at(y, x, c) = static_cast<double>(v) / maxval;
      }
  return img;
}

}  // namespace dbarf
