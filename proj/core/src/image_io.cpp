#include "usl/image_io.hpp"

#include "usl/errors.hpp"

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>
#include <vector>

namespace usl::imageio {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

Eigen::MatrixXi read_png_gray(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw io_error("cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw io_error("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw io_error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw io_error("failed to read PNG " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
      color == PNG_COLOR_TYPE_PALETTE)
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);

  std::vector<png_byte> row(png_get_rowbytes(png, info));
  Eigen::MatrixXi img(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x) img(y, x) = row[x];
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png_gray(const std::string& path, const Eigen::MatrixXi& img) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw io_error("cannot open " + path + " for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw io_error("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw io_error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw io_error("failed to write PNG " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.cols()),
               static_cast<png_uint_32>(img.rows()), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<png_byte> row(static_cast<size_t>(img.cols()));
  for (Eigen::Index y = 0; y < img.rows(); ++y) {
    for (Eigen::Index x = 0; x < img.cols(); ++x)
      row[static_cast<size_t>(x)] =
          static_cast<png_byte>(std::clamp(img(y, x), 0, 255));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Eigen::MatrixXi read_png_mask(const std::string& path) {
  Eigen::MatrixXi img = read_png_gray(path);
  return (img.array() >= 128).cast<int>();
}

void write_png_mask(const std::string& path, const Eigen::MatrixXi& mask01) {
  write_png_gray(path, (mask01.array() != 0).cast<int>() * 255);
}

void write_png_soft(const std::string& path, const Eigen::MatrixXd& values01) {
  Eigen::MatrixXi img(values01.rows(), values01.cols());
  for (Eigen::Index y = 0; y < values01.rows(); ++y)
    for (Eigen::Index x = 0; x < values01.cols(); ++x)
      img(y, x) = static_cast<int>(
          std::lround(std::clamp(values01(y, x), 0.0, 1.0) * 255.0));
  write_png_gray(path, img);
}

Eigen::MatrixXd read_depth(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  char magic[4];
  uint16_t h = 0, w = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&h), 2);
  in.read(reinterpret_cast<char*>(&w), 2);
  if (!in || std::memcmp(magic, "DPTH", 4) != 0)
    throw io_error(path + " is not a depth map");
  Eigen::MatrixXd depth(h, w);
  std::vector<float> row(w);
  for (int y = 0; y < h; ++y) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(w) * 4);
    if (!in) throw io_error("truncated depth map " + path);
    for (int x = 0; x < w; ++x) depth(y, x) = row[static_cast<size_t>(x)];
  }
  return depth;
}

void write_depth(const std::string& path, const Eigen::MatrixXd& depth) {
  if (depth.rows() > 0xffff || depth.cols() > 0xffff)
    throw io_error("depth map too large for format");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open " + path + " for writing");
  const uint16_t h = static_cast<uint16_t>(depth.rows());
  const uint16_t w = static_cast<uint16_t>(depth.cols());
  out.write("DPTH", 4);
  out.write(reinterpret_cast<const char*>(&h), 2);
  out.write(reinterpret_cast<const char*>(&w), 2);
  std::vector<float> row(w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) row[static_cast<size_t>(x)] = static_cast<float>(depth(y, x));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(w) * 4);
  }
  if (!out) throw io_error("failed writing " + path);
}

}  // namespace usl::imageio
