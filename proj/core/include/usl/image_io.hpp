#pragma once

// 8-bit grayscale PNG I/O (masks and quantized soft silhouettes) and the raw
// float depth-map format: magic "DPTH", u16 height, u16 width (little-endian),
// then height*width float32 LE values in row-major order.

#include <Eigen/Dense>

#include <string>

namespace usl::imageio {

Eigen::MatrixXi read_png_gray(const std::string& path);  // values 0..255
void write_png_gray(const std::string& path, const Eigen::MatrixXi& img);

// 0/1 mask <-> 0/255 image (threshold at 128 on read)
Eigen::MatrixXi read_png_mask(const std::string& path);
void write_png_mask(const std::string& path, const Eigen::MatrixXi& mask01);

// [0,1] values linearly quantized to 0..255
void write_png_soft(const std::string& path, const Eigen::MatrixXd& values01);

Eigen::MatrixXd read_depth(const std::string& path);
void write_depth(const std::string& path, const Eigen::MatrixXd& depth);

}  // namespace usl::imageio
