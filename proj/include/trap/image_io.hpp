#pragma once

// PNG encode/decode for image samples (8-bit RGB via the libpng simplified API).

#include <png.h>

#include <cmath>
#include <string>
#include <vector>

#include "trap/common.hpp"
#include "trap/geometry.hpp"

namespace trap {

inline void write_png(const std::string& path, int height, int width,
                      const ad::Matrix& pixels) {
  if (pixels.rows() != Eigen::Index(height) * width || pixels.cols() != 3)
    throw dim_error("write_png: pixel matrix shape");
  std::vector<unsigned char> buf(size_t(height) * width * 3);
  for (Eigen::Index i = 0; i < pixels.rows(); ++i)
    for (int c = 0; c < 3; ++c) {
      double v = std::clamp(pixels(i, c), 0.0, 1.0);
      buf[size_t(i) * 3 + size_t(c)] = (unsigned char)(std::lround(v * 255.0));
    }
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = png_uint_32(width);
  pi.height = png_uint_32(height);
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, buf.data(), 0, nullptr))
    throw io_error("write_png: " + path + ": " + pi.message);
}

inline void write_png(const std::string& path, const ImageSample& img) {
  write_png(path, img.height, img.width, img.pixels);
}

inline ImageSample read_png(const std::string& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    throw io_error("read_png: " + path + ": " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, buf.data(), 0, nullptr))
    throw io_error("read_png: " + path + ": " + pi.message);
  ImageSample img(int(pi.height), int(pi.width));
  for (Eigen::Index i = 0; i < img.pixels.rows(); ++i)
    for (int c = 0; c < 3; ++c) img.pixels(i, c) = buf[size_t(i) * 3 + size_t(c)] / 255.0;
  return img;
}

}  // namespace trap
