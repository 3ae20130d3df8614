#pragma once

// 8-bit PNG in/out on top of libpng's simplified API. Images are 3 x H x W
// tensors in [0,1].

#include <png.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pafu/error.hpp"
#include "pafu/tensor.hpp"

namespace pafu {

/// Grayscale is promoted to three channels; alpha is dropped. 16-bit and
/// palette images are rejected.
inline Tensor read_png(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw FormatError("read_png: '" + path + "': " + image.message);
  }
  if (image.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&image);
    throw FormatError("read_png: '" + path + "': 16-bit images are not supported");
  }
  if (image.format & PNG_FORMAT_FLAG_COLORMAP) {
    png_image_free(&image);
    throw FormatError("read_png: '" + path + "': palette images are not supported");
  }
  image.format = PNG_FORMAT_RGB;
  const std::size_t H = image.height, W = image.width;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    throw FormatError("read_png: '" + path + "': " + image.message);
  }
  Tensor t(Shape{3, H, W});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t c = 0; c < 3; ++c) t(0, c, i, j) = static_cast<float>(buf[(i * W + j) * 3 + c]) / 255.0f;
  return t;
}

/// round-half-up(clamp(v, 0, 1) * 255)
inline std::uint8_t quantize_u8(float v) {
  const double c = std::fmin(1.0, std::fmax(0.0, static_cast<double>(v)));
  return static_cast<std::uint8_t>(std::floor(c * 255.0 + 0.5));
}

/// Writes a 3 x H x W (or 1 x H x W, written as gray RGB) image.
inline void write_png(const Tensor& img, const std::string& path) {
  if (img.n() != 1 || (img.c() != 3 && img.c() != 1)) {
    throw DimensionError("write_png: expected 3xHxW or 1xHxW, got " + img.shape().str());
  }
  const std::size_t H = img.h(), W = img.w();
  std::vector<std::uint8_t> buf(H * W * 3);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t c = 0; c < 3; ++c) buf[(i * W + j) * 3 + c] = quantize_u8(img(0, img.c() == 3 ? c : 0, i, j));
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(W);
  image.height = static_cast<png_uint_32>(H);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw Error("write_png: '" + path + "': " + image.message);
  }
}

}  // namespace pafu
