#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace t3 {

struct ImageDecodeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Interleaved 8-bit RGB, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t& at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  bool empty() const { return rgb.empty(); }
};

std::string encode_jpeg(const Image& img, int quality = 95);
Image decode_jpeg(std::string_view bytes);

/// Single-channel 8-bit grayscale PNG or RGB PNG.
void write_png(const std::string& path, const Image& img);
void write_png_gray(const std::string& path, int width, int height, const std::vector<std::uint8_t>& pixels);

Image resize_bilinear(const Image& img, int width, int height);
Image crop(const Image& img, int x0, int y0, int width, int height);

/// 0.299 R + 0.587 G + 0.114 B, row-major doubles in [0, 255].
std::vector<double> to_grayscale(const Image& img);

}  // namespace t3
