#pragma once

#include <cstdint>
#include <vector>

namespace emcot {

// Tightly packed 8-bit RGB image, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> rgb;  // size = width * height * 3

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<size_t>(w) * h * 3, 0) {}

  uint8_t* px(int x, int y) { return &rgb[(static_cast<size_t>(y) * width + x) * 3]; }
  const uint8_t* px(int x, int y) const {
    return &rgb[(static_cast<size_t>(y) * width + x) * 3];
  }
  void set(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
    auto* p = px(x, y);
    p[0] = r; p[1] = g; p[2] = b;
  }
  bool operator==(const Image& o) const {
    return width == o.width && height == o.height && rgb == o.rgb;
  }
};

// Minimal PNG codec (8-bit RGB only, zlib-backed). Decoder handles the
// standard per-row filters so it can read files from other writers too.
std::vector<uint8_t> png_encode(const Image& img);
Image png_decode(const std::vector<uint8_t>& bytes);

}  // namespace emcot
