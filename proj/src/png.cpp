#include "emcot/image.hpp"

#include <zlib.h>

#include <cstring>
#include <stdexcept>

namespace emcot {
namespace {

uint32_t crc_of(const uint8_t* data, size_t len) {
  return static_cast<uint32_t>(crc32(0L, data, static_cast<uInt>(len)));
}

void put_u32(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(static_cast<uint8_t>(x >> 24));
  v.push_back(static_cast<uint8_t>(x >> 16));
  v.push_back(static_cast<uint8_t>(x >> 8));
  v.push_back(static_cast<uint8_t>(x));
}

uint32_t get_u32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

void append_chunk(std::vector<uint8_t>& out, const char* type,
                  const std::vector<uint8_t>& payload) {
  put_u32(out, static_cast<uint32_t>(payload.size()));
  std::vector<uint8_t> body;
  body.insert(body.end(), type, type + 4);
  body.insert(body.end(), payload.begin(), payload.end());
  out.insert(out.end(), body.begin(), body.end());
  put_u32(out, crc_of(body.data(), body.size()));
}

int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

std::vector<uint8_t> png_encode(const Image& img) {
  if (img.width <= 0 || img.height <= 0) throw std::invalid_argument("png: empty image");
  const size_t stride = static_cast<size_t>(img.width) * 3;
  std::vector<uint8_t> raw;
  raw.reserve((stride + 1) * img.height);
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), img.rgb.begin() + y * stride, img.rgb.begin() + (y + 1) * stride);
  }

  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png: deflate failed");
  comp.resize(comp_len);

  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<uint8_t> ihdr;
  put_u32(ihdr, static_cast<uint32_t>(img.width));
  put_u32(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter method
  ihdr.push_back(0);   // no interlace
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", comp);
  append_chunk(out, "IEND", {});
  return out;
}

Image png_decode(const std::vector<uint8_t>& bytes) {
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
    throw std::invalid_argument("png: bad signature");

  int width = 0, height = 0;
  std::vector<uint8_t> idat;
  size_t pos = 8;
  while (pos + 8 <= bytes.size()) {
    uint32_t len = get_u32(&bytes[pos]);
    if (pos + 12 + len > bytes.size()) throw std::invalid_argument("png: truncated chunk");
    std::string type(reinterpret_cast<const char*>(&bytes[pos + 4]), 4);
    const uint8_t* payload = &bytes[pos + 8];
    if (type == "IHDR") {
      width = static_cast<int>(get_u32(payload));
      height = static_cast<int>(get_u32(payload + 4));
      if (payload[8] != 8 || payload[9] != 2)
        throw std::invalid_argument("png: only 8-bit RGB supported");
      if (payload[12] != 0) throw std::invalid_argument("png: interlace unsupported");
    } else if (type == "IDAT") {
      idat.insert(idat.end(), payload, payload + len);
    } else if (type == "IEND") {
      break;
    }
    pos += 12 + len;
  }
  if (width <= 0 || height <= 0) throw std::invalid_argument("png: missing IHDR");

  const size_t stride = static_cast<size_t>(width) * 3;
  std::vector<uint8_t> raw((stride + 1) * height);
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw std::runtime_error("png: inflate failed");

  Image img(width, height);
  std::vector<uint8_t> prev(stride, 0);
  for (int y = 0; y < height; ++y) {
    const uint8_t filter = raw[y * (stride + 1)];
    const uint8_t* src = &raw[y * (stride + 1) + 1];
    uint8_t* dst = &img.rgb[y * stride];
    for (size_t i = 0; i < stride; ++i) {
      int a = i >= 3 ? dst[i - 3] : 0;
      int b = prev[i];
      int c = i >= 3 ? prev[i - 3] : 0;
      int x = src[i];
      switch (filter) {
        case 0: dst[i] = static_cast<uint8_t>(x); break;
        case 1: dst[i] = static_cast<uint8_t>(x + a); break;
        case 2: dst[i] = static_cast<uint8_t>(x + b); break;
        case 3: dst[i] = static_cast<uint8_t>(x + (a + b) / 2); break;
        case 4: dst[i] = static_cast<uint8_t>(x + paeth(a, b, c)); break;
        default: throw std::invalid_argument("png: unknown filter");
      }
    }
    std::memcpy(prev.data(), dst, stride);
  }
  return img;
}

}  // namespace emcot
