#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "gnfield/tensor.hpp"

namespace gnfield {

// [H,W,3] float image in [0,1] <-> 8-bit RGB PNG; [H,W] float <-> PFM.

namespace pngio {

inline void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

inline uint32_t get_u32be(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

inline void write_chunk(std::vector<uint8_t>& out, const char type[4],
                        const std::vector<uint8_t>& data) {
  put_u32be(out, static_cast<uint32_t>(data.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uint32_t crc = static_cast<uint32_t>(
      ::crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start)));
  put_u32be(out, crc);
}

}  // namespace pngio

inline std::vector<uint8_t> encode_png_rgb8(const uint8_t* rgb, int w, int h) {
  std::vector<uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<uint8_t> ihdr;
  pngio::put_u32be(ihdr, static_cast<uint32_t>(w));
  pngio::put_u32be(ihdr, static_cast<uint32_t>(h));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit, RGB
  pngio::write_chunk(out, "IHDR", ihdr);

  std::vector<uint8_t> raw;
  raw.reserve(static_cast<size_t>(h) * (static_cast<size_t>(w) * 3 + 1));
  for (int y = 0; y < h; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), rgb + static_cast<size_t>(y) * w * 3,
               rgb + static_cast<size_t>(y + 1) * w * 3);
  }
  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png: deflate failed");
  comp.resize(comp_len);
  pngio::write_chunk(out, "IDAT", comp);
  pngio::write_chunk(out, "IEND", {});
  return out;
}

inline std::vector<uint8_t> decode_png_rgb8(const std::vector<uint8_t>& buf, int& w, int& h) {
  static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0)
    throw std::runtime_error("png: bad signature");
  size_t pos = 8;
  w = h = 0;
  int bit_depth = 0, color_type = 0;
  std::vector<uint8_t> idat;
  while (pos + 12 <= buf.size()) {
    const uint32_t len = pngio::get_u32be(buf.data() + pos);
    const char* type = reinterpret_cast<const char*>(buf.data() + pos + 4);
    const uint8_t* data = buf.data() + pos + 8;
    if (pos + 12 + len > buf.size()) throw std::runtime_error("png: truncated chunk");
    if (std::memcmp(type, "IHDR", 4) == 0) {
      w = static_cast<int>(pngio::get_u32be(data));
      h = static_cast<int>(pngio::get_u32be(data + 4));
      bit_depth = data[8];
      color_type = data[9];
      if (data[12] != 0) throw std::runtime_error("png: interlace unsupported");
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (bit_depth != 8 || color_type != 2) throw std::runtime_error("png: only 8-bit RGB supported");
  const size_t stride = static_cast<size_t>(w) * 3;
  std::vector<uint8_t> raw(static_cast<size_t>(h) * (stride + 1));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw std::runtime_error("png: inflate failed");

  std::vector<uint8_t> img(static_cast<size_t>(h) * stride);
  auto paeth = [](int a, int b, int c) {
    const int p = a + b - c, pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    return pb <= pc ? b : c;
  };
  for (int y = 0; y < h; ++y) {
    const uint8_t filter = raw[static_cast<size_t>(y) * (stride + 1)];
    const uint8_t* src = raw.data() + static_cast<size_t>(y) * (stride + 1) + 1;
    uint8_t* dst = img.data() + static_cast<size_t>(y) * stride;
    const uint8_t* above = y > 0 ? img.data() + static_cast<size_t>(y - 1) * stride : nullptr;
    for (size_t x = 0; x < stride; ++x) {
      const int a = x >= 3 ? dst[x - 3] : 0;
      const int b = above ? above[x] : 0;
      const int c = (above && x >= 3) ? above[x - 3] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw std::runtime_error("png: bad filter");
      }
      dst[x] = static_cast<uint8_t>(v & 0xff);
    }
  }
  return img;
}

inline void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open: " + path);
  const std::streamsize n = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> buf(static_cast<size_t>(n));
  f.read(reinterpret_cast<char*>(buf.data()), n);
  if (!f) throw std::runtime_error("read failed: " + path);
  return buf;
}

// image: [H,W,3] in [0,1]
inline void save_png(const std::string& path, const Tensor<float>& image) {
  const int h = static_cast<int>(image.shape[0]);
  const int w = static_cast<int>(image.shape[1]);
  std::vector<uint8_t> rgb(static_cast<size_t>(h) * w * 3);
  for (size_t i = 0; i < rgb.size(); ++i) {
    const float v = std::clamp(image[static_cast<int64_t>(i)], 0.0f, 1.0f);
    rgb[i] = static_cast<uint8_t>(std::lround(v * 255.0f));
  }
  write_file(path, encode_png_rgb8(rgb.data(), w, h));
}

inline Tensor<float> load_png(const std::string& path) {
  int w = 0, h = 0;
  const std::vector<uint8_t> rgb = decode_png_rgb8(read_file(path), w, h);
  Tensor<float> img(Shape{h, w, 3});
  for (int64_t i = 0; i < img.numel(); ++i) img[i] = static_cast<float>(rgb[i]) / 255.0f;
  return img;
}

// PFM, grayscale float32 little-endian, bottom-to-top scanlines.
// +inf depth sentinel is encoded as FLT_MAX.
inline void save_pfm(const std::string& path, const Tensor<float>& depth) {
  const int h = static_cast<int>(depth.shape[0]);
  const int w = static_cast<int>(depth.shape[1]);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "Pf\n" << w << " " << h << "\n-1.0\n";
  std::vector<float> row(static_cast<size_t>(w));
  for (int y = h - 1; y >= 0; --y) {
    for (int x = 0; x < w; ++x) {
      float v = depth.at(y, x);
      if (!std::isfinite(v)) v = std::numeric_limits<float>::max();
      row[static_cast<size_t>(x)] = v;
    }
    f.write(reinterpret_cast<const char*>(row.data()),
            static_cast<std::streamsize>(sizeof(float) * row.size()));
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline Tensor<float> load_pfm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  f >> magic >> w >> h >> scale;
  if (magic != "Pf" || scale >= 0) throw std::runtime_error("pfm: expected little-endian Pf");
  f.get();  // single whitespace after the header
  Tensor<float> depth(Shape{h, w});
  std::vector<float> row(static_cast<size_t>(w));
  for (int y = h - 1; y >= 0; --y) {
    f.read(reinterpret_cast<char*>(row.data()),
           static_cast<std::streamsize>(sizeof(float) * row.size()));
    for (int x = 0; x < w; ++x) {
      float v = row[static_cast<size_t>(x)];
      if (v >= std::numeric_limits<float>::max() * 0.999f)
        v = std::numeric_limits<float>::infinity();
      depth.at(y, x) = v;
    }
  }
  if (!f) throw std::runtime_error("pfm: truncated " + path);
  return depth;
}

}  // namespace gnfield
