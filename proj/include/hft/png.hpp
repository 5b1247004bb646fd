#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "hft/tensor.hpp"

namespace hft {

// Interleaved 8-bit image, row-major, `channels` samples per pixel.
struct ImageU8 {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<std::uint8_t> data;

  ImageU8() = default;
  ImageU8(int h, int w, int c)
      : height(h), width(w), channels(c),
        data(static_cast<size_t>(h) * w * c, 0) {}

  std::uint8_t& at(int i, int j, int c) {
    return data[(static_cast<size_t>(i) * width + j) * channels + c];
  }
  std::uint8_t at(int i, int j, int c) const {
    return data[(static_cast<size_t>(i) * width + j) * channels + c];
  }
  bool operator==(const ImageU8&) const = default;
};

// Single-channel 16-bit image (used for the per-cell class bitmasks).
struct ImageU16 {
  int height = 0;
  int width = 0;
  std::vector<std::uint16_t> data;

  ImageU16() = default;
  ImageU16(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w, 0) {}

  std::uint16_t& at(int i, int j) { return data[static_cast<size_t>(i) * width + j]; }
  std::uint16_t at(int i, int j) const { return data[static_cast<size_t>(i) * width + j]; }
  bool operator==(const ImageU16&) const = default;
};

namespace pngdetail {

inline void put_u32be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t read_u32be(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                         const std::vector<std::uint8_t>& payload) {
  put_u32be(out, static_cast<std::uint32_t>(payload.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const auto crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_u32be(out, static_cast<std::uint32_t>(crc));
}

inline std::vector<std::uint8_t> zlib_deflate(const std::vector<std::uint8_t>& raw) {
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> out(bound);
  if (compress2(out.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw DataError("png: deflate failed");
  out.resize(bound);
  return out;
}

inline std::vector<std::uint8_t> zlib_inflate(const std::uint8_t* data, size_t size,
                                              size_t expected) {
  std::vector<std::uint8_t> out(expected);
  uLongf len = static_cast<uLongf>(expected);
  if (uncompress(out.data(), &len, data, static_cast<uLong>(size)) != Z_OK || len != expected)
    throw DataError("png: inflate failed or size mismatch");
  return out;
}

inline int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

struct Decoded {
  int width = 0, height = 0, bit_depth = 0, color_type = 0;
  std::vector<std::uint8_t> pixels;  // unfiltered raw bytes, big-endian samples
};

inline Decoded decode(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("png: cannot open " + path);
  std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (file.size() < 8 || std::memcmp(file.data(), sig, 8) != 0)
    throw DataError("png: bad signature in " + path);

  Decoded d;
  std::vector<std::uint8_t> idat;
  size_t pos = 8;
  while (pos + 8 <= file.size()) {
    const std::uint32_t len = read_u32be(&file[pos]);
    if (pos + 12 + len > file.size()) throw DataError("png: truncated chunk in " + path);
    const char* type = reinterpret_cast<const char*>(&file[pos + 4]);
    const std::uint8_t* payload = &file[pos + 8];
    const std::uint32_t stored_crc = read_u32be(&file[pos + 8 + len]);
    const auto crc = crc32(0L, &file[pos + 4], static_cast<uInt>(len + 4));
    if (static_cast<std::uint32_t>(crc) != stored_crc) throw DataError("png: chunk crc mismatch");
    if (std::memcmp(type, "IHDR", 4) == 0) {
      d.width = static_cast<int>(read_u32be(payload));
      d.height = static_cast<int>(read_u32be(payload + 4));
      d.bit_depth = payload[8];
      d.color_type = payload[9];
      if (payload[10] != 0 || payload[11] != 0 || payload[12] != 0)
        throw DataError("png: unsupported compression/filter/interlace");
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (d.width <= 0 || d.height <= 0) throw DataError("png: missing IHDR");

  const int samples = d.color_type == 2 ? 3 : 1;
  const int bytes_per_pixel = samples * d.bit_depth / 8;
  const size_t row_bytes = static_cast<size_t>(d.width) * bytes_per_pixel;
  const auto raw = zlib_inflate(idat.data(), idat.size(),
                                static_cast<size_t>(d.height) * (row_bytes + 1));

  d.pixels.assign(static_cast<size_t>(d.height) * row_bytes, 0);
  std::vector<std::uint8_t> prev(row_bytes, 0);
  for (int y = 0; y < d.height; ++y) {
    const std::uint8_t filter = raw[static_cast<size_t>(y) * (row_bytes + 1)];
    const std::uint8_t* src = &raw[static_cast<size_t>(y) * (row_bytes + 1) + 1];
    std::uint8_t* dst = &d.pixels[static_cast<size_t>(y) * row_bytes];
    for (size_t x = 0; x < row_bytes; ++x) {
      const int a = x >= static_cast<size_t>(bytes_per_pixel) ? dst[x - bytes_per_pixel] : 0;
      const int b = prev[x];
      const int c = x >= static_cast<size_t>(bytes_per_pixel) ? prev[x - bytes_per_pixel] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw DataError("png: unknown filter type");
      }
      dst[x] = static_cast<std::uint8_t>(v);
    }
    std::memcpy(prev.data(), dst, row_bytes);
  }
  return d;
}

inline void encode(const std::string& path, int width, int height, int bit_depth, int color_type,
                   const std::vector<std::uint8_t>& pixels) {
  const int samples = color_type == 2 ? 3 : 1;
  const size_t row_bytes = static_cast<size_t>(width) * samples * bit_depth / 8;
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<size_t>(height) * (row_bytes + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), pixels.begin() + static_cast<std::ptrdiff_t>(y * row_bytes),
               pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * row_bytes));
  }

  std::vector<std::uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<std::uint8_t> ihdr;
  put_u32be(ihdr, static_cast<std::uint32_t>(width));
  put_u32be(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(static_cast<std::uint8_t>(bit_depth));
  ihdr.push_back(static_cast<std::uint8_t>(color_type));
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", zlib_deflate(raw));
  append_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("png: cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("png: write failed for " + path);
}

}  // namespace pngdetail

inline void write_png_rgb8(const std::string& path, const ImageU8& img) {
  if (img.channels != 3) throw ContractError("write_png_rgb8: expects 3 channels");
  pngdetail::encode(path, img.width, img.height, 8, 2, img.data);
}

inline void write_png_gray8(const std::string& path, const ImageU8& img) {
  if (img.channels != 1) throw ContractError("write_png_gray8: expects 1 channel");
  pngdetail::encode(path, img.width, img.height, 8, 0, img.data);
}

inline void write_png_gray16(const std::string& path, const ImageU16& img) {
  std::vector<std::uint8_t> be(img.data.size() * 2);
  for (size_t i = 0; i < img.data.size(); ++i) {
    be[2 * i] = static_cast<std::uint8_t>(img.data[i] >> 8);
    be[2 * i + 1] = static_cast<std::uint8_t>(img.data[i] & 0xFF);
  }
  pngdetail::encode(path, img.width, img.height, 16, 0, be);
}

inline ImageU8 read_png_rgb8(const std::string& path) {
  const auto d = pngdetail::decode(path);
  if (d.color_type != 2 || d.bit_depth != 8) throw DataError("png: expected 8-bit RGB in " + path);
  ImageU8 img(d.height, d.width, 3);
  img.data = d.pixels;
  return img;
}

inline ImageU8 read_png_gray8(const std::string& path) {
  const auto d = pngdetail::decode(path);
  if (d.color_type != 0 || d.bit_depth != 8) throw DataError("png: expected 8-bit gray in " + path);
  ImageU8 img(d.height, d.width, 1);
  img.data = d.pixels;
  return img;
}

inline ImageU16 read_png_gray16(const std::string& path) {
  const auto d = pngdetail::decode(path);
  if (d.color_type != 0 || d.bit_depth != 16) throw DataError("png: expected 16-bit gray in " + path);
  ImageU16 img(d.height, d.width);
  for (size_t i = 0; i < img.data.size(); ++i)
    img.data[i] = static_cast<std::uint16_t>((d.pixels[2 * i] << 8) | d.pixels[2 * i + 1]);
  return img;
}

}  // namespace hft
