#pragma once

#include "artcore/core.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace artcore {

/// Row-major H x W RGB image, values nominally in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> data;  // height * width * 3

  Image() = default;
  Image(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w * 3, 0.0) {}

  static Image constant(int h, int w, double r, double g, double b) {
    Image im(h, w);
    for (int i = 0; i < h * w; ++i) {
      im.data[3 * i + 0] = r;
      im.data[3 * i + 1] = g;
      im.data[3 * i + 2] = b;
    }
    return im;
  }

  double& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * 3 + c];
  }

  bool same_size(const Image& o) const { return height == o.height && width == o.width; }
};

/// Scalar field with image layout, used for responses and masks.
struct ScalarMap {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  ScalarMap() = default;
  ScalarMap(int h, int w, double fill = 0.0)
      : height(h), width(w), data(static_cast<size_t>(h) * w, fill) {}

  double& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
  double at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
};

namespace detail {
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - i - 1;
  }
  return i;
}
}  // namespace detail

/// Discretized scale-normalized Laplacian-of-Gaussian kernel (sigma^2 times
/// the analytic operator), radius = ceil(3 sigma). Scale normalization puts
/// full-contrast blobs near unit response, where the downstream clamp lives.
/// The kernel is shifted to zero mean so flat regions respond exactly zero.
inline std::vector<double> log_kernel(double sigma, int& radius_out) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  radius_out = r;
  const int n = 2 * r + 1;
  std::vector<double> k(static_cast<size_t>(n) * n);
  const double s2 = sigma * sigma;
  double sum = 0.0;
  for (int y = -r; y <= r; ++y) {
    for (int x = -r; x <= r; ++x) {
      const double q = (x * x + y * y) / (2.0 * s2);
      const double v = (q - 1.0) / (M_PI * s2) * std::exp(-q);
      k[(y + r) * n + (x + r)] = v;
      sum += v;
    }
  }
  const double mean = sum / (n * n);
  for (double& v : k) v -= mean;
  return k;
}

/// Per-channel 2D convolution with reflected boundary, then the Euclidean
/// norm over channels.
inline ScalarMap log_response(const Image& im, double sigma) {
  int r = 0;
  const std::vector<double> k = log_kernel(sigma, r);
  const int n = 2 * r + 1;
  ScalarMap out(im.height, im.width);
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      double acc[3] = {0.0, 0.0, 0.0};
      for (int dy = -r; dy <= r; ++dy) {
        const int yy = detail::reflect_index(y + dy, im.height);
        for (int dx = -r; dx <= r; ++dx) {
          const int xx = detail::reflect_index(x + dx, im.width);
          const double w = k[(dy + r) * n + (dx + r)];
          acc[0] += w * im.at(yy, xx, 0);
          acc[1] += w * im.at(yy, xx, 1);
          acc[2] += w * im.at(yy, xx, 2);
        }
      }
      out.at(y, x) = std::sqrt(acc[0] * acc[0] + acc[1] * acc[1] + acc[2] * acc[2]);
    }
  }
  return out;
}

/// 2x box downsample; odd trailing rows/columns are dropped.
inline Image downsample2x(const Image& im) {
  const int h = std::max(1, im.height / 2);
  const int w = std::max(1, im.width / 2);
  Image out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const int y0 = std::min(2 * y, im.height - 1), y1 = std::min(2 * y + 1, im.height - 1);
        const int x0 = std::min(2 * x, im.width - 1), x1 = std::min(2 * x + 1, im.width - 1);
        out.at(y, x, c) = 0.25 * (im.at(y0, x0, c) + im.at(y0, x1, c) + im.at(y1, x0, c) +
                                  im.at(y1, x1, c));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PNG / PPM output
// ---------------------------------------------------------------------------

namespace detail {

inline void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back((v >> 24) & 0xff);
  out.push_back((v >> 16) & 0xff);
  out.push_back((v >> 8) & 0xff);
  out.push_back(v & 0xff);
}

inline void png_chunk(std::vector<unsigned char>& out, const char type[4],
                      const std::vector<unsigned char>& payload) {
  put_be32(out, static_cast<std::uint32_t>(payload.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const uLong crc = ::crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

inline unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// 8-bit RGB PNG. Values are clamped to [0,1] and scaled by 255.
inline bool write_png(const std::string& path, const Image& im) {
  const int h = im.height, w = im.width;
  std::vector<unsigned char> raw(static_cast<size_t>(h) * (1 + static_cast<size_t>(w) * 3));
  size_t p = 0;
  for (int y = 0; y < h; ++y) {
    raw[p++] = 0;  // filter: none
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) raw[p++] = to_byte(im.at(y, x, c));
  }
  uLongf comp_cap = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> comp(comp_cap);
  if (compress2(comp.data(), &comp_cap, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    return false;
  comp.resize(comp_cap);

  std::vector<unsigned char> png;
  const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  png.insert(png.end(), sig, sig + 8);
  std::vector<unsigned char> ihdr;
  detail::put_be32(ihdr, static_cast<std::uint32_t>(w));
  detail::put_be32(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // RGB
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // no interlace
  detail::png_chunk(png, "IHDR", ihdr);
  detail::png_chunk(png, "IDAT", comp);
  detail::png_chunk(png, "IEND", {});

  std::ofstream out(path, std::ios::binary);
  if (!out) return false;
  out.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
  return static_cast<bool>(out);
}

inline bool write_ppm(const std::string& path, const Image& im) {
  std::ofstream out(path, std::ios::binary);
  if (!out) return false;
  out << "P6\n" << im.width << " " << im.height << "\n255\n";
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < 3; ++c) out.put(static_cast<char>(to_byte(im.at(y, x, c))));
  return static_cast<bool>(out);
}

inline bool read_ppm(const std::string& path, Image& im) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) return false;
  in.get();  // single whitespace after header
  im = Image(h, w);
  std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) return false;
  for (size_t i = 0; i < buf.size(); ++i) im.data[i] = buf[i] / 255.0;
  return true;
}

}  // namespace artcore
