#pragma once

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "mmcnn/errors.hpp"

namespace mmcnn {

// Planar float image, values in [0,1]. channels is 1 (grayscale) or 3 (RGB).
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;  // [channels][height][width]

  Image() = default;
  Image(int w, int h, int c, float fill = 0.f)
      : width(w), height(h), channels(c),
        data(std::size_t(c) * h * w, fill) {}

  float& at(int c, int y, int x) {
    return data[(std::size_t(c) * height + y) * width + x];
  }
  float at(int c, int y, int x) const {
    return data[(std::size_t(c) * height + y) * width + x];
  }
};

inline std::uint8_t to_byte(float v) {
  float s = v * 255.f + 0.5f;
  if (s < 0.f) s = 0.f;
  if (s > 255.f) s = 255.f;
  return std::uint8_t(s);
}

// Writes P5 (1 channel) or P6 (3 channels), 8-bit.
inline void write_pnm(const Image& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3)
    throw IoError("write_pnm: only 1- or 3-channel images supported");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << (img.channels == 1 ? "P5" : "P6") << "\n"
    << img.width << " " << img.height << "\n255\n";
  std::vector<std::uint8_t> row(std::size_t(img.width) * img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        row[std::size_t(x) * img.channels + c] = to_byte(img.at(c, y, x));
    f.write(reinterpret_cast<const char*>(row.data()),
            std::streamsize(row.size()));
  }
  if (!f) throw IoError("failed writing image: " + path);
}

namespace detail {

inline int read_pnm_int(std::istream& in, const std::string& path) {
  // skips whitespace and '#' comments per the PNM spec
  int c = in.peek();
  while (c == '#' || std::isspace(c)) {
    if (c == '#') in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
    else in.get();
    c = in.peek();
  }
  int v;
  if (!(in >> v)) throw IoError("malformed PNM header: " + path);
  return v;
}

}  // namespace detail

inline Image read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open image: " + path);
  std::string magic;
  f >> magic;
  int channels;
  if (magic == "P5") channels = 1;
  else if (magic == "P6") channels = 3;
  else throw IoError("unsupported image format (want P5/P6): " + path);
  int w = detail::read_pnm_int(f, path);
  int h = detail::read_pnm_int(f, path);
  int maxval = detail::read_pnm_int(f, path);
  if (maxval != 255) throw IoError("only 8-bit PNM supported: " + path);
  f.get();  // single whitespace after maxval
  std::vector<std::uint8_t> raw(std::size_t(w) * h * channels);
  f.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  if (std::size_t(f.gcount()) != raw.size())
    throw IoError("truncated image data: " + path);
  Image img(w, h, channels);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        img.at(c, y, x) =
            float(raw[(std::size_t(y) * w + x) * channels + c]) / 255.f;
  return img;
}

inline Image resize_bilinear(const Image& img, int out_w, int out_h) {
  if (img.width == out_w && img.height == out_h) return img;
  Image out(out_w, out_h, img.channels);
  float sx = float(img.width) / float(out_w);
  float sy = float(img.height) / float(out_h);
  for (int y = 0; y < out_h; ++y) {
    float fy = (float(y) + 0.5f) * sy - 0.5f;
    int y0 = int(std::floor(fy));
    float wy = fy - float(y0);
    int ya = std::clamp(y0, 0, img.height - 1);
    int yb = std::clamp(y0 + 1, 0, img.height - 1);
    for (int x = 0; x < out_w; ++x) {
      float fx = (float(x) + 0.5f) * sx - 0.5f;
      int x0 = int(std::floor(fx));
      float wx = fx - float(x0);
      int xa = std::clamp(x0, 0, img.width - 1);
      int xb = std::clamp(x0 + 1, 0, img.width - 1);
      for (int c = 0; c < img.channels; ++c) {
        float top = img.at(c, ya, xa) * (1.f - wx) + img.at(c, ya, xb) * wx;
        float bot = img.at(c, yb, xa) * (1.f - wx) + img.at(c, yb, xb) * wx;
        out.at(c, y, x) = top * (1.f - wy) + bot * wy;
      }
    }
  }
  return out;
}

}  // namespace mmcnn
