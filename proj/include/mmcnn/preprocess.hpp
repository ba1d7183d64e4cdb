#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mmcnn/image.hpp"
#include "mmcnn/rng.hpp"
#include "mmcnn/tensor.hpp"

namespace mmcnn {

namespace detail {

// reflect index into [0, n-1] (border handling: abcba reflection)
inline int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

}  // namespace detail

// Contrast-limited adaptive histogram equalization, applied per channel.
// Values are expected in [0,1]; 256-bin histograms, per-tile clipping with
// even excess redistribution, bilinear interpolation between tile mappings.
// The mapping convention is m(b) = round(255 * cdf(b) / tile_pixels).
inline Image clahe(const Image& img, int tiles = 8, double clip = 2.0,
                   int bins = 256, bool* tiles_reduced = nullptr) {
  if (tiles < 1) throw ConfigError("clahe: tiles must be >= 1");
  int tx = std::min(tiles, img.width);
  int ty = std::min(tiles, img.height);
  if (tiles_reduced) *tiles_reduced = (tx != tiles || ty != tiles);

  Image out(img.width, img.height, img.channels);
  // tile boundaries by even division with remainder spread to the first tiles
  auto bounds = [](int n, int t) {
    std::vector<int> b(std::size_t(t) + 1, 0);
    for (int i = 0; i <= t; ++i) b[std::size_t(i)] = (n * i) / t;
    return b;
  };
  std::vector<int> bx = bounds(img.width, tx), by = bounds(img.height, ty);

  for (int c = 0; c < img.channels; ++c) {
    // per-tile lookup tables
    std::vector<std::vector<float>> lut(std::size_t(tx) * ty,
                                        std::vector<float>(std::size_t(bins)));
    std::vector<float> centers_x(std::size_t(tx), 0.f);
    std::vector<float> centers_y(std::size_t(ty), 0.f);
    for (int t = 0; t < tx; ++t)
      centers_x[std::size_t(t)] = 0.5f * float(bx[std::size_t(t)] + bx[std::size_t(t) + 1] - 1);
    for (int t = 0; t < ty; ++t)
      centers_y[std::size_t(t)] = 0.5f * float(by[std::size_t(t)] + by[std::size_t(t) + 1] - 1);

    for (int tj = 0; tj < ty; ++tj) {
      for (int ti = 0; ti < tx; ++ti) {
        std::vector<long> hist(std::size_t(bins), 0);
        long total = 0;
        for (int y = by[std::size_t(tj)]; y < by[std::size_t(tj) + 1]; ++y)
          for (int x = bx[std::size_t(ti)]; x < bx[std::size_t(ti) + 1]; ++x) {
            int b = int(std::lround(img.at(c, y, x) * float(bins - 1)));
            b = std::clamp(b, 0, bins - 1);
            ++hist[std::size_t(b)];
            ++total;
          }
        // clip and redistribute
        long limit = std::max(1L, long(clip * double(total) / double(bins)));
        long excess = 0;
        for (auto& hv : hist)
          if (hv > limit) {
            excess += hv - limit;
            hv = limit;
          }
        long per_bin = excess / bins;
        long leftover = excess % bins;
        for (int b = 0; b < bins; ++b) {
          hist[std::size_t(b)] += per_bin;
          if (b < leftover) ++hist[std::size_t(b)];
        }
        // cdf -> mapping
        auto& m = lut[std::size_t(tj) * tx + ti];
        long cdf = 0;
        for (int b = 0; b < bins; ++b) {
          cdf += hist[std::size_t(b)];
          m[std::size_t(b)] =
              float(std::lround(double(bins - 1) * double(cdf) / double(total))) /
              float(bins - 1);
        }
      }
    }

    // bracketing tiles and interpolation weight for one coordinate
    auto bracket = [](float v, const std::vector<float>& centers, int& t0,
                      int& t1, float& w) {
      int n = int(centers.size());
      if (n == 1 || v <= centers.front()) { t0 = t1 = 0; w = 0.f; return; }
      if (v >= centers.back()) { t0 = t1 = n - 1; w = 0.f; return; }
      t0 = 0;
      while (t0 + 1 < n && centers[std::size_t(t0) + 1] <= v) ++t0;
      t1 = t0 + 1;
      w = (v - centers[std::size_t(t0)]) /
          (centers[std::size_t(t1)] - centers[std::size_t(t0)]);
    };
    for (int y = 0; y < img.height; ++y) {
      int tj0, tj1;
      float wy;
      bracket(float(y), centers_y, tj0, tj1, wy);
      for (int x = 0; x < img.width; ++x) {
        int ti0, ti1;
        float wx;
        bracket(float(x), centers_x, ti0, ti1, wx);
        int b = std::clamp(int(std::lround(img.at(c, y, x) * float(bins - 1))),
                           0, bins - 1);
        float v00 = lut[std::size_t(tj0) * tx + ti0][std::size_t(b)];
        float v01 = lut[std::size_t(tj0) * tx + ti1][std::size_t(b)];
        float v10 = lut[std::size_t(tj1) * tx + ti0][std::size_t(b)];
        float v11 = lut[std::size_t(tj1) * tx + ti1][std::size_t(b)];
        out.at(c, y, x) = (v00 * (1 - wx) + v01 * wx) * (1 - wy) +
                          (v10 * (1 - wx) + v11 * wx) * wy;
      }
    }
  }
  return out;
}

// k x k median filter, reflected borders.
inline Image median_filter(const Image& img, int k = 3) {
  if (k % 2 == 0 || k < 1) throw ConfigError("median_filter: k must be odd");
  int r = k / 2;
  Image out(img.width, img.height, img.channels);
  std::vector<float> window(std::size_t(k) * k);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        std::size_t n = 0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx)
            window[n++] = img.at(c, detail::reflect(y + dy, img.height),
                                 detail::reflect(x + dx, img.width));
        std::nth_element(window.begin(), window.begin() + long(n / 2),
                         window.begin() + long(n));
        out.at(c, y, x) = window[n / 2];
      }
  return out;
}

// Duplicates a grayscale channel into RGB.
inline Image gray_to_rgb(const Image& img) {
  if (img.channels != 1)
    throw DimensionError("gray_to_rgb: expected a 1-channel image");
  Image out(img.width, img.height, 3);
  for (int c = 0; c < 3; ++c)
    std::copy(img.data.begin(), img.data.end(),
              out.data.begin() + std::size_t(c) * img.height * img.width);
  return out;
}

// Concrete draws for one augmentation application. draw() samples them from
// a stream; identity() leaves the image untouched.
struct AugmentParams {
  double rotation_deg = 0.0;  // in [-15, 15]
  int crop_x = 8, crop_y = 8; // offsets into the 8-px reflect padding
  bool hflip = false;
  double brightness = 1.0, saturation = 1.0, contrast = 1.0;  // in [0.8, 1.2]

  static AugmentParams identity() { return {}; }

  static AugmentParams draw(RngStream& rng) {
    AugmentParams p;
    p.rotation_deg = rng.uniform(-15.0, 15.0);
    p.crop_x = rng.uniform_int(0, 16);
    p.crop_y = rng.uniform_int(0, 16);
    p.hflip = rng.bernoulli(0.5);
    p.brightness = rng.uniform(0.8, 1.2);
    p.saturation = rng.uniform(0.8, 1.2);
    p.contrast = rng.uniform(0.8, 1.2);
    return p;
  }
};

namespace detail {

inline Image rotate_bilinear(const Image& img, double deg) {
  if (deg == 0.0) return img;
  double rad = deg * 3.14159265358979323846 / 180.0;
  double cs = std::cos(rad), sn = std::sin(rad);
  double cx = 0.5 * (img.width - 1), cy = 0.5 * (img.height - 1);
  Image out(img.width, img.height, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      // inverse map
      double dx = x - cx, dy = y - cy;
      double sx = cs * dx + sn * dy + cx;
      double sy = -sn * dx + cs * dy + cy;
      int x0 = int(std::floor(sx)), y0 = int(std::floor(sy));
      double wx = sx - x0, wy = sy - y0;
      int xa = reflect(x0, img.width), xb = reflect(x0 + 1, img.width);
      int ya = reflect(y0, img.height), yb = reflect(y0 + 1, img.height);
      for (int c = 0; c < img.channels; ++c) {
        double top = img.at(c, ya, xa) * (1 - wx) + img.at(c, ya, xb) * wx;
        double bot = img.at(c, yb, xa) * (1 - wx) + img.at(c, yb, xb) * wx;
        out.at(c, y, x) = float(top * (1 - wy) + bot * wy);
      }
    }
  return out;
}

inline Image pad_reflect(const Image& img, int pad) {
  Image out(img.width + 2 * pad, img.height + 2 * pad, img.channels);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x)
        out.at(c, y, x) = img.at(c, reflect(y - pad, img.height),
                                 reflect(x - pad, img.width));
  return out;
}

}  // namespace detail

// Applies, in order: rotation, pad-8-reflect + crop, horizontal flip,
// brightness / saturation / contrast jitter. Pure given the params.
inline Image augment(const Image& img, const AugmentParams& p) {
  Image out = detail::rotate_bilinear(img, p.rotation_deg);
  if (p.crop_x != 8 || p.crop_y != 8 || p.rotation_deg != 0.0) {
    Image padded = detail::pad_reflect(out, 8);
    Image cropped(img.width, img.height, img.channels);
    for (int c = 0; c < img.channels; ++c)
      for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
          cropped.at(c, y, x) = padded.at(c, y + p.crop_y, x + p.crop_x);
    out = cropped;
  }
  if (p.hflip) {
    for (int c = 0; c < out.channels; ++c)
      for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width / 2; ++x)
          std::swap(out.at(c, y, x), out.at(c, y, out.width - 1 - x));
  }
  if (p.brightness != 1.0 || p.saturation != 1.0 || p.contrast != 1.0) {
    std::size_t plane = std::size_t(out.height) * out.width;
    // per-pixel gray for saturation, image gray mean for contrast
    std::vector<float> gray(plane, 0.f);
    for (int c = 0; c < out.channels; ++c)
      for (std::size_t i = 0; i < plane; ++i)
        gray[i] += out.data[std::size_t(c) * plane + i];
    double mean = 0.0;
    for (auto& g : gray) {
      g /= float(out.channels);
      mean += g;
    }
    mean /= double(plane);
    for (int c = 0; c < out.channels; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        double v = out.data[std::size_t(c) * plane + i];
        v *= p.brightness;
        double g = gray[i] * p.brightness;
        v = g + p.saturation * (v - g);
        v = mean * p.brightness + p.contrast * (v - mean * p.brightness);
        out.data[std::size_t(c) * plane + i] = float(std::clamp(v, 0.0, 1.0));
      }
  }
  return out;
}

// [0,1] image -> [-1,1] tensor of shape [3,S,S].
template <typename T = float>
Tensor<T> normalize(const Image& img) {
  if (img.channels != 3)
    throw DimensionError("normalize: expected a 3-channel image");
#ifndef NDEBUG
  for (float v : img.data)
    if (v < 0.f || v > 1.f)
      throw ConfigError("normalize: input values outside [0,1]");
#endif
  Tensor<T> t({3, img.height, img.width});
  for (std::size_t i = 0; i < img.data.size(); ++i)
    t[i] = (T(img.data[i]) - T(0.5)) / T(0.5);
  return t;
}

}  // namespace mmcnn
