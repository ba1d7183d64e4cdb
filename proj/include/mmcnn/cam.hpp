#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "mmcnn/image.hpp"
#include "mmcnn/tensor.hpp"

namespace mmcnn {

// Per-(modality, class) activation map over the final m x m feature grid.
struct CamMap {
  int m = 0;
  std::vector<float> values;  // row-major m*m
  std::string modality;
  int class_id = 0;

  float at(int y, int x) const { return values[std::size_t(y) * m + x]; }
};

// CAM(x,y) = (1/m^2) * sum_i w_i * maps[i,x,y]. The 1/m^2 factor matches
// GAP-as-average, making the score decomposition an exact identity:
// score = sum_xy CAM_fundus + sum_xy CAM_oct for a bias-free head.
template <typename T>
CamMap compute_cam(const Tensor<T>& maps, const std::vector<T>& class_weights,
                   const std::string& modality, int class_id) {
  if (maps.shape.size() != 3)
    throw DimensionError("compute_cam: expected [C,m,m] maps");
  int c = maps.dim(0), mh = maps.dim(1), mw = maps.dim(2);
  if (mh != mw) throw DimensionError("compute_cam: feature maps must be square");
  if (int(class_weights.size()) != c)
    throw DimensionError("compute_cam: weight count does not match channels");
  CamMap cam;
  cam.m = mh;
  cam.modality = modality;
  cam.class_id = class_id;
  cam.values.assign(std::size_t(mh) * mw, 0.f);
  T inv_mm = T(1) / T(mh * mw);
  for (int i = 0; i < c; ++i) {
    T w = class_weights[std::size_t(i)] * inv_mm;
    const T* plane = maps.data().data() + std::size_t(i) * mh * mw;
    for (int j = 0; j < mh * mw; ++j)
      cam.values[std::size_t(j)] += float(w * plane[j]);
  }
  return cam;
}

inline double cam_sum(const CamMap& cam) {
  double s = 0;
  for (float v : cam.values) s += double(v);
  return s;
}

// Bilinear upsampling (align_corners off) to target x target; rendering only,
// sums are not preserved.
inline std::vector<float> upsample(const CamMap& cam, int target) {
  if (target < cam.m)
    throw ConfigError("upsample: target must be >= the CAM side");
  if (target == cam.m) return cam.values;
  std::vector<float> out(std::size_t(target) * target);
  float scale = float(cam.m) / float(target);
  for (int y = 0; y < target; ++y) {
    float fy = (float(y) + 0.5f) * scale - 0.5f;
    int y0 = int(std::floor(fy));
    float wy = fy - float(y0);
    int ya = std::clamp(y0, 0, cam.m - 1), yb = std::clamp(y0 + 1, 0, cam.m - 1);
    for (int x = 0; x < target; ++x) {
      float fx = (float(x) + 0.5f) * scale - 0.5f;
      int x0 = int(std::floor(fx));
      float wx = fx - float(x0);
      int xa = std::clamp(x0, 0, cam.m - 1), xb = std::clamp(x0 + 1, 0, cam.m - 1);
      float top = cam.at(ya, xa) * (1 - wx) + cam.at(ya, xb) * wx;
      float bot = cam.at(yb, xa) * (1 - wx) + cam.at(yb, xb) * wx;
      out[std::size_t(y) * target + x] = top * (1 - wy) + bot * wy;
    }
  }
  return out;
}

// Min-max normalizes a square map to 8-bit; a constant map renders mid-gray.
inline Image render_heatmap(const std::vector<float>& values, int side) {
  float lo = values[0], hi = values[0];
  for (float v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  Image heat(side, side, 1);
  for (std::size_t i = 0; i < values.size(); ++i)
    heat.data[i] = (hi > lo) ? (values[i] - lo) / (hi - lo) : 128.f / 255.f;
  return heat;
}

// overlay pixel = 0.5 * gray(base) + 0.5 * heat
inline Image render_overlay(const Image& heat, const Image& base) {
  if (heat.width != base.width || heat.height != base.height)
    throw DimensionError("render_overlay: size mismatch");
  Image out(base.width, base.height, 3);
  for (int y = 0; y < base.height; ++y)
    for (int x = 0; x < base.width; ++x) {
      float g = 0.f;
      for (int c = 0; c < base.channels; ++c) g += base.at(c, y, x);
      g /= float(base.channels);
      float v = 0.5f * g + 0.5f * heat.at(0, y, x);
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = v;
    }
  return out;
}

}  // namespace mmcnn
