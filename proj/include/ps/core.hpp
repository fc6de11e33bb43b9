#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "ps/common.hpp"

namespace ps {

using Eigen::Vector3d;

/// View direction of the orthographic camera. The frame is x right, y up,
/// z toward the camera; pixel (row, col) maps to world (x, y) = (col, h-1-row).
inline Vector3d view_dir() { return Vector3d(0.0, 0.0, 1.0); }

inline double pixel_y(int h, int row) { return static_cast<double>(h - 1 - row); }

/// Boolean pixel grid shared by all per-pixel fields.
struct Mask {
  int h = 0, w = 0;
  std::vector<uint8_t> on;  // row-major h*w

  Mask() = default;
  Mask(int h_, int w_, bool value = false)
      : h(h_), w(w_), on(static_cast<size_t>(h_) * w_, value ? 1 : 0) {}

  bool at(int r, int c) const { return on[static_cast<size_t>(r) * w + c] != 0; }
  void set(int r, int c, bool v) { on[static_cast<size_t>(r) * w + c] = v ? 1 : 0; }
  int count() const {
    int m = 0;
    for (uint8_t v : on) m += v != 0;
    return m;
  }
  /// Row-major indices of all masked pixels.
  std::vector<int> pixel_list() const;
};

/// n images of one scene under distinct point lights, plus the object mask.
/// Values are linear radiance, unitless, >= 0.
struct ImageStack {
  int n = 0, h = 0, w = 0, c = 0;
  std::vector<double> data;  // [(i*h + r)*w + col]*c + ch
  Mask mask;

  ImageStack() = default;
  ImageStack(int n_, int h_, int w_, int c_)
      : n(n_), h(h_), w(w_), c(c_),
        data(static_cast<size_t>(n_) * h_ * w_ * c_, 0.0),
        mask(h_, w_) {}

  double& at(int i, int r, int col, int ch) {
    return data[((static_cast<size_t>(i) * h + r) * w + col) * c + ch];
  }
  double at(int i, int r, int col, int ch) const {
    return data[((static_cast<size_t>(i) * h + r) * w + col) * c + ch];
  }
  /// Channel mean at a pixel.
  double luminance(int i, int r, int col) const {
    double s = 0.0;
    for (int ch = 0; ch < c; ++ch) s += at(i, r, col, ch);
    return s / c;
  }
  void validate() const;
};

/// Per-image unit light directions (camera frame, z toward camera) and
/// positive scalar intensities.
struct LightSet {
  std::vector<Vector3d> directions;
  std::vector<double> intensities;

  int count() const { return static_cast<int>(directions.size()); }
  /// 3 x n matrix of directions.
  Eigen::Matrix3Xd direction_matrix() const;
  void validate() const;
};

/// Unit normals inside the mask, zero vectors outside; n_z >= 0 inside.
struct NormalMap {
  int h = 0, w = 0;
  std::vector<double> data;  // h*w*3
  Mask mask;

  NormalMap() = default;
  NormalMap(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(h_) * w_ * 3, 0.0), mask(h_, w_) {}

  Vector3d get(int r, int c) const {
    const size_t k = (static_cast<size_t>(r) * w + c) * 3;
    return Vector3d(data[k], data[k + 1], data[k + 2]);
  }
  void set(int r, int c, const Vector3d& n) {
    const size_t k = (static_cast<size_t>(r) * w + c) * 3;
    data[k] = n.x();
    data[k + 1] = n.y();
    data[k + 2] = n.z();
  }
  void validate() const;
};

/// Scalar depth field; same length unit as the pixel pitch (= 1), defined
/// up to an additive constant, increasing toward the camera.
struct DepthMap {
  int h = 0, w = 0;
  std::vector<double> data;  // h*w
  Mask mask;

  DepthMap() = default;
  DepthMap(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(h_) * w_, 0.0), mask(h_, w_) {}

  double& at(int r, int c) { return data[static_cast<size_t>(r) * w + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * w + c]; }
  void validate() const;
};

/// Per-pixel albedo in [0, 1); the strict upper bound keeps the
/// interreflection solve convergent.
struct AlbedoMap {
  int h = 0, w = 0, c = 0;
  std::vector<double> data;  // h*w*c

  AlbedoMap() = default;
  AlbedoMap(int h_, int w_, int c_)
      : h(h_), w(w_), c(c_), data(static_cast<size_t>(h_) * w_ * c_, 0.0) {}

  double& at(int r, int col, int ch) { return data[(static_cast<size_t>(r) * w + col) * c + ch]; }
  double at(int r, int col, int ch) const { return data[(static_cast<size_t>(r) * w + col) * c + ch]; }
  double mean_at(int r, int col) const {
    double s = 0.0;
    for (int ch = 0; ch < c; ++ch) s += at(r, col, ch);
    return s / c;
  }
  void validate(const Mask& mask) const;
};

/// Byte image rgb = round(255*(n+1)/2); masked-out pixels black.
std::vector<uint8_t> encode_normals(const NormalMap& nm);

/// Inverse of encode_normals up to quantization (1/255 per component).
NormalMap decode_normals(const std::vector<uint8_t>& rgb, const Mask& mask);

/// Mean over masked pixels of arccos(clamp(n_est . n_gt, -1, 1)), in degrees.
double mean_angular_error(const NormalMap& est, const NormalMap& gt, const Mask& mask);

/// Mean angular difference between two maps over the mask (alias used when
/// neither side is ground truth).
inline double mean_angular_difference(const NormalMap& a, const NormalMap& b, const Mask& m) {
  return mean_angular_error(a, b, m);
}

}  // namespace ps
