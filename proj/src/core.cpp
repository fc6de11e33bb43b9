#include "ps/core.hpp"

#include <algorithm>
#include <cmath>

namespace ps {

std::vector<int> Mask::pixel_list() const {
  std::vector<int> px;
  px.reserve(on.size());
  for (int i = 0; i < static_cast<int>(on.size()); ++i)
    if (on[i]) px.push_back(i);
  return px;
}

void ImageStack::validate() const {
  require(n >= 1 && h >= 1 && w >= 1, "image stack is empty");
  require(c == 1 || c == 3, "channel count must be 1 or 3");
  require(mask.h == h && mask.w == w, "mask size does not match images");
  require(mask.count() >= 1, "mask has no pixels");
  for (double v : data)
    require(std::isfinite(v) && v >= 0.0, "radiance must be finite and nonnegative");
}

Eigen::Matrix3Xd LightSet::direction_matrix() const {
  Eigen::Matrix3Xd L(3, count());
  for (int i = 0; i < count(); ++i) L.col(i) = directions[i];
  return L;
}

void LightSet::validate() const {
  require(!directions.empty(), "light set is empty");
  require(directions.size() == intensities.size(), "direction/intensity count mismatch");
  for (const auto& d : directions)
    require(std::abs(d.norm() - 1.0) <= 1e-9, "light direction is not unit length");
  for (double e : intensities) require(e > 0.0, "light intensity must be positive");
}

void NormalMap::validate() const {
  require(mask.h == h && mask.w == w, "mask size does not match normal map");
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const Vector3d n = get(r, c);
      if (mask.at(r, c)) {
        require(std::abs(n.norm() - 1.0) <= 1e-6, "normal is not unit length inside mask");
        require(n.z() >= -1e-12, "normal points away from the camera");
      } else {
        require(n.squaredNorm() == 0.0, "normal outside mask must be zero");
      }
    }
  }
}

void DepthMap::validate() const {
  require(mask.h == h && mask.w == w, "mask size does not match depth map");
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (mask.at(r, c)) require(std::isfinite(at(r, c)), "depth must be finite inside mask");
}

void AlbedoMap::validate(const Mask& mask) const {
  require(mask.h == h && mask.w == w, "mask size does not match albedo map");
  for (int r = 0; r < h; ++r)
    for (int col = 0; col < w; ++col)
      if (mask.at(r, col))
        for (int ch = 0; ch < c; ++ch)
          require(at(r, col, ch) >= 0.0 && at(r, col, ch) < 1.0, "albedo must lie in [0, 1)");
}

std::vector<uint8_t> encode_normals(const NormalMap& nm) {
  std::vector<uint8_t> out(static_cast<size_t>(nm.h) * nm.w * 3, 0);
  for (int r = 0; r < nm.h; ++r) {
    for (int c = 0; c < nm.w; ++c) {
      if (!nm.mask.at(r, c)) continue;
      const Vector3d n = nm.get(r, c);
      for (int k = 0; k < 3; ++k) {
        const double v = std::round(255.0 * (n[k] + 1.0) / 2.0);
        out[(static_cast<size_t>(r) * nm.w + c) * 3 + k] =
            static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
      }
    }
  }
  return out;
}

NormalMap decode_normals(const std::vector<uint8_t>& rgb, const Mask& mask) {
  require(rgb.size() == static_cast<size_t>(mask.h) * mask.w * 3,
          "encoded normal buffer size mismatch");
  NormalMap nm(mask.h, mask.w);
  nm.mask = mask;
  for (int r = 0; r < mask.h; ++r) {
    for (int c = 0; c < mask.w; ++c) {
      if (!mask.at(r, c)) continue;
      Vector3d n;
      for (int k = 0; k < 3; ++k)
        n[k] = 2.0 * rgb[(static_cast<size_t>(r) * mask.w + c) * 3 + k] / 255.0 - 1.0;
      const double len = n.norm();
      nm.set(r, c, len > 0 ? Vector3d(n / len) : Vector3d(0, 0, 1));
    }
  }
  return nm;
}

double mean_angular_error(const NormalMap& est, const NormalMap& gt, const Mask& mask) {
  require(est.h == gt.h && est.w == gt.w && est.h == mask.h && est.w == mask.w,
          "normal map shapes do not match");
  double sum = 0.0;
  int m = 0;
  for (int r = 0; r < mask.h; ++r) {
    for (int c = 0; c < mask.w; ++c) {
      if (!mask.at(r, c)) continue;
      const double d = std::clamp(est.get(r, c).dot(gt.get(r, c)), -1.0, 1.0);
      sum += std::acos(d);
      ++m;
    }
  }
  require(m > 0, "no evaluable pixels");
  return deg_from_rad(sum / m);
}

}  // namespace ps
