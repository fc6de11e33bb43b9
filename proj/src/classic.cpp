#include "ps/classic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace ps {

namespace {

int light_matrix_rank(const Eigen::Matrix3Xd& L) {
  Eigen::JacobiSVD<Eigen::Matrix3Xd> svd(L);
  const auto& s = svd.singularValues();
  int rank = 0;
  for (int i = 0; i < s.size(); ++i)
    if (s[i] > 1e-10 * s[0]) ++rank;
  return rank;
}

// Right-open uniform bin with a snap against floating-point boundary error;
// the top of the range maps to the last bin.
int uniform_bin(double x, double lo, double width, int bins) {
  const double t = (x - lo) / width;
  int b = static_cast<int>(std::floor(t + 1e-9));
  return std::clamp(b, 0, bins - 1);
}

}  // namespace

WoodhamResult woodham_solve(const ImageStack& stack, const LightSet& lights) {
  stack.validate();
  lights.validate();
  require(lights.count() == stack.n, "light count does not match image count");
  require(lights.count() >= 3, "degenerate light configuration: need at least 3 lights");

  const int n = stack.n;
  Eigen::Matrix3Xd L = lights.direction_matrix();
  require(light_matrix_rank(L) == 3, "degenerate light configuration");
  Eigen::Matrix3Xd Le(3, n);  // intensities folded into the columns
  for (int i = 0; i < n; ++i) Le.col(i) = L.col(i) * lights.intensities[i];

  // Per-image shadow threshold: 1% of that image's maximum over the mask.
  std::vector<double> shadow_thr(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double mx = 0.0;
    for (int r = 0; r < stack.h; ++r)
      for (int c = 0; c < stack.w; ++c)
        if (stack.mask.at(r, c)) mx = std::max(mx, stack.luminance(i, r, c));
    shadow_thr[i] = 0.01 * mx;
  }

  WoodhamResult out;
  out.normals = NormalMap(stack.h, stack.w);
  out.normals.mask = stack.mask;
  out.albedo = AlbedoMap(stack.h, stack.w, stack.c);

  std::vector<int> all_idx(n);
  std::iota(all_idx.begin(), all_idx.end(), 0);
  std::vector<int> valid;
  valid.reserve(n);
  for (int r = 0; r < stack.h; ++r) {
    for (int c = 0; c < stack.w; ++c) {
      if (!stack.mask.at(r, c)) continue;
      valid.clear();
      for (int i = 0; i < n; ++i)
        if (stack.luminance(i, r, c) >= shadow_thr[i]) valid.push_back(i);
      bool use_subset = valid.size() >= 3;
      if (use_subset) {
        Eigen::Matrix3Xd Ls(3, static_cast<int>(valid.size()));
        for (size_t k = 0; k < valid.size(); ++k) Ls.col(static_cast<int>(k)) = L.col(valid[k]);
        if (light_matrix_rank(Ls) < 3) use_subset = false;
      }

      if (!use_subset) out.degenerate++;
      const auto& idx_solve = use_subset ? valid : all_idx;
      Eigen::MatrixX3d a(static_cast<int>(idx_solve.size()), 3);
      Eigen::VectorXd y(static_cast<int>(idx_solve.size()));
      for (size_t k = 0; k < idx_solve.size(); ++k) {
        a.row(static_cast<int>(k)) = Le.col(idx_solve[k]).transpose();
        y[static_cast<int>(k)] = stack.luminance(idx_solve[k], r, c);
      }
      Vector3d b = a.colPivHouseholderQr().solve(y);
      double rho = b.norm();
      Vector3d nvec = rho > 0 ? Vector3d(b / rho) : Vector3d(0, 0, 1);
      if (nvec.z() < 0) {
        nvec = -nvec;
        out.flipped++;
      }
      out.normals.set(r, c, nvec);

      rho = std::clamp(rho, 0.0, 1.0 - 1e-6);
      if (stack.c == 1) {
        out.albedo.at(r, c, 0) = rho;
      } else {
        // Per-channel scale fit given the recovered normal.
        for (int ch = 0; ch < stack.c; ++ch) {
          double num = 0.0, den = 0.0;
          const auto& idx = use_subset ? valid : all_idx;
          for (int i : idx) {
            const double z = lights.intensities[i] * std::max(nvec.dot(L.col(i)), 0.0);
            num += stack.at(i, r, c, ch) * z;
            den += z * z;
          }
          out.albedo.at(r, c, ch) = den > 0 ? std::clamp(num / den, 0.0, 1.0 - 1e-6) : 0.0;
        }
      }
    }
  }
  return out;
}

DirectionBins bin_direction(const Vector3d& l) {
  require(std::abs(l.norm() - 1.0) <= 1e-9, "direction must be unit length");
  require(l.z() >= -1e-12, "source behind object plane");
  const double phi = std::atan2(std::max(l.z(), 0.0), l.x());      // [0, pi]
  const double theta = std::asin(std::clamp(l.y(), -1.0, 1.0));    // [-pi/2, pi/2]
  const double width = kPi / kDirectionBins;
  DirectionBins b;
  b.azimuth = uniform_bin(phi, 0.0, width, kDirectionBins);
  b.elevation = uniform_bin(theta, -kPi / 2.0, width, kDirectionBins);
  return b;
}

Vector3d direction_from_bins(const DirectionBins& bins) {
  const double width = kPi / kDirectionBins;
  const double phi = (bins.azimuth + 0.5) * width;
  const double theta = -kPi / 2.0 + (bins.elevation + 0.5) * width;
  return Vector3d(std::cos(theta) * std::cos(phi), std::sin(theta),
                  std::cos(theta) * std::sin(phi));
}

int bin_intensity(double e) {
  require(e >= kIntensityLo - 1e-12 && e <= kIntensityHi + 1e-12,
          "intensity outside the valid interval [0.2, 2.0]");
  const double width = (kIntensityHi - kIntensityLo) / kIntensityBins;
  return uniform_bin(e, kIntensityLo, width, kIntensityBins);
}

LightSet calibrate_from_sphere(const ImageStack& stack, const SphereGeometry& sphere,
                               const CalibrationOptions& opts) {
  stack.validate();
  require(sphere.radius > 2.0, "calibration sphere radius too small");

  // Pixels safely on the sphere, with their analytic normals.
  struct SpherePixel {
    int r, c;
    Vector3d n;
  };
  std::vector<SpherePixel> pixels;
  for (int r = 0; r < stack.h; ++r) {
    for (int c = 0; c < stack.w; ++c) {
      if (!stack.mask.at(r, c)) continue;
      const double dx = (c - sphere.cx) / sphere.radius;
      const double dy = (sphere.cy - r) / sphere.radius;  // y up
      const double rr = dx * dx + dy * dy;
      if (rr > 0.995 * 0.995) continue;
      pixels.push_back({r, c, Vector3d(dx, dy, std::sqrt(1.0 - rr))});
    }
  }
  require(pixels.size() >= 16, "calibration sphere not inside the mask");

  const Vector3d v = view_dir();
  LightSet out;
  for (int i = 0; i < stack.n; ++i) {
    std::vector<double> vals(pixels.size());
    for (size_t k = 0; k < pixels.size(); ++k)
      vals[k] = stack.luminance(i, pixels[k].r, pixels[k].c);
    const double vmax = *std::max_element(vals.begin(), vals.end());
    if (vmax < opts.background_threshold)
      throw CalibrationError("no highlight found in image " + std::to_string(i + 1) +
                             ": sphere is dark");

    // Highlight location: centroid of the brightest fraction of pixels.
    const int top_k = std::max<int>(1, static_cast<int>(std::llround(
                                            opts.highlight_top_frac * pixels.size())));
    std::vector<int> order(pixels.size());
    std::iota(order.begin(), order.end(), 0);
    std::nth_element(order.begin(), order.begin() + top_k, order.end(),
                     [&](int a, int b) { return vals[a] > vals[b]; });
    double sr = 0.0, sc = 0.0;
    for (int k = 0; k < top_k; ++k) {
      sr += pixels[order[k]].r;
      sc += pixels[order[k]].c;
    }
    const auto normal_at = [&](double row, double col) {
      double hx = (col - sphere.cx) / sphere.radius;
      double hy = (sphere.cy - row) / sphere.radius;
      const double rr = hx * hx + hy * hy;
      if (rr > 0.999) {
        const double s = std::sqrt(0.999 / rr);
        hx *= s;
        hy *= s;
      }
      return Vector3d(hx, hy, std::sqrt(1.0 - hx * hx - hy * hy));
    };
    Vector3d nh = normal_at(sr / top_k, sc / top_k);
    Vector3d l = (2.0 * nh.dot(v) * nh - v).normalized();

    // Intensity from the Lambertian shading of non-specular pixels. The
    // top-fraction intensity cut removes the lobe core; a median-ratio inlier
    // pass then sheds the residual Phong tail before the least-squares fit.
    std::vector<double> sorted_vals = vals;
    const size_t cut_pos = static_cast<size_t>((1.0 - opts.specular_cut_frac) * sorted_vals.size());
    std::nth_element(sorted_vals.begin(), sorted_vals.begin() + cut_pos, sorted_vals.end());
    const double specular_cut = sorted_vals[cut_pos];
    const auto fit_intensity = [&](const Vector3d& light, double band) {
      std::vector<double> ratios;
      ratios.reserve(pixels.size());
      for (size_t k = 0; k < pixels.size(); ++k) {
        if (vals[k] >= specular_cut) continue;
        const double z = std::max(pixels[k].n.dot(light), 0.0);
        if (z < 0.1) continue;  // skip the terminator
        ratios.push_back(vals[k] / z);
      }
      require(!ratios.empty(), "no usable Lambertian pixels on the calibration sphere");
      std::nth_element(ratios.begin(), ratios.begin() + ratios.size() / 2, ratios.end());
      const double ratio_med = ratios[ratios.size() / 2];
      double num = 0.0, den = 0.0;
      for (size_t k = 0; k < pixels.size(); ++k) {
        if (vals[k] >= specular_cut) continue;
        const double z = std::max(pixels[k].n.dot(light), 0.0);
        if (z < 0.1) continue;
        if (std::abs(vals[k] / z - ratio_med) > band * ratio_med) continue;
        num += vals[k] * z;
        den += z * z;
      }
      require(den > 0, "no usable Lambertian pixels on the calibration sphere");
      return num / den;
    };

    double fitted = fit_intensity(l, 0.05);

    // Refine the highlight to sub-pixel accuracy: within a window around the
    // first centroid, the centroid of the shading excess over the fitted
    // Lambertian tracks the lobe peak. The window keeps the broad shading
    // mismatch caused by the initial direction error out of the weights.
    {
      const double hr0 = sr / top_k, hc0 = sc / top_k;
      const double window = std::max(4.0, 0.15 * sphere.radius);
      double wsum = 0.0, wr = 0.0, wc = 0.0;
      for (size_t k = 0; k < pixels.size(); ++k) {
        if (std::hypot(pixels[k].r - hr0, pixels[k].c - hc0) > window) continue;
        const double z = std::max(pixels[k].n.dot(l), 0.0);
        const double excess = vals[k] - fitted * z;
        if (excess <= 0.05 * fitted) continue;
        wsum += excess;
        wr += excess * pixels[k].r;
        wc += excess * pixels[k].c;
      }
      if (wsum > 0) {
        nh = normal_at(wr / wsum, wc / wsum);
        l = (2.0 * nh.dot(v) * nh - v).normalized();
        fitted = fit_intensity(l, 0.02);
      }
    }
    const double e = fitted / opts.sphere_albedo;

    // A usable highlight must beat the Lambertian prediction at its own pixel.
    const double predicted = fitted * std::max(nh.dot(l), 0.0);
    if (vmax < opts.highlight_margin * predicted)
      throw CalibrationError("no highlight found in image " + std::to_string(i + 1) +
                             ": peak matches the diffuse shading");

    require(e > 0.0, "fitted light intensity is not positive");
    out.directions.push_back(l);
    out.intensities.push_back(e);
  }
  out.validate();
  return out;
}

}  // namespace ps
