#pragma once

#include <utility>

#include "ps/core.hpp"

namespace ps {

struct WoodhamResult {
  NormalMap normals;
  AlbedoMap albedo;
  int flipped = 0;    // pixels whose solution pointed away from the camera
  int degenerate = 0; // pixels that fell back to the full light set
};

/// Per-pixel least-squares Lambertian solve of X = rho * n^T L with the
/// intensities folded into the light columns. Pixels darker than 1% of an
/// image's maximum are dropped from that pixel's system when at least three
/// valid lights remain.
WoodhamResult woodham_solve(const ImageStack& stack, const LightSet& lights);

struct DirectionBins {
  int azimuth = 0;    // [0, 36)
  int elevation = 0;  // [0, 36)
};

/// Azimuth phi = atan2(z, x) in [0, pi], elevation theta = asin(y) in
/// [-pi/2, pi/2]; both split into 36 right-open bins (top value maps to the
/// last bin). Requires l_z >= 0.
DirectionBins bin_direction(const Vector3d& l);

/// Bin center of (azimuth, elevation) mapped back to a unit direction.
Vector3d direction_from_bins(const DirectionBins& bins);

/// Intensity in [0.2, 2.0] split into 20 right-open bins of width 0.09,
/// top-inclusive.
int bin_intensity(double e);

constexpr int kDirectionBins = 36;
constexpr int kIntensityBins = 20;
constexpr double kIntensityLo = 0.2;
constexpr double kIntensityHi = 2.0;

/// Calibration sphere in pixel coordinates (column, row).
struct SphereGeometry {
  double cx = 0.0;
  double cy = 0.0;
  double radius = 0.0;
};

struct CalibrationOptions {
  double sphere_albedo = 1.0;       // known diffuse albedo of the sphere
  double highlight_top_frac = 0.001;  // brightest fraction whose centroid locates the highlight
  double specular_cut_frac = 0.05;  // brightest fraction excluded from the intensity fit
  double background_threshold = 1e-4;
  double highlight_margin = 1.10;   // measured peak must exceed the Lambertian fit by this factor
};

/// Per image: locate the specular highlight on the sphere, mirror the view
/// vector about the analytic sphere normal to get the light direction, and
/// fit the scalar intensity to the non-specular Lambertian shading.
LightSet calibrate_from_sphere(const ImageStack& stack, const SphereGeometry& sphere,
                               const CalibrationOptions& opts = {});

}  // namespace ps
