#pragma once

#include <Eigen/Dense>
#include <array>
#include <vector>

#include "ps/core.hpp"

namespace ps {

/// Per-pixel (p, q) = (-n_x/n_z, -n_y/n_z) so that dD/dx = p and dD/dy = q
/// with depth increasing toward the camera.
struct GradientField {
  int h = 0, w = 0;
  std::vector<double> data;  // h*w*2
  Mask mask;

  GradientField() = default;
  GradientField(int h_, int w_)
      : h(h_), w(w_), data(static_cast<size_t>(h_) * w_ * 2, 0.0), mask(h_, w_) {}
  double& p(int r, int c) { return data[(static_cast<size_t>(r) * w + c) * 2]; }
  double p(int r, int c) const { return data[(static_cast<size_t>(r) * w + c) * 2]; }
  double& q(int r, int c) { return data[(static_cast<size_t>(r) * w + c) * 2 + 1]; }
  double q(int r, int c) const { return data[(static_cast<size_t>(r) * w + c) * 2 + 1]; }
};

struct GradientResult {
  GradientField field;
  int clamp_warnings = 0;  // pixels where n_z was clamped to the epsilon floor
};

constexpr double kGradientNzFloor = 1e-4;

GradientResult normals_to_gradients(const NormalMap& nm);

/// Least-squares solution of forward-difference grad D = G over masked
/// pixels; gauge fixed by zero-mean depth per connected component. Solved by
/// conjugate gradient on the normal equations to relative residual < 1e-8.
DepthMap integrate_depth(const GradientField& g, const Mask& mask);

/// Centered-difference normals from a depth map (the discrete inverse of
/// integrate_depth on integrable fields).
NormalMap depth_to_normals(const DepthMap& depth);

/// Discretized surface at block resolution: positions, unit normals, albedo,
/// and area weights per facet, with maps between facets and full-res pixels.
struct FacetSet {
  int h = 0, w = 0;      // full-resolution dims
  int factor = 4;
  int bh = 0, bw = 0;    // block-grid dims
  int count = 0;

  std::vector<Vector3d> position;  // (x, y, depth), y up
  std::vector<Vector3d> normal;
  std::vector<double> albedo;
  std::vector<double> area;
  std::vector<int> block_row, block_col;

  std::vector<int> facet_of_block;  // bh*bw, -1 where none
  std::vector<int> facet_of_pixel;  // h*w, -1 where none
  std::vector<std::vector<int>> pixels_of_facet;

  std::vector<double> block_depth;     // bh*bw block-mean depth
  std::vector<uint8_t> block_has_depth;

  /// Bilinear interpolation stencil from facets to one masked pixel.
  struct PixelWeight {
    std::array<int, 4> facet{-1, -1, -1, -1};
    std::array<double, 4> weight{0, 0, 0, 0};
  };
  std::vector<int> masked_pixels;          // row-major pixel indices
  std::vector<PixelWeight> upsample;       // aligned with masked_pixels

  /// Block-mean of a per-pixel 3-vector field over each facet's pixels.
  Eigen::MatrixX3d downsample_vectors(const NormalMap& nm) const;
  /// Bilinear upsample of per-facet scalars to masked pixels (aligned with
  /// masked_pixels order).
  std::vector<double> upsample_scalars(const Eigen::VectorXd& per_facet) const;
  Eigen::MatrixX3d facet_matrix_scaled(const std::vector<double>& row_scale) const;
};

/// Facetize from normals and albedo; depth comes from integrating the
/// normal-derived gradient field.
FacetSet build_facets(const NormalMap& nm, const AlbedoMap& albedo, const Mask& mask,
                      int factor = 4);

/// Facetize with an explicitly supplied depth map.
FacetSet build_facets_from_maps(const NormalMap& nm, const AlbedoMap& albedo,
                                const DepthMap& depth, const Mask& mask, int factor = 4);

/// m x m nonnegative coupling matrix with zero diagonal; symmetric because
/// the pair term is evaluated once per unordered pair.
struct InterreflectionKernel {
  Eigen::MatrixXd K;
  int count() const { return static_cast<int>(K.rows()); }
};

/// K_ij = (n_i . -r)(n_j . r) V / (r.r)^2 scaled by sqrt(A_i A_j); V is a
/// strict-positivity test on both cosines plus a heightfield occlusion march
/// at one downsampled pixel per step.
InterreflectionKernel interreflection_kernel(const FacetSet& fs);

}  // namespace ps
