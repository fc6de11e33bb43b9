#pragma once

#include <Eigen/Dense>

#include "ps/core.hpp"
#include "ps/geometry.hpp"

namespace ps {

/// Cached factorization of (I - P K) with P = diag(albedo / pi). Verifies the
/// spectral radius of P K is below one before factorizing.
class InterreflectSolver {
 public:
  InterreflectSolver() = default;
  InterreflectSolver(const Eigen::VectorXd& p_diag, const Eigen::MatrixXd& k);

  int size() const { return m_; }
  /// Solves (I - P K) X = B column by column.
  Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const;
  /// Solves (I - P K)^T X = B (the adjoint map, used for gradients).
  Eigen::MatrixXd solve_transpose(const Eigen::MatrixXd& b) const;
  /// Applies (I - P K) directly.
  Eigen::MatrixXd apply_forward(const Eigen::MatrixXd& x) const;

 private:
  int m_ = 0;
  Eigen::MatrixXd system_;  // I - P K
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
  bool use_lu_ = false;
};

/// Threshold between the dense LU solve and Neumann iteration.
constexpr int kDirectSolveLimit = 4096;

/// Total facet radiance from the source-only radiance:
/// X = (I - P K)^{-1} X_s with P = diag(albedo / pi).
Eigen::MatrixXd forward_interreflect(const Eigen::MatrixXd& xs, const Eigen::VectorXd& p_diag,
                                     const Eigen::MatrixXd& k);

/// Facet-matrix form of the same solve: F_ny = (I - P K)^{-1} F.
Eigen::MatrixX3d nayar_update(const Eigen::MatrixX3d& f, const Eigen::VectorXd& p_diag,
                              const Eigen::MatrixXd& k);

/// Inverse map recovering source-level facets from observed pseudo facets:
/// F = (I - P K) F_ny.
Eigen::MatrixX3d remove_interreflection(const Eigen::MatrixX3d& f_ny,
                                        const Eigen::VectorXd& p_diag,
                                        const Eigen::MatrixXd& k);

struct NayarResult {
  NormalMap normals;
  AlbedoMap albedo;
  DepthMap depth;
  int iterations_run = 0;
};

/// Classical iterative refinement: photometric-stereo pseudo normals, then
/// repeated kernel construction and interreflection removal at facet
/// resolution, with high-frequency detail reattached on upsampling. Stops
/// after `iters` rounds or when successive maps differ by less than 0.01 deg.
NayarResult nayar_iterate(const ImageStack& stack, const LightSet& lights, int iters = 15,
                          int factor = 4);

}  // namespace ps
