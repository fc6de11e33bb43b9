#pragma once

#include <Eigen/Dense>

#include "ps/core.hpp"

namespace ps {

/// sign(x) * max(|x| - tau, 0).
double soft_threshold(double x, double tau);
Eigen::MatrixXd soft_threshold(const Eigen::MatrixXd& x, double tau);

/// SVD shrinkage that keeps the top K singular values untouched and
/// soft-thresholds the rest.
Eigen::MatrixXd partial_svt(const Eigen::MatrixXd& m, int target_rank, double tau);

struct RpcaOptions {
  int target_rank = 3;
  double lambda = -1.0;  // < 0: 1/sqrt(max(m, n))
  double mu0 = -1.0;     // < 0: 1.25 / sigma_1(X)
  double rho_mu = 1.2;   // gentler than the usual 1.5: the partial-SVT split
                         // needs a few more moderate-penalty rounds to settle
  double tol = 1e-7;
  int max_iter = 200;
};

struct RpcaResult {
  Eigen::MatrixXd Z;  // low-rank part
  Eigen::MatrixXd E;  // sparse outlier part
  int iterations = 0;
  double residual = 0.0;  // ||X - Z - E||_F / ||X||_F
  bool converged = false;
};

/// Splits X = Z + E by ADMM on the partial-sum-of-singular-values objective:
/// Z step is a partial SVT, E step a soft threshold, then the multiplier and
/// penalty updates.
RpcaResult rpca_partial_sum(const Eigen::MatrixXd& x, const RpcaOptions& opts = {});

/// Least-squares normals from a low-rank radiance matrix: rows of
/// Z (m x n) are per-pixel radiance vectors, N = (L L^T)^{-1} L Z^T. The mask
/// supplies the row-major pixel order of Z's rows.
std::pair<NormalMap, AlbedoMap> normals_from_lowrank(const Eigen::MatrixXd& z,
                                                     const LightSet& lights, const Mask& mask);

/// Full robust initialization: channel-mean images divided by their
/// calibrated intensities feed the RPCA solve, followed by the least-squares
/// normal extraction.
struct RobustInitResult {
  NormalMap normals;
  AlbedoMap albedo;
  RpcaResult rpca;
};
RobustInitResult robust_initialize(const ImageStack& stack, const LightSet& lights,
                                   const RpcaOptions& opts = {});

}  // namespace ps
