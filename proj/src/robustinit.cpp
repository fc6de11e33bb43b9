#include "ps/robustinit.hpp"

#include <algorithm>
#include <cmath>

namespace ps {

double soft_threshold(double x, double tau) {
  require(tau >= 0.0, "soft threshold needs tau >= 0");
  const double mag = std::abs(x) - tau;
  return mag > 0.0 ? (x > 0.0 ? mag : -mag) : 0.0;
}

Eigen::MatrixXd soft_threshold(const Eigen::MatrixXd& x, double tau) {
  require(tau >= 0.0, "soft threshold needs tau >= 0");
  return x.unaryExpr([tau](double v) {
    const double mag = std::abs(v) - tau;
    return mag > 0.0 ? (v > 0.0 ? mag : -mag) : 0.0;
  });
}

namespace {

struct ThinSvd {
  Eigen::MatrixXd u;       // m x r
  Eigen::VectorXd sigma;   // r
  Eigen::MatrixXd v;       // n x r
};

// Thin SVD; tall matrices go through the Gram route (eigendecomposition of
// X^T X) since the column count here is the image count, which stays small.
ThinSvd thin_svd(const Eigen::MatrixXd& m) {
  const bool tall = m.rows() >= m.cols();
  const Eigen::MatrixXd& a = m;
  if (tall && m.cols() <= 512) {
    Eigen::MatrixXd gram = a.transpose() * a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    require(eig.info() == Eigen::Success, "SVD non-convergence (iteration cap exceeded)");
    const int n = static_cast<int>(m.cols());
    ThinSvd out;
    out.sigma.resize(n);
    out.v.resize(n, n);
    // Eigenvalues come back ascending; flip to descending singular values.
    for (int i = 0; i < n; ++i) {
      out.sigma[i] = std::sqrt(std::max(0.0, eig.eigenvalues()[n - 1 - i]));
      out.v.col(i) = eig.eigenvectors().col(n - 1 - i);
    }
    out.u.resize(m.rows(), n);
    const double tiny = 1e-14 * (out.sigma.size() ? std::max(out.sigma[0], 1e-300) : 1.0);
    for (int i = 0; i < n; ++i) {
      if (out.sigma[i] > tiny)
        out.u.col(i) = a * out.v.col(i) / out.sigma[i];
      else
        out.u.col(i).setZero();
    }
    return out;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  require(svd.info() == Eigen::Success, "SVD non-convergence (iteration cap exceeded)");
  ThinSvd out;
  out.u = svd.matrixU();
  out.sigma = svd.singularValues();
  out.v = svd.matrixV();
  return out;
}

}  // namespace

Eigen::MatrixXd partial_svt(const Eigen::MatrixXd& m, int target_rank, double tau) {
  require(target_rank >= 0, "partial SVT needs K >= 0");
  require(tau >= 0.0, "partial SVT needs tau >= 0");
  ThinSvd svd = thin_svd(m);
  Eigen::VectorXd s = svd.sigma;
  for (int i = target_rank; i < s.size(); ++i) s[i] = soft_threshold(s[i], tau);
  return svd.u * s.asDiagonal() * svd.v.transpose();
}

RpcaResult rpca_partial_sum(const Eigen::MatrixXd& x, const RpcaOptions& opts) {
  const int m = static_cast<int>(x.rows());
  const int n = static_cast<int>(x.cols());
  require(m >= opts.target_rank && n >= opts.target_rank,
          "matrix smaller than the target rank");
  require(x.allFinite(), "input matrix must be finite");

  const double norm_x = x.norm();
  if (norm_x == 0.0) {
    RpcaResult out;
    out.Z = Eigen::MatrixXd::Zero(m, n);
    out.E = Eigen::MatrixXd::Zero(m, n);
    out.converged = true;
    return out;
  }

  const double lambda = opts.lambda > 0 ? opts.lambda : 1.0 / std::sqrt(static_cast<double>(std::max(m, n)));
  const double sigma1 = thin_svd(x).sigma[0];
  double mu = opts.mu0 > 0 ? opts.mu0 : 1.25 / sigma1;
  const double inf_norm = x.cwiseAbs().maxCoeff();

  Eigen::MatrixXd y = x / std::max(sigma1, inf_norm / lambda);
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(m, n);
  Eigen::MatrixXd e = Eigen::MatrixXd::Zero(m, n);

  RpcaResult out;
  for (int k = 0; k < opts.max_iter; ++k) {
    z = partial_svt(x - e + y / mu, opts.target_rank, 1.0 / mu);
    e = soft_threshold(x - z + y / mu, lambda / mu);
    const Eigen::MatrixXd residual_mat = x - z - e;
    y += mu * residual_mat;
    mu *= opts.rho_mu;
    out.iterations = k + 1;
    out.residual = residual_mat.norm() / norm_x;
    if (out.residual < opts.tol) {
      out.converged = true;
      break;
    }
  }
  out.Z = std::move(z);
  out.E = std::move(e);
  return out;
}

std::pair<NormalMap, AlbedoMap> normals_from_lowrank(const Eigen::MatrixXd& z,
                                                     const LightSet& lights, const Mask& mask) {
  lights.validate();
  const Eigen::Matrix3Xd L = lights.direction_matrix();
  require(z.cols() == L.cols(), "low-rank matrix column count does not match light count");
  {
    Eigen::JacobiSVD<Eigen::Matrix3Xd> svd(L);
    require(svd.singularValues()[2] > 1e-10 * svd.singularValues()[0],
            "degenerate light configuration");
  }
  const std::vector<int> px = mask.pixel_list();
  require(static_cast<int>(px.size()) == z.rows(),
          "low-rank matrix row count does not match masked pixel count");

  // Least-squares N from L^T N = Z^T, solved by QR rather than the Gram
  // inverse to keep the recovery exact on clean data.
  Eigen::MatrixXd n_raw =
      Eigen::MatrixXd(L.transpose()).colPivHouseholderQr().solve(z.transpose());  // 3 x m

  NormalMap nm(mask.h, mask.w);
  nm.mask = mask;
  AlbedoMap am(mask.h, mask.w, 1);
  int zero_norm = 0;
  for (size_t k = 0; k < px.size(); ++k) {
    const int r = px[k] / mask.w;
    const int c = px[k] % mask.w;
    Vector3d b = n_raw.col(static_cast<int>(k));
    const double rho = b.norm();
    if (rho <= 0.0) {
      ++zero_norm;
      nm.set(r, c, Vector3d(0, 0, 1));
      am.at(r, c, 0) = 0.0;
      continue;
    }
    Vector3d n = b / rho;
    if (n.z() < 0) n = -n;
    nm.set(r, c, n);
    am.at(r, c, 0) = std::clamp(rho, 0.0, 1.0 - 1e-6);
  }
  require(zero_norm < static_cast<int>(px.size()), "zero-norm normal on all pixels");
  return {std::move(nm), std::move(am)};
}

RobustInitResult robust_initialize(const ImageStack& stack, const LightSet& lights,
                                   const RpcaOptions& opts) {
  stack.validate();
  lights.validate();
  require(lights.count() == stack.n, "light count does not match image count");

  const std::vector<int> px = stack.mask.pixel_list();
  Eigen::MatrixXd x(static_cast<int>(px.size()), stack.n);
  for (int i = 0; i < stack.n; ++i) {
    const double inv_e = 1.0 / lights.intensities[i];
    for (size_t k = 0; k < px.size(); ++k) {
      const int r = px[k] / stack.w;
      const int c = px[k] % stack.w;
      x(static_cast<int>(k), i) = stack.luminance(i, r, c) * inv_e;
    }
  }

  RobustInitResult out;
  out.rpca = rpca_partial_sum(x, opts);
  auto [nm, am] = normals_from_lowrank(out.rpca.Z, lights, stack.mask);
  out.normals = std::move(nm);
  out.albedo = std::move(am);
  return out;
}

}  // namespace ps
