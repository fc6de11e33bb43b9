#include "ps/interreflection.hpp"

#include <algorithm>
#include <cmath>

#include "ps/classic.hpp"

namespace ps {

namespace {

// Spectral-radius estimate for the nonnegative matrix P K. The infinity norm
// is a cheap upper bound; power iteration refines it when the bound is >= 1.
double spectral_radius_estimate(const Eigen::VectorXd& p_diag, const Eigen::MatrixXd& k) {
  const int m = static_cast<int>(k.rows());
  double inf_norm = 0.0;
  for (int i = 0; i < m; ++i) inf_norm = std::max(inf_norm, p_diag[i] * k.row(i).cwiseAbs().sum());
  if (inf_norm < 1.0) return inf_norm;
  Eigen::VectorXd v = Eigen::VectorXd::Ones(m) / std::sqrt(static_cast<double>(m));
  double lambda = 0.0;
  for (int it = 0; it < 100; ++it) {
    Eigen::VectorXd w = p_diag.asDiagonal() * (k * v);
    const double nw = w.norm();
    if (nw == 0.0) return 0.0;
    lambda = nw;
    v = w / nw;
  }
  return lambda;
}

}  // namespace

InterreflectSolver::InterreflectSolver(const Eigen::VectorXd& p_diag, const Eigen::MatrixXd& k) {
  require(k.rows() == k.cols(), "kernel matrix must be square");
  require(p_diag.size() == k.rows(), "albedo diagonal size mismatch");
  m_ = static_cast<int>(k.rows());
  const double radius = spectral_radius_estimate(p_diag, k);
  require(radius < 1.0 - 1e-12, "non-physical albedo/kernel: interreflection solve diverges");
  system_ = Eigen::MatrixXd::Identity(m_, m_) - p_diag.asDiagonal() * k;
  if (m_ <= kDirectSolveLimit) {
    lu_.compute(system_);
    use_lu_ = true;
  }
}

Eigen::MatrixXd InterreflectSolver::solve(const Eigen::MatrixXd& b) const {
  require(b.rows() == m_, "right-hand side row count mismatch");
  if (use_lu_) return lu_.solve(b);
  // Neumann iteration X <- X_s + P K X, convergent since rho(P K) < 1.
  const Eigen::MatrixXd pk = Eigen::MatrixXd::Identity(m_, m_) - system_;
  Eigen::MatrixXd x = b;
  for (int it = 0; it < 100000; ++it) {
    Eigen::MatrixXd next = b + pk * x;
    const double change = (next - x).norm();
    const double scale = std::max(next.norm(), 1e-300);
    x = std::move(next);
    if (change / scale < 1e-10) return x;
  }
  throw Error("interreflection Neumann iteration failed to converge");
}

Eigen::MatrixXd InterreflectSolver::solve_transpose(const Eigen::MatrixXd& b) const {
  require(b.rows() == m_, "right-hand side row count mismatch");
  if (use_lu_) return system_.transpose().partialPivLu().solve(b);
  const Eigen::MatrixXd pk_t = (Eigen::MatrixXd::Identity(m_, m_) - system_).transpose();
  Eigen::MatrixXd x = b;
  for (int it = 0; it < 100000; ++it) {
    Eigen::MatrixXd next = b + pk_t * x;
    const double change = (next - x).norm();
    const double scale = std::max(next.norm(), 1e-300);
    x = std::move(next);
    if (change / scale < 1e-10) return x;
  }
  throw Error("interreflection Neumann iteration failed to converge");
}

Eigen::MatrixXd InterreflectSolver::apply_forward(const Eigen::MatrixXd& x) const {
  require(x.rows() == m_, "operand row count mismatch");
  return system_ * x;
}

Eigen::MatrixXd forward_interreflect(const Eigen::MatrixXd& xs, const Eigen::VectorXd& p_diag,
                                     const Eigen::MatrixXd& k) {
  InterreflectSolver solver(p_diag, k);
  return solver.solve(xs);
}

Eigen::MatrixX3d nayar_update(const Eigen::MatrixX3d& f, const Eigen::VectorXd& p_diag,
                              const Eigen::MatrixXd& k) {
  InterreflectSolver solver(p_diag, k);
  return solver.solve(f);
}

Eigen::MatrixX3d remove_interreflection(const Eigen::MatrixX3d& f_ny,
                                        const Eigen::VectorXd& p_diag,
                                        const Eigen::MatrixXd& k) {
  require(k.rows() == k.cols() && p_diag.size() == k.rows() && f_ny.rows() == k.rows(),
          "facet matrix / kernel size mismatch");
  return f_ny - p_diag.asDiagonal() * (k * f_ny);
}

namespace {

// Upsample per-facet vectors to full resolution, reattach the pseudo map's
// high-frequency residual, and renormalize.
NormalMap upsample_with_residual(const FacetSet& fs, const Eigen::MatrixX3d& facet_vectors,
                                 const Eigen::MatrixX3d& facet_baseline,
                                 const NormalMap& full_baseline, const Mask& mask) {
  NormalMap out(mask.h, mask.w);
  out.mask = mask;
  for (size_t kpx = 0; kpx < fs.masked_pixels.size(); ++kpx) {
    const int px = fs.masked_pixels[kpx];
    const FacetSet::PixelWeight& pw = fs.upsample[kpx];
    Vector3d up = Vector3d::Zero();
    Vector3d base = Vector3d::Zero();
    for (int j = 0; j < 4; ++j) {
      if (pw.facet[j] < 0) continue;
      up += pw.weight[j] * facet_vectors.row(pw.facet[j]).transpose();
      base += pw.weight[j] * facet_baseline.row(pw.facet[j]).transpose();
    }
    Vector3d n = up + full_baseline.get(px / mask.w, px % mask.w) - base;
    const double len = n.norm();
    n = len > 1e-12 ? Vector3d(n / len) : Vector3d(0, 0, 1);
    if (n.z() < 0) n = -n;
    out.set(px / mask.w, px % mask.w, n);
  }
  return out;
}

Eigen::MatrixX3d normalize_rows(const Eigen::MatrixX3d& f, Eigen::VectorXd* row_norms) {
  Eigen::MatrixX3d out(f.rows(), 3);
  if (row_norms) row_norms->resize(f.rows());
  for (int i = 0; i < f.rows(); ++i) {
    const double len = f.row(i).norm();
    if (row_norms) (*row_norms)[i] = len;
    out.row(i) = len > 1e-12 ? (f.row(i) / len).eval() : Eigen::RowVector3d(0, 0, 1);
    if (out(i, 2) < 0) out.row(i) = -out.row(i);
  }
  return out;
}

}  // namespace

NayarResult nayar_iterate(const ImageStack& stack, const LightSet& lights, int iters,
                          int factor) {
  require(iters >= 0, "iteration count must be nonnegative");
  const WoodhamResult pseudo = woodham_solve(stack, lights);
  const Mask& mask = stack.mask;

  NayarResult out;
  out.normals = pseudo.normals;
  out.albedo = pseudo.albedo;
  if (iters == 0) {
    const GradientResult gr = normals_to_gradients(out.normals);
    out.depth = integrate_depth(gr.field, mask);
    return out;
  }

  // Data-side pseudo facets (albedo-scaled pseudo normals) stay fixed; the
  // kernel geometry is rebuilt from the evolving estimate each round.
  NormalMap pseudo_scaled(mask.h, mask.w);  // rho * n, not unit
  pseudo_scaled.mask = mask;
  for (int r = 0; r < mask.h; ++r)
    for (int c = 0; c < mask.w; ++c)
      if (mask.at(r, c))
        pseudo_scaled.set(r, c, pseudo.albedo.mean_at(r, c) * pseudo.normals.get(r, c));

  NormalMap current = pseudo.normals;
  AlbedoMap albedo = pseudo.albedo;
  for (int it = 0; it < iters; ++it) {
    const FacetSet fs = build_facets(current, albedo, mask, factor);
    const InterreflectionKernel kern = interreflection_kernel(fs);
    const Eigen::VectorXd p_diag =
        Eigen::Map<const Eigen::VectorXd>(fs.albedo.data(), fs.count) / kPi;

    const Eigen::MatrixX3d f_pseudo = fs.downsample_vectors(pseudo_scaled);
    const Eigen::MatrixX3d f_corrected = remove_interreflection(f_pseudo, p_diag, kern.K);

    Eigen::VectorXd rho_f;
    const Eigen::MatrixX3d n_f = normalize_rows(f_corrected, &rho_f);
    const Eigen::MatrixX3d n_baseline = normalize_rows(f_pseudo, nullptr);

    NormalMap next =
        upsample_with_residual(fs, n_f, n_baseline, pseudo.normals, mask);

    // Albedo refresh from the corrected row norms, high frequencies from the
    // pseudo albedo.
    Eigen::VectorXd rho_pseudo(fs.count);
    for (int f = 0; f < fs.count; ++f) rho_pseudo[f] = f_pseudo.row(f).norm();
    const std::vector<double> rho_up = fs.upsample_scalars(rho_f);
    const std::vector<double> rho_base_up = fs.upsample_scalars(rho_pseudo);
    AlbedoMap next_albedo(mask.h, mask.w, stack.c);
    for (size_t kpx = 0; kpx < fs.masked_pixels.size(); ++kpx) {
      const int px = fs.masked_pixels[kpx];
      const int r = px / mask.w, c = px % mask.w;
      const double lowfreq_shift = rho_up[kpx] - rho_base_up[kpx];
      for (int ch = 0; ch < stack.c; ++ch)
        next_albedo.at(r, c, ch) =
            std::clamp(pseudo.albedo.at(r, c, ch) + lowfreq_shift, 0.0, 1.0 - 1e-6);
    }

    const double change = mean_angular_difference(next, current, mask);
    current = std::move(next);
    albedo = std::move(next_albedo);
    out.iterations_run = it + 1;
    if (change < 0.01) break;
  }

  out.normals = std::move(current);
  out.albedo = std::move(albedo);
  const GradientResult gr = normals_to_gradients(out.normals);
  out.depth = integrate_depth(gr.field, mask);
  return out;
}

}  // namespace ps
