#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ps/autodiff.hpp"
#include "ps/core.hpp"
#include "ps/geometry.hpp"
#include "ps/interreflection.hpp"

namespace ps {

/// Per-pixel view component of the mirror direction: R = v . (2 (n.l) n - l).
/// May be negative; stored as-is. Zero outside the mask.
std::vector<double> specular_map(const NormalMap& nm, const Vector3d& l);

/// Seeded choice of round(fraction * m) masked pixels, returned sorted so a
/// fraction of 1.0 reproduces the full-mask ordering exactly.
std::vector<int> sample_masked_pixels(const Mask& mask, double fraction, uint64_t seed);

/// Mean absolute difference over a seeded random subset of masked pixels,
/// all images and channels.
double rec_loss(const ImageStack& x, const ImageStack& xtilde, const Mask& mask,
                double sample_fraction, uint64_t seed);

/// Mean squared Euclidean distance between unit normal maps over the mask.
double weak_loss(const NormalMap& n_ny, const NormalMap& n_init, const Mask& mask);

/// Test-time optimization schedule.
struct FitConfig {
  int iterations = 1000;
  double lr = 8e-4;
  double lr_estimation = 8e-5;   // feature extractor and normal head
  int lr_drop_iteration = 900;   // learning rates multiplied by the factor afterward
  double lr_drop_factor = 0.1;
  int weak_cutoff = 50;          // weak supervision weight zeroed after this iteration
  double sample_fraction = 0.1;
  int kernel_refresh_period = 100;
  double injected_noise_var = 0.1;  // Gaussian variance added to the reflectance-branch input
  double weight_init_std = 0.02;
  int facet_factor = 4;
  int width_f = 32, width_sp = 16, width_lg = 32, width_r = 32;
  uint64_t seed = 0;

  void validate() const;
};

FitConfig parse_fit_config(const std::string& text);
FitConfig load_fit_config(const std::string& path);

/// Convolution weights for every block of the network plus the channel_norm
/// affine parameters.
struct NetParams {
  struct Conv {
    ad::TensorPtr w, b;
  };
  struct Norm {
    ad::TensorPtr gamma, beta;
  };
  std::vector<Conv> xi_f;   // 3 conv layers
  std::vector<Norm> xi_f_n;
  Conv xi_n1;               // 1 conv layer
  std::vector<Conv> f_sp;   // 3 conv layers
  std::vector<Norm> f_sp_n;
  Conv f_lg;                // one 1x1 conv
  Norm f_lg_n;
  Conv f_r1;                // 2 conv layers
  Norm f_r_n;
  Conv f_r2;

  std::vector<ad::TensorPtr> all() const;
  std::vector<ad::TensorPtr> estimation_branch() const;

  static NetParams create(int stack_channels, int image_channels, const FitConfig& cfg,
                          Rng& rng);
};

/// Facet-resolution interreflection operator used inside the network; K and
/// P are constants between refreshes and the solve is differentiated as a
/// fixed linear map.
struct FacetOperator {
  FacetSet fs;
  InterreflectSolver solver;
  std::vector<double> facet_albedo;  // scales normal rows into facet vectors

  static FacetOperator build(const NormalMap& normals, const AlbedoMap& albedo,
                             const Mask& mask, int factor);
  /// Operator with an explicitly supplied kernel (tests use K = 0).
  static FacetOperator with_kernel(const FacetSet& fs, const Eigen::VectorXd& p_diag,
                                   const Eigen::MatrixXd& k, std::vector<double> facet_albedo);
};

struct ForwardHandles {
  ad::TensorPtr phi, n_o, n_ny;
  std::vector<ad::TensorPtr> psi;
  std::vector<ad::TensorPtr> xtilde;
};

/// One pass of the full rendering network on the tape. `stack_input` is the
/// normalized image block with the mask channel appended; `images` are the
/// per-image normalized tensors used in the rendering comparison and
/// `images_for_sp` the (possibly noise-injected) copies fed to the
/// reflectance branch.
ForwardHandles forward_pass(ad::Tape& tape, const NetParams& params,
                            const ad::TensorPtr& stack_input,
                            const std::vector<ad::TensorPtr>& images_for_sp,
                            const LightSet& lights, const FacetOperator& op,
                            const Mask& mask);

struct IterationRecord {
  int iteration = 0;
  double lr = 0.0;
  double lr_estimation = 0.0;
  double lambda_w = 0.0;
  double l_rec = 0.0;
  double l_weak = 0.0;
  double mae = -1.0;  // vs ground truth when provided
};

struct FitResult {
  NormalMap n_o;
  NormalMap n_ny;
  DepthMap depth;
  std::vector<std::vector<double>> reflectance;  // per image, h*w*c
  std::vector<IterationRecord> trace;
  double lambda_w = 0.0;
  double sigma_q = 0.0;
};

/// Full test-time optimization: normalize by twice the quadratic mean,
/// initialize the network, and run the configured iterations of Adam on the
/// reconstruction loss with early weak supervision and periodic kernel
/// refreshes from the current normal estimate.
FitResult fit(const ImageStack& stack, const LightSet& lights, const NormalMap& n_init,
              const AlbedoMap& albedo_init, const FitConfig& cfg,
              const NormalMap* gt_normals = nullptr);

void write_loss_trace(const std::string& path, const FitResult& result);

}  // namespace ps
