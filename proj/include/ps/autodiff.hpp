#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "ps/common.hpp"

namespace ps::ad {

/// Dense (channels, height, width) tensor of 64-bit floats with a gradient
/// buffer of identical shape, allocated lazily and zero-initialized.
struct Tensor {
  int c = 0, h = 0, w = 0;
  std::vector<double> val;
  std::vector<double> grad;

  Tensor(int c_, int h_, int w_)
      : c(c_), h(h_), w(w_), val(static_cast<size_t>(c_) * h_ * w_, 0.0) {}

  size_t size() const { return val.size(); }
  double& v(int ci, int y, int x) { return val[(static_cast<size_t>(ci) * h + y) * w + x]; }
  double v(int ci, int y, int x) const { return val[(static_cast<size_t>(ci) * h + y) * w + x]; }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

using TensorPtr = std::shared_ptr<Tensor>;

TensorPtr make_tensor(int c, int h, int w);
TensorPtr make_scalar(double v);
TensorPtr make_constant(int c, int h, int w, const std::vector<double>& values);

/// Ordered record of primitive operations; backward traverses it in exact
/// reverse. A tape is single-owner while recording.
class Tape {
 public:
  /// Registers a node. The closure must accumulate input gradients from the
  /// output gradient using only captured state.
  void push(std::vector<TensorPtr> inputs, TensorPtr out, std::function<void()> backward);

  /// Seeds d(loss) = 1 and runs all recorded backward closures in reverse.
  /// The loss must be a scalar produced by this tape.
  void backward(const TensorPtr& loss);

  /// Zeroes gradients of every tensor the tape touched.
  void zero_all_grads();

  size_t node_count() const { return nodes_.size(); }

  // --- primitives -----------------------------------------------------
  TensorPtr conv2d_3x3(const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias);
  TensorPtr conv2d_1x1(const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias);
  /// Per-channel spatial normalization with learned affine (instance-norm
  /// semantics; the optimizer always sees a single image per pass).
  TensorPtr channel_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta);
  TensorPtr relu(const TensorPtr& x);
  TensorPtr lrelu(const TensorPtr& x, double slope);
  /// Per-pixel L2 normalization across channels.
  TensorPtr l2_normalize_channels(const TensorPtr& x);
  TensorPtr concat_channels(const TensorPtr& a, const TensorPtr& b);
  /// Elementwise product; the second operand may have c == 1 and is then
  /// broadcast across the first operand's channels.
  TensorPtr hadamard(const TensorPtr& a, const TensorPtr& b);
  TensorPtr scalar_mul(const TensorPtr& a, double s);
  TensorPtr add(const TensorPtr& a, const TensorPtr& b);
  /// Mean of |x| over the given pixel indices (and all channels); the index
  /// list addresses pixels as row-major y*w + x.
  TensorPtr masked_mean_abs(const TensorPtr& x, const std::vector<int>& pixel_idx);

 private:
  struct Node {
    std::vector<TensorPtr> inputs;
    TensorPtr out;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  std::unordered_set<Tensor*> outputs_;
};

/// Standard Adam with bias correction.
struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step = 0;
  std::vector<std::vector<double>> m, v;

  void init(const std::vector<TensorPtr>& params);
};

/// One update of every parameter from its .grad buffer; lr is per parameter.
void adam_step(const std::vector<TensorPtr>& params, const std::vector<double>& lr,
               AdamState& state);

/// Max relative error between the analytic gradient and central differences
/// of f, with denominator max(|analytic|, |numeric|, 1e-8). When coords is
/// non-null only those flat indices are probed.
double gradcheck(const std::function<double(const std::vector<double>&)>& f,
                 const std::vector<double>& x0, const std::vector<double>& analytic_grad,
                 double step, const std::vector<int>* coords = nullptr);

struct DirectionalReport {
  double max_rel_err = 0.0;
  int checked = 0;
  int skipped = 0;  // directions whose probe interval crossed a relu/abs kink
};

/// Directional variant for deep piecewise-smooth objectives: compares the
/// central difference of f along seeded random unit directions against the
/// projection of the analytic gradient. Directions where the full-step and
/// half-step quotients disagree crossed a kink inside the interval (where no
/// derivative exists to compare against) and are excluded; on kink-free
/// directions the quotients agree to O(step^2).
DirectionalReport gradcheck_directional(const std::function<double(const std::vector<double>&)>& f,
                                        const std::vector<double>& x0,
                                        const std::vector<double>& analytic_grad, double step,
                                        int n_directions, uint64_t seed);

}  // namespace ps::ad
