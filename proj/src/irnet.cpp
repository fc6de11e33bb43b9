#include "ps/irnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace ps {

// ---------------------------------------------------------------------------
// Plain operations
// ---------------------------------------------------------------------------

std::vector<double> specular_map(const NormalMap& nm, const Vector3d& l) {
  require(std::abs(l.norm() - 1.0) <= 1e-9, "light direction must be unit length");
  const Vector3d v = view_dir();
  std::vector<double> out(static_cast<size_t>(nm.h) * nm.w, 0.0);
  for (int r = 0; r < nm.h; ++r) {
    for (int c = 0; c < nm.w; ++c) {
      if (!nm.mask.at(r, c)) continue;
      const Vector3d n = nm.get(r, c);
      const Vector3d refl = 2.0 * n.dot(l) * n - l;
      out[static_cast<size_t>(r) * nm.w + c] = refl.dot(v);
    }
  }
  return out;
}

std::vector<int> sample_masked_pixels(const Mask& mask, double fraction, uint64_t seed) {
  require(fraction > 0.0 && fraction <= 1.0, "sample fraction must lie in (0, 1]");
  std::vector<int> px = mask.pixel_list();
  const int m = static_cast<int>(px.size());
  require(m > 0, "mask has no pixels");
  int take = static_cast<int>(std::llround(fraction * m));
  take = std::clamp(take, 1, m);
  if (take < m) {
    Rng rng(seed);
    for (int i = 0; i < take; ++i) {
      const int j = i + rng.uniform_int(m - i);
      std::swap(px[i], px[j]);
    }
    px.resize(take);
    std::sort(px.begin(), px.end());
  }
  return px;
}

double rec_loss(const ImageStack& x, const ImageStack& xtilde, const Mask& mask,
                double sample_fraction, uint64_t seed) {
  require(x.n == xtilde.n && x.h == xtilde.h && x.w == xtilde.w && x.c == xtilde.c,
          "image stack shapes do not match");
  const std::vector<int> px = sample_masked_pixels(mask, sample_fraction, seed);
  double sum = 0.0;
  for (int i = 0; i < x.n; ++i)
    for (int p : px) {
      const int r = p / x.w, c = p % x.w;
      for (int ch = 0; ch < x.c; ++ch) sum += std::abs(x.at(i, r, c, ch) - xtilde.at(i, r, c, ch));
    }
  return sum / (static_cast<double>(px.size()) * x.n * x.c);
}

double weak_loss(const NormalMap& n_ny, const NormalMap& n_init, const Mask& mask) {
  require(n_ny.h == n_init.h && n_ny.w == n_init.w, "normal map shapes do not match");
  double sum = 0.0;
  int m = 0;
  for (int r = 0; r < mask.h; ++r)
    for (int c = 0; c < mask.w; ++c)
      if (mask.at(r, c)) {
        sum += (n_ny.get(r, c) - n_init.get(r, c)).squaredNorm();
        ++m;
      }
  require(m > 0, "mask has no pixels");
  return sum / m;
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void FitConfig::validate() const {
  require(iterations >= 0, "iterations must be >= 0");
  require(lr > 0 && lr_estimation > 0, "learning rates must be positive");
  require(lr_drop_factor > 0, "learning-rate drop factor must be positive");
  require(lr_drop_iteration > 0, "learning-rate drop iteration must be positive");
  require(weak_cutoff >= 0, "weak supervision cutoff must be >= 0");
  if (iterations > 0) require(weak_cutoff < iterations, "weak cutoff must be < iterations");
  require(sample_fraction > 0 && sample_fraction <= 1.0, "sample fraction must lie in (0, 1]");
  require(kernel_refresh_period >= 1, "kernel refresh period must be >= 1");
  require(injected_noise_var >= 0, "injected noise variance must be >= 0");
  require(weight_init_std > 0, "weight init std must be positive");
  require(facet_factor >= 1, "facet factor must be >= 1");
  require(width_f >= 1 && width_sp >= 1 && width_lg >= 1 && width_r >= 1,
          "channel widths must be >= 1");
}

FitConfig parse_fit_config(const std::string& text) {
  FitConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto strip = [](const std::string& s) {
      const auto b = s.find_first_not_of(" \t\r\n");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r\n");
      return s.substr(b, e - b + 1);
    };
    line = strip(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "bad config line " + std::to_string(line_no));
    const std::string key = strip(line.substr(0, eq));
    const std::string value = strip(line.substr(eq + 1));
    try {
      if (key == "iterations") cfg.iterations = std::stoi(value);
      else if (key == "lr") cfg.lr = std::stod(value);
      else if (key == "lr_estimation") cfg.lr_estimation = std::stod(value);
      else if (key == "lr_drop_iteration") cfg.lr_drop_iteration = std::stoi(value);
      else if (key == "lr_drop_factor") cfg.lr_drop_factor = std::stod(value);
      else if (key == "weak_cutoff") cfg.weak_cutoff = std::stoi(value);
      else if (key == "sample_fraction") cfg.sample_fraction = std::stod(value);
      else if (key == "kernel_refresh_period") cfg.kernel_refresh_period = std::stoi(value);
      else if (key == "injected_noise_var") cfg.injected_noise_var = std::stod(value);
      else if (key == "weight_init_std") cfg.weight_init_std = std::stod(value);
      else if (key == "facet_factor") cfg.facet_factor = std::stoi(value);
      else if (key == "width_f") cfg.width_f = std::stoi(value);
      else if (key == "width_sp") cfg.width_sp = std::stoi(value);
      else if (key == "width_lg") cfg.width_lg = std::stoi(value);
      else if (key == "width_r") cfg.width_r = std::stoi(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else throw Error("unknown config key: " + key);
    } catch (const std::invalid_argument&) {
      throw Error("bad value for " + key + " on line " + std::to_string(line_no));
    } catch (const std::out_of_range&) {
      throw Error("bad value for " + key + " on line " + std::to_string(line_no));
    }
  }
  cfg.validate();
  return cfg;
}

FitConfig load_fit_config(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "cannot open fit config: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_fit_config(ss.str());
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

namespace {

ad::TensorPtr gaussian_tensor(int c, int h, int w, double std_dev, Rng& rng) {
  auto t = ad::make_tensor(c, h, w);
  for (auto& v : t->val) v = std_dev * rng.gaussian();
  return t;
}

NetParams::Conv make_conv(int co, int ci, int k2, double init_std, Rng& rng) {
  NetParams::Conv conv;
  conv.w = gaussian_tensor(co, ci, k2, init_std, rng);
  conv.b = ad::make_tensor(co, 1, 1);
  return conv;
}

NetParams::Norm make_norm(int c) {
  NetParams::Norm norm;
  norm.gamma = ad::make_tensor(c, 1, 1);
  std::fill(norm.gamma->val.begin(), norm.gamma->val.end(), 1.0);
  norm.beta = ad::make_tensor(c, 1, 1);
  return norm;
}

}  // namespace

NetParams NetParams::create(int stack_channels, int image_channels, const FitConfig& cfg,
                            Rng& rng) {
  NetParams p;
  const double s = cfg.weight_init_std;
  p.xi_f.push_back(make_conv(cfg.width_f, stack_channels, 9, s, rng));
  p.xi_f.push_back(make_conv(cfg.width_f, cfg.width_f, 9, s, rng));
  p.xi_f.push_back(make_conv(cfg.width_f, cfg.width_f, 9, s, rng));
  for (int i = 0; i < 3; ++i) p.xi_f_n.push_back(make_norm(cfg.width_f));
  p.xi_n1 = make_conv(3, cfg.width_f, 9, s, rng);
  p.f_sp.push_back(make_conv(cfg.width_sp, image_channels + 1, 9, s, rng));
  p.f_sp.push_back(make_conv(cfg.width_sp, cfg.width_sp, 9, s, rng));
  p.f_sp.push_back(make_conv(cfg.width_sp, cfg.width_sp, 9, s, rng));
  for (int i = 0; i < 3; ++i) p.f_sp_n.push_back(make_norm(cfg.width_sp));
  p.f_lg = make_conv(cfg.width_lg, cfg.width_sp + cfg.width_f, 1, s, rng);
  p.f_lg_n = make_norm(cfg.width_lg);
  p.f_r1 = make_conv(cfg.width_r, cfg.width_lg, 9, s, rng);
  p.f_r_n = make_norm(cfg.width_r);
  p.f_r2 = make_conv(image_channels, cfg.width_r, 9, s, rng);
  return p;
}

std::vector<ad::TensorPtr> NetParams::all() const {
  std::vector<ad::TensorPtr> out = estimation_branch();
  for (const auto& c : f_sp) {
    out.push_back(c.w);
    out.push_back(c.b);
  }
  for (const auto& n : f_sp_n) {
    out.push_back(n.gamma);
    out.push_back(n.beta);
  }
  out.push_back(f_lg.w);
  out.push_back(f_lg.b);
  out.push_back(f_lg_n.gamma);
  out.push_back(f_lg_n.beta);
  out.push_back(f_r1.w);
  out.push_back(f_r1.b);
  out.push_back(f_r_n.gamma);
  out.push_back(f_r_n.beta);
  out.push_back(f_r2.w);
  out.push_back(f_r2.b);
  return out;
}

std::vector<ad::TensorPtr> NetParams::estimation_branch() const {
  std::vector<ad::TensorPtr> out;
  for (const auto& c : xi_f) {
    out.push_back(c.w);
    out.push_back(c.b);
  }
  for (const auto& n : xi_f_n) {
    out.push_back(n.gamma);
    out.push_back(n.beta);
  }
  out.push_back(xi_n1.w);
  out.push_back(xi_n1.b);
  return out;
}

// ---------------------------------------------------------------------------
// Facet operator and its tape nodes
// ---------------------------------------------------------------------------

FacetOperator FacetOperator::build(const NormalMap& normals, const AlbedoMap& albedo,
                                   const Mask& mask, int factor) {
  FacetOperator op;
  op.fs = build_facets(normals, albedo, mask, factor);
  const InterreflectionKernel kern = interreflection_kernel(op.fs);
  const Eigen::VectorXd p_diag =
      Eigen::Map<const Eigen::VectorXd>(op.fs.albedo.data(), op.fs.count) / kPi;
  op.solver = InterreflectSolver(p_diag, kern.K);
  op.facet_albedo = op.fs.albedo;
  return op;
}

FacetOperator FacetOperator::with_kernel(const FacetSet& fs, const Eigen::VectorXd& p_diag,
                                         const Eigen::MatrixXd& k,
                                         std::vector<double> facet_albedo) {
  FacetOperator op;
  op.fs = fs;
  op.solver = InterreflectSolver(p_diag, k);
  op.facet_albedo = std::move(facet_albedo);
  return op;
}

namespace {

// Block-mean of a (3, h, w) field over each facet's pixels -> (3, m, 1).
ad::TensorPtr facet_downsample(ad::Tape& tape, const ad::TensorPtr& x, const FacetSet& fs) {
  require(x->c == 3 && x->h == fs.h && x->w == fs.w, "facet_downsample: shape mismatch");
  auto out = ad::make_tensor(3, fs.count, 1);
  const int hw = fs.h * fs.w;
  for (int f = 0; f < fs.count; ++f) {
    const double inv = 1.0 / fs.pixels_of_facet[f].size();
    for (int ch = 0; ch < 3; ++ch) {
      double s = 0.0;
      for (int p : fs.pixels_of_facet[f]) s += x->val[static_cast<size_t>(ch) * hw + p];
      out->val[static_cast<size_t>(ch) * fs.count + f] = s * inv;
    }
  }
  ad::TensorPtr xc = x;
  const FacetSet* fsp = &fs;
  tape.push({x}, out, [xc, out, fsp]() {
    xc->ensure_grad();
    const int hw = fsp->h * fsp->w;
    for (int f = 0; f < fsp->count; ++f) {
      const double inv = 1.0 / fsp->pixels_of_facet[f].size();
      for (int ch = 0; ch < 3; ++ch) {
        const double g = out->grad[static_cast<size_t>(ch) * fsp->count + f] * inv;
        for (int p : fsp->pixels_of_facet[f]) xc->grad[static_cast<size_t>(ch) * hw + p] += g;
      }
    }
  });
  return out;
}

// (I - P K)^{-1} applied to facet rows; K and P are constants so the adjoint
// is the transposed solve.
ad::TensorPtr facet_solve(ad::Tape& tape, const ad::TensorPtr& x,
                          const InterreflectSolver& solver) {
  const int m = solver.size();
  require(x->c == 3 && x->h == m && x->w == 1, "facet_solve: shape mismatch");
  Eigen::MatrixXd f(m, 3);
  for (int ch = 0; ch < 3; ++ch)
    for (int i = 0; i < m; ++i) f(i, ch) = x->val[static_cast<size_t>(ch) * m + i];
  const Eigen::MatrixXd sol = solver.solve(f);
  auto out = ad::make_tensor(3, m, 1);
  for (int ch = 0; ch < 3; ++ch)
    for (int i = 0; i < m; ++i) out->val[static_cast<size_t>(ch) * m + i] = sol(i, ch);
  ad::TensorPtr xc = x;
  const InterreflectSolver* sp = &solver;
  tape.push({x}, out, [xc, out, sp, m]() {
    xc->ensure_grad();
    Eigen::MatrixXd g(m, 3);
    for (int ch = 0; ch < 3; ++ch)
      for (int i = 0; i < m; ++i) g(i, ch) = out->grad[static_cast<size_t>(ch) * m + i];
    const Eigen::MatrixXd gin = sp->solve_transpose(g);
    for (int ch = 0; ch < 3; ++ch)
      for (int i = 0; i < m; ++i) xc->grad[static_cast<size_t>(ch) * m + i] += gin(i, ch);
  });
  return out;
}

// Bilinear upsample of per-facet vectors to masked pixels of a (3, h, w) map.
ad::TensorPtr facet_upsample(ad::Tape& tape, const ad::TensorPtr& x, const FacetSet& fs) {
  require(x->c == 3 && x->h == fs.count && x->w == 1, "facet_upsample: shape mismatch");
  auto out = ad::make_tensor(3, fs.h, fs.w);
  const int hw = fs.h * fs.w;
  for (size_t k = 0; k < fs.masked_pixels.size(); ++k) {
    const int p = fs.masked_pixels[k];
    const FacetSet::PixelWeight& pw = fs.upsample[k];
    for (int ch = 0; ch < 3; ++ch) {
      double v = 0.0;
      for (int j = 0; j < 4; ++j)
        if (pw.facet[j] >= 0)
          v += pw.weight[j] * x->val[static_cast<size_t>(ch) * fs.count + pw.facet[j]];
      out->val[static_cast<size_t>(ch) * hw + p] = v;
    }
  }
  ad::TensorPtr xc = x;
  const FacetSet* fsp = &fs;
  tape.push({x}, out, [xc, out, fsp]() {
    xc->ensure_grad();
    const int hw = fsp->h * fsp->w;
    for (size_t k = 0; k < fsp->masked_pixels.size(); ++k) {
      const int p = fsp->masked_pixels[k];
      const FacetSet::PixelWeight& pw = fsp->upsample[k];
      for (int ch = 0; ch < 3; ++ch) {
        const double g = out->grad[static_cast<size_t>(ch) * hw + p];
        for (int j = 0; j < 4; ++j)
          if (pw.facet[j] >= 0)
            xc->grad[static_cast<size_t>(ch) * fsp->count + pw.facet[j]] += pw.weight[j] * g;
      }
    }
  });
  return out;
}

ad::TensorPtr conv_norm_relu(ad::Tape& tape, const ad::TensorPtr& x, const NetParams::Conv& conv,
                             const NetParams::Norm& norm, bool one_by_one = false) {
  ad::TensorPtr y = one_by_one ? tape.conv2d_1x1(x, conv.w, conv.b)
                               : tape.conv2d_3x3(x, conv.w, conv.b);
  y = tape.channel_norm(y, norm.gamma, norm.beta);
  return tape.relu(y);
}

}  // namespace

ForwardHandles forward_pass(ad::Tape& tape, const NetParams& params,
                            const ad::TensorPtr& stack_input,
                            const std::vector<ad::TensorPtr>& images_for_sp,
                            const LightSet& lights, const FacetOperator& op, const Mask& mask) {
  require(static_cast<int>(images_for_sp.size()) == lights.count(),
          "image/light count mismatch");
  ForwardHandles fh;

  // Global feature map.
  ad::TensorPtr phi = stack_input;
  for (int i = 0; i < 3; ++i) phi = conv_norm_relu(tape, phi, params.xi_f[i], params.xi_f_n[i]);
  fh.phi = phi;

  // Normal head and the interreflection-aware refinement.
  fh.n_o = tape.l2_normalize_channels(tape.conv2d_3x3(phi, params.xi_n1.w, params.xi_n1.b));
  {
    const FacetSet& fs = op.fs;
    ad::TensorPtr nf = facet_downsample(tape, fh.n_o, fs);
    std::vector<double> rho(op.facet_albedo.begin(), op.facet_albedo.end());
    ad::TensorPtr rho_t = ad::make_constant(1, fs.count, 1, rho);
    ad::TensorPtr f = tape.hadamard(nf, rho_t);
    ad::TensorPtr f_ny = facet_solve(tape, f, op.solver);
    ad::TensorPtr n_nyf = tape.l2_normalize_channels(f_ny);
    ad::TensorPtr baseline = tape.l2_normalize_channels(f);
    ad::TensorPtr up = facet_upsample(tape, n_nyf, fs);
    ad::TensorPtr up_base = facet_upsample(tape, baseline, fs);
    ad::TensorPtr residual = tape.add(fh.n_o, tape.scalar_mul(up_base, -1.0));
    fh.n_ny = tape.l2_normalize_channels(tape.add(up, residual));
  }

  // Per-image reflectance maps and renderings.
  const int h = mask.h, w = mask.w;
  const int hw = h * w;
  for (int i = 0; i < lights.count(); ++i) {
    const Vector3d& l = lights.directions[i];
    ad::TensorPtr wl = ad::make_constant(1, 3, 1, {l.x(), l.y(), l.z()});
    ad::TensorPtr wv = ad::make_constant(1, 3, 1, {0.0, 0.0, 1.0});
    ad::TensorPtr zero_b = ad::make_tensor(1, 1, 1);

    // Specular-reflection map from the current normals.
    ad::TensorPtr ndotl = tape.conv2d_1x1(fh.n_o, wl, zero_b);
    ad::TensorPtr ndotv = tape.conv2d_1x1(fh.n_o, wv, zero_b);
    ad::TensorPtr neg_lz =
        ad::make_constant(1, h, w, std::vector<double>(static_cast<size_t>(hw), -l.z()));
    ad::TensorPtr r_map =
        tape.add(tape.scalar_mul(tape.hadamard(ndotl, ndotv), 2.0), neg_lz);

    ad::TensorPtr s = tape.concat_channels(images_for_sp[i], r_map);
    for (int k = 0; k < 3; ++k) s = conv_norm_relu(tape, s, params.f_sp[k], params.f_sp_n[k]);
    ad::TensorPtr zi = conv_norm_relu(tape, tape.concat_channels(s, phi), params.f_lg,
                                      params.f_lg_n, /*one_by_one=*/true);
    ad::TensorPtr hidden = conv_norm_relu(tape, zi, params.f_r1, params.f_r_n);
    ad::TensorPtr psi = tape.relu(tape.conv2d_3x3(hidden, params.f_r2.w, params.f_r2.b));
    fh.psi.push_back(psi);

    ad::TensorPtr shading =
        tape.scalar_mul(tape.relu(tape.conv2d_1x1(fh.n_ny, wl, zero_b)), lights.intensities[i]);
    fh.xtilde.push_back(tape.hadamard(psi, shading));
  }
  return fh;
}

// ---------------------------------------------------------------------------
// Fit
// ---------------------------------------------------------------------------

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t stream, uint64_t it) {
  return seed ^ (0x9E3779B97F4A7C15ull * (stream * 1000003ull + it + 1));
}

NormalMap extract_normal_map(const ad::TensorPtr& t, const Mask& mask) {
  NormalMap nm(mask.h, mask.w);
  nm.mask = mask;
  const int hw = mask.h * mask.w;
  for (int r = 0; r < mask.h; ++r) {
    for (int c = 0; c < mask.w; ++c) {
      if (!mask.at(r, c)) continue;
      const int p = r * mask.w + c;
      Vector3d n(t->val[p], t->val[static_cast<size_t>(hw) + p],
                 t->val[2 * static_cast<size_t>(hw) + p]);
      const double len = n.norm();
      n = len > 1e-12 ? Vector3d(n / len) : Vector3d(0, 0, 1);
      if (n.z() < 0) n = -n;
      nm.set(r, c, n);
    }
  }
  return nm;
}

}  // namespace

FitResult fit(const ImageStack& stack, const LightSet& lights, const NormalMap& n_init,
              const AlbedoMap& albedo_init, const FitConfig& cfg, const NormalMap* gt_normals) {
  cfg.validate();
  stack.validate();
  lights.validate();
  n_init.validate();
  require(lights.count() == stack.n, "light count does not match image count");
  const Mask& mask = stack.mask;
  const int h = stack.h, w = stack.w, c = stack.c, n = stack.n;
  const int hw = h * w;
  const std::vector<int> masked_px = mask.pixel_list();

  FitResult result;

  // Normalization by twice the quadratic mean of masked intensities.
  double sq_sum = 0.0;
  for (int i = 0; i < n; ++i)
    for (int p : masked_px)
      for (int ch = 0; ch < c; ++ch) {
        const double v = stack.at(i, p / w, p % w, ch);
        sq_sum += v * v;
      }
  const double sigma_q =
      std::sqrt(sq_sum / (static_cast<double>(masked_px.size()) * n * c));
  require(sigma_q > 0.0, "degenerate input: all masked pixels are zero");
  const double scale = 1.0 / (2.0 * sigma_q);
  result.sigma_q = sigma_q;

  // Normalized per-image constants and the stacked network input.
  std::vector<ad::TensorPtr> images(n);
  for (int i = 0; i < n; ++i) {
    auto t = ad::make_tensor(c, h, w);
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < hw; ++p)
        t->val[static_cast<size_t>(ch) * hw + p] = stack.at(i, p / w, p % w, ch) * scale;
    images[i] = t;
  }
  ad::TensorPtr stack_input = ad::make_tensor(n * c + 1, h, w);
  for (int i = 0; i < n; ++i)
    std::copy(images[i]->val.begin(), images[i]->val.end(),
              stack_input->val.begin() + static_cast<size_t>(i) * c * hw);
  for (int p = 0; p < hw; ++p)
    stack_input->val[static_cast<size_t>(n) * c * hw + p] = mask.on[p] ? 1.0 : 0.0;

  // lambda_w = L_rec(0, X'): the full-mask mean absolute normalized intensity.
  double abs_sum = 0.0;
  for (int i = 0; i < n; ++i)
    for (int p : masked_px)
      for (int ch = 0; ch < c; ++ch) abs_sum += std::abs(images[i]->val[static_cast<size_t>(ch) * hw + p]);
  const double lambda_w = abs_sum / (static_cast<double>(masked_px.size()) * n * c);
  result.lambda_w = lambda_w;

  // Weak supervision target.
  ad::TensorPtr n_init_t = ad::make_tensor(3, h, w);
  for (int p : masked_px) {
    const Vector3d v = n_init.get(p / w, p % w);
    n_init_t->val[p] = v.x();
    n_init_t->val[static_cast<size_t>(hw) + p] = v.y();
    n_init_t->val[2 * static_cast<size_t>(hw) + p] = v.z();
  }

  Rng init_rng(cfg.seed);
  NetParams params = NetParams::create(n * c + 1, c, cfg, init_rng);
  const std::vector<ad::TensorPtr> all_params = params.all();
  const std::vector<ad::TensorPtr> est_params = params.estimation_branch();
  std::vector<uint8_t> is_estimation(all_params.size(), 0);
  for (size_t i = 0; i < all_params.size(); ++i)
    for (const auto& e : est_params)
      if (e.get() == all_params[i].get()) is_estimation[i] = 1;

  ad::AdamState adam;
  adam.init(all_params);

  FacetOperator op = FacetOperator::build(n_init, albedo_init, mask, cfg.facet_factor);
  NormalMap latest_n_o = n_init;

  const double noise_std = std::sqrt(cfg.injected_noise_var);
  for (int it = 1; it <= cfg.iterations; ++it) {
    if (it > 1 && (it - 1) % cfg.kernel_refresh_period == 0)
      op = FacetOperator::build(latest_n_o, albedo_init, mask, cfg.facet_factor);

    for (const auto& p : all_params) {
      p->ensure_grad();
      p->zero_grad();
    }

    // Noise-injected copies for the reflectance branch only.
    std::vector<ad::TensorPtr> noisy(n);
    if (noise_std > 0) {
      Rng noise_rng(mix_seed(cfg.seed, 2, it));
      for (int i = 0; i < n; ++i) {
        auto t = ad::make_tensor(c, h, w);
        for (size_t k = 0; k < t->size(); ++k)
          t->val[k] = images[i]->val[k] + noise_std * noise_rng.gaussian();
        noisy[i] = t;
      }
    } else {
      noisy = images;
    }

    ad::Tape tape;
    const ForwardHandles fh = forward_pass(tape, params, stack_input, noisy, lights, op, mask);

    const std::vector<int> sampled =
        sample_masked_pixels(mask, cfg.sample_fraction, mix_seed(cfg.seed, 1, it));
    ad::TensorPtr l_rec_sum;
    for (int i = 0; i < n; ++i) {
      ad::TensorPtr diff = tape.add(fh.xtilde[i], tape.scalar_mul(images[i], -1.0));
      ad::TensorPtr li = tape.masked_mean_abs(diff, sampled);
      l_rec_sum = l_rec_sum ? tape.add(l_rec_sum, li) : li;
    }
    ad::TensorPtr l_rec = tape.scalar_mul(l_rec_sum, 1.0 / n);

    ad::TensorPtr d = tape.add(fh.n_ny, tape.scalar_mul(n_init_t, -1.0));
    ad::TensorPtr l_weak = tape.scalar_mul(tape.masked_mean_abs(tape.hadamard(d, d), masked_px), 3.0);

    const double lam = it <= cfg.weak_cutoff ? lambda_w : 0.0;
    ad::TensorPtr total = tape.add(l_rec, tape.scalar_mul(l_weak, lam));
    require(std::isfinite(total->val[0]),
            "non-finite loss at iteration " + std::to_string(it));

    tape.backward(total);

    const bool dropped = it > cfg.lr_drop_iteration;
    const double lr_base = cfg.lr * (dropped ? cfg.lr_drop_factor : 1.0);
    const double lr_est = cfg.lr_estimation * (dropped ? cfg.lr_drop_factor : 1.0);
    std::vector<double> lr(all_params.size());
    for (size_t k = 0; k < all_params.size(); ++k) lr[k] = is_estimation[k] ? lr_est : lr_base;
    ad::adam_step(all_params, lr, adam);

    latest_n_o = extract_normal_map(fh.n_o, mask);

    IterationRecord rec;
    rec.iteration = it;
    rec.lr = lr_base;
    rec.lr_estimation = lr_est;
    rec.lambda_w = lam;
    rec.l_rec = l_rec->val[0];
    rec.l_weak = l_weak->val[0];
    if (gt_normals) rec.mae = mean_angular_error(extract_normal_map(fh.n_ny, mask), *gt_normals, mask);
    result.trace.push_back(rec);
  }

  // Final noise-free pass for the reported maps.
  {
    ad::Tape tape;
    const ForwardHandles fh = forward_pass(tape, params, stack_input, images, lights, op, mask);
    result.n_o = extract_normal_map(fh.n_o, mask);
    result.n_ny = extract_normal_map(fh.n_ny, mask);
    result.reflectance.resize(n);
    for (int i = 0; i < n; ++i) {
      result.reflectance[i].assign(static_cast<size_t>(hw) * c, 0.0);
      for (int p : masked_px)
        for (int ch = 0; ch < c; ++ch)
          result.reflectance[i][static_cast<size_t>(p) * c + ch] =
              fh.psi[i]->val[static_cast<size_t>(ch) * hw + p];
    }
  }
  const GradientResult gr = normals_to_gradients(result.n_ny);
  result.depth = integrate_depth(gr.field, mask);
  return result;
}

void write_loss_trace(const std::string& path, const FitResult& result) {
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), "cannot write loss trace: " + path);
  f << "iteration,lr,lr_estimation,lambda_w,l_rec,l_weak,mae\n";
  f.precision(12);
  for (const auto& r : result.trace) {
    f << r.iteration << "," << r.lr << "," << r.lr_estimation << "," << r.lambda_w << ","
      << r.l_rec << "," << r.l_weak << "," << r.mae << "\n";
  }
}

}  // namespace ps
