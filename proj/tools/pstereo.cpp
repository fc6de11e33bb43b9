// Batch front end for the photometric-stereo pipeline.
//
//   pstereo render    --scene cfg --out dir [--noise s] [--seed n] [--png16]
//   pstereo calibrate --images dir --sphere cx,cy,r --out dir
//   pstereo solve     --images dir --method woodham|robust|nayar|irnet --out dir [--config cfg]
//   pstereo eval      --est a.fmap --gt b.fmap --mask m.png
//
// Exit codes: 0 ok, 2 usage/config error, 3 calibration failure, 4 solver failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "ps/classic.hpp"
#include "ps/forwardsim.hpp"
#include "ps/interreflection.hpp"
#include "ps/io.hpp"
#include "ps/irnet.hpp"
#include "ps/robustinit.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitCalibration = 3;
constexpr int kExitSolver = 4;

void apply_thread_cap() {
#ifdef _OPENMP
  if (const char* env = std::getenv("PSTEREO_THREADS")) {
    const int t = std::atoi(env);
    if (t >= 1) omp_set_num_threads(t);
  }
#endif
}

int cmd_render(const std::string& scene_path, const std::string& out_dir, double noise_override,
               long seed_override, bool png16) {
  ps::SceneSpec spec;
  try {
    spec = ps::load_scene_config(scene_path);
    if (noise_override >= 0) spec.noise_sigma = noise_override;
    if (seed_override >= 0) spec.seed = static_cast<uint64_t>(seed_override);
    spec.validate();
  } catch (const ps::Error& e) {
    std::cerr << "render: config error: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    const ps::Scene scene = ps::make_scene(spec);
    ps::ImageStack stack = ps::render_scene(scene, spec);
    if (spec.noise_sigma > 0) stack = ps::add_noise(stack, spec.noise_sigma, spec.seed);
    ps::write_dataset(out_dir, stack, spec.lights(), &scene.normals, png16);
    ps::write_float_map(fs::path(out_dir) / "depth_gt.fmap", ps::float_map_from_depth(scene.depth));
    std::cout << "wrote " << stack.n << " images to " << out_dir << "\n";
  } catch (const ps::Error& e) {
    std::cerr << "render: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}

int cmd_calibrate(const std::string& images_dir, const std::string& sphere_arg,
                  const std::string& out_dir) {
  ps::SphereGeometry sphere;
  {
    double cx, cy, r;
    if (std::sscanf(sphere_arg.c_str(), "%lf,%lf,%lf", &cx, &cy, &r) != 3) {
      std::cerr << "calibrate: --sphere expects cx,cy,r\n";
      return kExitUsage;
    }
    sphere = {cx, cy, r};
  }
  try {
    const auto desc = ps::DatasetDescriptor::discover(images_dir);
    const ps::Dataset ds = ps::read_dataset(desc);
    const ps::LightSet lights = ps::calibrate_from_sphere(ds.stack, sphere);
    ps::write_light_files(out_dir, lights);
    std::cout << "calibrated " << lights.count() << " lights\n";
  } catch (const ps::CalibrationError& e) {
    std::cerr << "calibrate: " << e.what() << "\n";
    return kExitCalibration;
  } catch (const ps::Error& e) {
    std::cerr << "calibrate: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}

int cmd_solve(const std::string& images_dir, const std::string& method,
              const std::string& out_dir, const std::string& config_path) {
  ps::Dataset ds;
  try {
    ds = ps::read_dataset(ps::DatasetDescriptor::discover(images_dir));
  } catch (const ps::Error& e) {
    std::cerr << "solve: dataset error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (!ds.lights) {
    std::cerr << "solve: dataset has no light files; run `pstereo calibrate` first\n";
    return kExitSolver;
  }
  ps::FitConfig cfg;
  if (!config_path.empty()) {
    try {
      cfg = ps::load_fit_config(config_path);
    } catch (const ps::Error& e) {
      std::cerr << "solve: config error: " << e.what() << "\n";
      return kExitUsage;
    }
  }

  const fs::path out(out_dir);
  std::string stage = method;
  try {
    fs::create_directories(out);
    ps::NormalMap normals;
    bool have_depth = false;
    ps::DepthMap depth;

    if (method == "woodham") {
      normals = ps::woodham_solve(ds.stack, *ds.lights).normals;
    } else if (method == "robust") {
      normals = ps::robust_initialize(ds.stack, *ds.lights).normals;
    } else if (method == "nayar") {
      const ps::NayarResult res = ps::nayar_iterate(ds.stack, *ds.lights);
      normals = res.normals;
      depth = res.depth;
      have_depth = true;
    } else if (method == "irnet") {
      stage = "robust initialization";
      const ps::RobustInitResult init = ps::robust_initialize(ds.stack, *ds.lights);
      stage = "inverse rendering";
      const ps::NormalMap* gt = ds.gt_normals ? &*ds.gt_normals : nullptr;
      const ps::FitResult res =
          ps::fit(ds.stack, *ds.lights, init.normals, init.albedo, cfg, gt);
      normals = res.n_ny;
      depth = res.depth;
      have_depth = true;
      for (size_t i = 0; i < res.reflectance.size(); ++i) {
        ps::FloatMap fm(ds.stack.h, ds.stack.w, ds.stack.c);
        for (size_t k = 0; k < res.reflectance[i].size(); ++k)
          fm.data[k] = static_cast<float>(res.reflectance[i][k]);
        char name[40];
        std::snprintf(name, sizeof(name), "reflectance_%03zu.fmap", i + 1);
        ps::write_float_map(out / name, fm);
      }
      ps::write_loss_trace((out / "loss_trace.csv").string(), res);
    } else {
      std::cerr << "solve: unknown method " << method << "\n";
      return kExitUsage;
    }

    ps::write_float_map(out / "normal_est.fmap", ps::float_map_from_normals(normals));
    {
      const std::vector<uint8_t> rgb = ps::encode_normals(normals);
      ps::RasterImage img;
      img.h = normals.h;
      img.w = normals.w;
      img.c = 3;
      img.bit_depth = 8;
      img.px.assign(rgb.begin(), rgb.end());
      ps::write_png(out / "normal_est.png", img);
    }
    if (have_depth) ps::write_float_map(out / "depth.fmap", ps::float_map_from_depth(depth));
    if (ds.gt_normals)
      std::cout << "MAE vs ground truth: "
                << ps::mean_angular_error(normals, *ds.gt_normals, ds.stack.mask) << " deg\n";
  } catch (const ps::Error& e) {
    std::cerr << "solve: failure in stage `" << stage << "`: " << e.what() << "\n";
    return kExitSolver;
  }
  return kExitOk;
}

int cmd_eval(const std::string& est_path, const std::string& gt_path,
             const std::string& mask_path) {
  try {
    const ps::Mask mask = ps::mask_from_png(mask_path);
    const ps::FloatMap est_fm = ps::read_float_map(est_path);
    const ps::FloatMap gt_fm = ps::read_float_map(gt_path);
    if (est_fm.h != gt_fm.h || est_fm.w != gt_fm.w || est_fm.h != mask.h || est_fm.w != mask.w) {
      std::cerr << "eval: shape mismatch between maps and mask\n";
      return kExitUsage;
    }
    const ps::NormalMap est = ps::normals_from_float_map(est_fm, mask);
    const ps::NormalMap gt = ps::normals_from_float_map(gt_fm, mask);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", ps::mean_angular_error(est, gt, mask));
    std::cout << buf << "\n";
  } catch (const ps::Error& e) {
    std::cerr << "eval: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  apply_thread_cap();
  CLI::App app{"photometric stereo toolkit"};
  app.require_subcommand(1);

  auto* render = app.add_subcommand("render", "render a synthetic dataset");
  std::string scene_path, render_out;
  double noise_override = -1.0;
  long seed_override = -1;
  bool png16 = false;
  render->add_option("--scene", scene_path)->required();
  render->add_option("--out", render_out)->required();
  render->add_option("--noise", noise_override);
  render->add_option("--seed", seed_override);
  render->add_flag("--png16", png16);

  auto* calibrate = app.add_subcommand("calibrate", "estimate lights from a calibration sphere");
  std::string cal_images, sphere_arg, cal_out;
  calibrate->add_option("--images", cal_images)->required();
  calibrate->add_option("--sphere", sphere_arg)->required();
  calibrate->add_option("--out", cal_out)->required();

  auto* solve = app.add_subcommand("solve", "recover normals from a dataset");
  std::string solve_images, method, solve_out, config_path;
  solve->add_option("--images", solve_images)->required();
  solve->add_option("--method", method)->required();
  solve->add_option("--out", solve_out)->required();
  solve->add_option("--config", config_path);

  auto* eval = app.add_subcommand("eval", "mean angular error between normal maps");
  std::string est_path, gt_path, mask_path;
  eval->add_option("--est", est_path)->required();
  eval->add_option("--gt", gt_path)->required();
  eval->add_option("--mask", mask_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (render->parsed()) return cmd_render(scene_path, render_out, noise_override, seed_override, png16);
  if (calibrate->parsed()) return cmd_calibrate(cal_images, sphere_arg, cal_out);
  if (solve->parsed()) return cmd_solve(solve_images, method, solve_out, config_path);
  if (eval->parsed()) return cmd_eval(est_path, gt_path, mask_path);
  return kExitUsage;
}
