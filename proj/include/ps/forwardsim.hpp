#pragma once

#include <string>
#include <vector>

#include "ps/core.hpp"

namespace ps {

enum class Primitive { Sphere, ConcaveBowl, VaseOfRevolution, PlaneWithRelief };

Primitive primitive_from_name(const std::string& name);
std::string primitive_name(Primitive p);

/// Synthetic scene description; serializable as plain-text key = value.
struct SceneSpec {
  Primitive primitive = Primitive::Sphere;
  int resolution = 64;

  // Shape parameters; nonpositive values pick resolution-scaled defaults.
  double radius = -1.0;   // sphere/bowl/vase base radius in pixels
  double depth = -1.0;    // bowl depth in pixels
  double cap = 0.9;       // sphere: masked fraction of the silhouette radius
  std::vector<double> profile;  // vase radii as fractions of resolution/2
  double relief_amplitude = 2.0;
  double relief_frequency = 2.0;
  double slope_x = 0.0, slope_y = 0.0;

  double albedo = 0.7;       // rho_d in [0, 1)
  double specular = 0.0;     // k_s >= 0
  double shininess = 32.0;   // Phong exponent alpha >= 1
  double noise_sigma = 0.0;
  bool interreflection = true;
  uint64_t seed = 1;

  std::vector<Vector3d> light_dirs;
  std::vector<double> light_intensities;

  LightSet lights() const;
  void validate() const;
};

SceneSpec parse_scene_config(const std::string& text);
SceneSpec load_scene_config(const std::string& path);
std::string serialize_scene_config(const SceneSpec& spec);

/// Analytic heightfield sampled at pixel centers; normals from analytic
/// gradients, not finite differences.
struct Scene {
  DepthMap depth;
  NormalMap normals;
  Mask mask;
  AlbedoMap albedo;
  double max_depth = 0.0;  // over the mask; bounds the shadow march
};

Scene make_scene(const SceneSpec& spec);

/// Renders the stack: Lambertian direct term with attached and ray-marched
/// cast shadows, facet-level interreflection added as a correction, and a
/// Phong specular term (excluded from the interreflection exchange).
ImageStack render_scene(const Scene& scene, const SceneSpec& spec);

/// Adds i.i.d. zero-mean Gaussian noise clamped at 0; deterministic per seed.
ImageStack add_noise(const ImageStack& stack, double sigma, uint64_t seed);

/// True when the ray from the surface point at (row, col) toward light l is
/// blocked by the heightfield (bilinear interpolation, half-pixel steps).
bool cast_shadowed(const Scene& scene, int row, int col, const Vector3d& l);

}  // namespace ps
