#include "ps/forwardsim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "ps/geometry.hpp"
#include "ps/interreflection.hpp"

namespace ps {

Primitive primitive_from_name(const std::string& name) {
  if (name == "sphere") return Primitive::Sphere;
  if (name == "concave-bowl") return Primitive::ConcaveBowl;
  if (name == "vase-of-revolution") return Primitive::VaseOfRevolution;
  if (name == "plane-with-relief") return Primitive::PlaneWithRelief;
  throw Error("unknown primitive: " + name);
}

std::string primitive_name(Primitive p) {
  switch (p) {
    case Primitive::Sphere: return "sphere";
    case Primitive::ConcaveBowl: return "concave-bowl";
    case Primitive::VaseOfRevolution: return "vase-of-revolution";
    case Primitive::PlaneWithRelief: return "plane-with-relief";
  }
  throw Error("unknown primitive enum value");
}

LightSet SceneSpec::lights() const {
  LightSet ls;
  ls.directions = light_dirs;
  ls.intensities = light_intensities;
  return ls;
}

void SceneSpec::validate() const {
  require(resolution >= 16, "resolution must be >= 16");
  require(albedo >= 0.0 && albedo < 1.0, "albedo must lie in [0, 1)");
  require(specular >= 0.0, "specular weight must be >= 0");
  require(shininess >= 1.0, "shininess must be >= 1");
  require(noise_sigma >= 0.0, "noise sigma must be >= 0");
  require(!light_dirs.empty(), "scene has no lights");
  lights().validate();
  for (const auto& l : light_dirs) require(l.z() >= 0.0, "light source behind object plane");
  if (primitive == Primitive::Sphere) require(cap > 0.0 && cap <= 0.999, "cap must be in (0, 1)");
  if (primitive == Primitive::VaseOfRevolution && !profile.empty())
    require(profile.size() >= 2, "vase profile needs at least 2 control radii");
}

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<double> parse_doubles(const std::string& s) {
  std::istringstream ss(s);
  std::vector<double> vals;
  double v;
  while (ss >> v) vals.push_back(v);
  return vals;
}

// count : elevation_deg : intensity ring of lights, plus an optional zenith.
void add_light_ring(SceneSpec& spec, const std::string& value) {
  const auto vals = parse_doubles(value);
  require(vals.size() == 3, "light_ring needs: count elevation_deg intensity");
  const int count = static_cast<int>(vals[0]);
  require(count >= 1, "light_ring count must be >= 1");
  const double el = rad_from_deg(vals[1]);
  for (int i = 0; i < count; ++i) {
    const double az = 2.0 * kPi * i / count;
    spec.light_dirs.emplace_back(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az),
                                 std::sin(el));
    spec.light_intensities.push_back(vals[2]);
  }
}

}  // namespace

SceneSpec parse_scene_config(const std::string& text) {
  SceneSpec spec;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "bad config line " + std::to_string(line_no) + ": " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "primitive") spec.primitive = primitive_from_name(value);
      else if (key == "resolution") spec.resolution = std::stoi(value);
      else if (key == "radius") spec.radius = std::stod(value);
      else if (key == "depth") spec.depth = std::stod(value);
      else if (key == "cap") spec.cap = std::stod(value);
      else if (key == "profile") spec.profile = parse_doubles(value);
      else if (key == "relief_amplitude") spec.relief_amplitude = std::stod(value);
      else if (key == "relief_frequency") spec.relief_frequency = std::stod(value);
      else if (key == "slope_x") spec.slope_x = std::stod(value);
      else if (key == "slope_y") spec.slope_y = std::stod(value);
      else if (key == "albedo") spec.albedo = std::stod(value);
      else if (key == "specular") spec.specular = std::stod(value);
      else if (key == "shininess") spec.shininess = std::stod(value);
      else if (key == "noise_sigma") spec.noise_sigma = std::stod(value);
      else if (key == "interreflection") {
        require(value == "on" || value == "off", "interreflection must be on or off");
        spec.interreflection = value == "on";
      } else if (key == "seed") spec.seed = std::stoull(value);
      else if (key == "light") {
        const auto vals = parse_doubles(value);
        require(vals.size() == 4, "light needs: x y z intensity");
        Vector3d d(vals[0], vals[1], vals[2]);
        require(d.norm() > 1e-12, "zero-length light direction");
        spec.light_dirs.push_back(d.normalized());
        spec.light_intensities.push_back(vals[3]);
      } else if (key == "light_ring") add_light_ring(spec, value);
      else if (key == "light_zenith") {
        const auto vals = parse_doubles(value);
        require(vals.size() == 1, "light_zenith needs: intensity");
        spec.light_dirs.emplace_back(0.0, 0.0, 1.0);
        spec.light_intensities.push_back(vals[0]);
      } else throw Error("unknown config key: " + key);
    } catch (const std::invalid_argument&) {
      throw Error("bad value for " + key + " on line " + std::to_string(line_no));
    } catch (const std::out_of_range&) {
      throw Error("bad value for " + key + " on line " + std::to_string(line_no));
    }
  }
  spec.validate();
  return spec;
}

SceneSpec load_scene_config(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "cannot open scene config: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_scene_config(ss.str());
}

std::string serialize_scene_config(const SceneSpec& spec) {
  std::ostringstream out;
  out.precision(17);
  out << "primitive = " << primitive_name(spec.primitive) << "\n";
  out << "resolution = " << spec.resolution << "\n";
  if (spec.radius > 0) out << "radius = " << spec.radius << "\n";
  if (spec.depth > 0) out << "depth = " << spec.depth << "\n";
  out << "cap = " << spec.cap << "\n";
  if (!spec.profile.empty()) {
    out << "profile =";
    for (double v : spec.profile) out << " " << v;
    out << "\n";
  }
  out << "relief_amplitude = " << spec.relief_amplitude << "\n";
  out << "relief_frequency = " << spec.relief_frequency << "\n";
  out << "slope_x = " << spec.slope_x << "\n";
  out << "slope_y = " << spec.slope_y << "\n";
  out << "albedo = " << spec.albedo << "\n";
  out << "specular = " << spec.specular << "\n";
  out << "shininess = " << spec.shininess << "\n";
  out << "noise_sigma = " << spec.noise_sigma << "\n";
  out << "interreflection = " << (spec.interreflection ? "on" : "off") << "\n";
  out << "seed = " << spec.seed << "\n";
  for (size_t i = 0; i < spec.light_dirs.size(); ++i) {
    const auto& d = spec.light_dirs[i];
    out << "light = " << d.x() << " " << d.y() << " " << d.z() << " "
        << spec.light_intensities[i] << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Scene geometry
// ---------------------------------------------------------------------------

namespace {

// Centripetal Catmull-Rom through the control radii, clamped at the ends.
double catmull_rom(const std::vector<double>& pts, double t) {
  const int n = static_cast<int>(pts.size());
  if (n == 1) return pts[0];
  const double u = std::clamp(t, 0.0, 1.0) * (n - 1);
  const int i1 = std::min(static_cast<int>(u), n - 2);
  const double s = u - i1;
  const int i0 = std::max(i1 - 1, 0);
  const int i2 = i1 + 1;
  const int i3 = std::min(i1 + 2, n - 1);
  const double p0 = pts[i0], p1 = pts[i1], p2 = pts[i2], p3 = pts[i3];
  const double m1 = 0.5 * (p2 - p0);
  const double m2 = 0.5 * (p3 - p1);
  const double s2 = s * s, s3 = s2 * s;
  return (2 * s3 - 3 * s2 + 1) * p1 + (s3 - 2 * s2 + s) * m1 + (-2 * s3 + 3 * s2) * p2 +
         (s3 - s2) * m2;
}

double catmull_rom_deriv(const std::vector<double>& pts, double t) {
  const double eps = 1e-5;
  const double lo = std::max(0.0, t - eps);
  const double hi = std::min(1.0, t + eps);
  return (catmull_rom(pts, hi) - catmull_rom(pts, lo)) / (hi - lo);
}

}  // namespace

Scene make_scene(const SceneSpec& spec) {
  spec.validate();
  const int res = spec.resolution;
  Scene sc;
  sc.depth = DepthMap(res, res);
  sc.normals = NormalMap(res, res);
  sc.mask = Mask(res, res);

  const double cx = (res - 1) / 2.0;
  const double cy = (res - 1) / 2.0;  // in y-up world coordinates
  const double radius = spec.radius > 0 ? spec.radius : 0.42 * res;

  for (int r = 0; r < res; ++r) {
    for (int c = 0; c < res; ++c) {
      const double x = c - cx;
      const double y = pixel_y(res, r) - cy;
      double z = 0.0;
      Vector3d n(0, 0, 1);
      bool inside = false;
      switch (spec.primitive) {
        case Primitive::Sphere: {
          const double rr = x * x + y * y;
          const double cap_r = spec.cap * radius;
          if (rr <= cap_r * cap_r) {
            inside = true;
            z = std::sqrt(radius * radius - rr);
            n = Vector3d(x / radius, y / radius, z / radius);
          }
          break;
        }
        case Primitive::ConcaveBowl: {
          const double d = spec.depth > 0 ? spec.depth : 0.5 * radius;
          const double rr = x * x + y * y;
          if (rr <= radius * radius) {
            inside = true;
            z = -d * (1.0 - rr / (radius * radius));
            const double px = 2.0 * d * x / (radius * radius);
            const double py = 2.0 * d * y / (radius * radius);
            n = Vector3d(-px, -py, 1.0).normalized();
          }
          break;
        }
        case Primitive::VaseOfRevolution: {
          std::vector<double> prof = spec.profile;
          if (prof.empty()) prof = {0.55, 0.72, 0.60, 0.34, 0.26, 0.42, 0.50};
          const double y0 = 0.06 * res, y1 = 0.94 * res;
          const double yy = pixel_y(res, r);
          if (yy < y0 || yy > y1) break;
          const double t = (yy - y0) / (y1 - y0);
          const double rad = catmull_rom(prof, t) * (res / 2.0) * 0.9;
          const double drad_dt = catmull_rom_deriv(prof, t) * (res / 2.0) * 0.9;
          const double drad_dy = drad_dt / (y1 - y0);
          if (rad <= 1.0 || std::abs(x) > 0.985 * rad) break;
          inside = true;
          z = std::sqrt(rad * rad - x * x);
          n = Vector3d(x, -rad * drad_dy, z).normalized();
          break;
        }
        case Primitive::PlaneWithRelief: {
          inside = true;
          const double ax = 2.0 * kPi * spec.relief_frequency / res;
          z = spec.relief_amplitude * std::sin(ax * x) * std::sin(ax * y) + spec.slope_x * x +
              spec.slope_y * y;
          const double px = spec.relief_amplitude * ax * std::cos(ax * x) * std::sin(ax * y) +
                            spec.slope_x;
          const double py = spec.relief_amplitude * ax * std::sin(ax * x) * std::cos(ax * y) +
                            spec.slope_y;
          n = Vector3d(-px, -py, 1.0).normalized();
          break;
        }
      }
      if (inside) {
        sc.mask.set(r, c, true);
        sc.depth.at(r, c) = z;
        sc.normals.set(r, c, n);
      }
    }
  }
  require(sc.mask.count() >= 16, "degenerate scene profile: empty mask");
  sc.depth.mask = sc.mask;
  sc.normals.mask = sc.mask;
  sc.albedo = AlbedoMap(res, res, 1);
  sc.max_depth = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < res; ++r)
    for (int c = 0; c < res; ++c)
      if (sc.mask.at(r, c)) {
        sc.albedo.at(r, c, 0) = spec.albedo;
        sc.max_depth = std::max(sc.max_depth, sc.depth.at(r, c));
      }
  return sc;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace {

// Bilinear depth lookup restricted to fully masked stencils.
bool depth_at(const Scene& sc, double row, double col, double* out) {
  const int r0 = static_cast<int>(std::floor(row));
  const int c0 = static_cast<int>(std::floor(col));
  if (r0 < 0 || r0 + 1 >= sc.mask.h || c0 < 0 || c0 + 1 >= sc.mask.w) return false;
  if (!sc.mask.at(r0, c0) || !sc.mask.at(r0, c0 + 1) || !sc.mask.at(r0 + 1, c0) ||
      !sc.mask.at(r0 + 1, c0 + 1))
    return false;
  const double fr = row - r0, fc = col - c0;
  *out = (1 - fr) * ((1 - fc) * sc.depth.at(r0, c0) + fc * sc.depth.at(r0, c0 + 1)) +
         fr * ((1 - fc) * sc.depth.at(r0 + 1, c0) + fc * sc.depth.at(r0 + 1, c0 + 1));
  return true;
}

}  // namespace

bool cast_shadowed(const Scene& sc, int row, int col, const Vector3d& l) {
  if (l.x() == 0.0 && l.y() == 0.0) return false;
  const double step_xy = 0.5;
  const double lxy = std::hypot(l.x(), l.y());
  const double max_depth = sc.max_depth;
  const double z0 = sc.depth.at(row, col);
  // March in (row, col): y up means d(row)/dt = -l_y.
  const double dir_r = -l.y() / lxy;
  const double dir_c = l.x() / lxy;
  const double dz = l.z() / lxy;  // depth gain per unit xy distance
  const double eps = 1e-3;
  const double diag = std::hypot(sc.mask.h, sc.mask.w);
  for (double t = 0.75; t < diag; t += step_xy) {
    const double rz = z0 + t * dz;
    if (rz > max_depth + eps) return false;
    const double rr = row + t * dir_r;
    const double cc = col + t * dir_c;
    if (rr < -1 || rr > sc.mask.h || cc < -1 || cc > sc.mask.w) return false;
    double surf;
    if (!depth_at(sc, rr, cc, &surf)) continue;
    if (surf > rz + eps) return true;
  }
  return false;
}

ImageStack render_scene(const Scene& scene, const SceneSpec& spec) {
  spec.validate();
  const LightSet lights = spec.lights();
  const int n = lights.count();
  const int h = scene.mask.h, w = scene.mask.w;

  ImageStack stack(n, h, w, 1);
  stack.mask = scene.mask;

  // Direct Lambertian term with attached and cast shadows.
  std::vector<std::vector<uint8_t>> shadowed(n);
  for (int i = 0; i < n; ++i) {
    shadowed[i].assign(static_cast<size_t>(h) * w, 0);
    const Vector3d& l = lights.directions[i];
    const double e = lights.intensities[i];
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        if (!scene.mask.at(r, c)) continue;
        const Vector3d nrm = scene.normals.get(r, c);
        const double za = std::max(nrm.dot(l), 0.0);
        if (za <= 0.0) continue;
        if (cast_shadowed(scene, r, c, l)) {
          shadowed[i][static_cast<size_t>(r) * w + c] = 1;
          continue;
        }
        stack.at(i, r, c, 0) = e * scene.albedo.at(r, c, 0) * za;
      }
    }
  }

  // Diffuse interreflection at facet resolution, upsampled and added to the
  // direct term.
  if (spec.interreflection) {
    const FacetSet fs =
        build_facets_from_maps(scene.normals, scene.albedo, scene.depth, scene.mask, 4);
    if (fs.count >= 2) {
      const InterreflectionKernel kern = interreflection_kernel(fs);
      const Eigen::VectorXd p_diag =
          Eigen::Map<const Eigen::VectorXd>(fs.albedo.data(), fs.count) / kPi;
      Eigen::MatrixXd xs(fs.count, n);
      for (int f = 0; f < fs.count; ++f) {
        for (int i = 0; i < n; ++i) {
          double s = 0.0;
          for (int px : fs.pixels_of_facet[f]) s += stack.at(i, px / w, px % w, 0);
          xs(f, i) = s / static_cast<double>(fs.pixels_of_facet[f].size());
        }
      }
      const Eigen::MatrixXd x_total = forward_interreflect(xs, p_diag, kern.K);
      const Eigen::MatrixXd correction = (x_total - xs).cwiseMax(0.0);
      for (int i = 0; i < n; ++i) {
        const std::vector<double> up = fs.upsample_scalars(correction.col(i));
        for (size_t k = 0; k < fs.masked_pixels.size(); ++k) {
          const int px = fs.masked_pixels[k];
          stack.at(i, px / w, px % w, 0) += std::max(up[k], 0.0);
        }
      }
    }
  }

  // Phong specular lobe, kept out of the interreflection exchange.
  if (spec.specular > 0.0) {
    const Vector3d v = view_dir();
    for (int i = 0; i < n; ++i) {
      const Vector3d& l = lights.directions[i];
      const double e = lights.intensities[i];
      for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
          if (!scene.mask.at(r, c)) continue;
          if (shadowed[i][static_cast<size_t>(r) * w + c]) continue;
          const Vector3d nrm = scene.normals.get(r, c);
          const Vector3d refl = 2.0 * nrm.dot(l) * nrm - l;
          const double rv = std::max(refl.dot(v), 0.0);
          if (rv <= 0.0) continue;
          stack.at(i, r, c, 0) += e * spec.specular * std::pow(rv, spec.shininess);
        }
      }
    }
  }
  return stack;
}

ImageStack add_noise(const ImageStack& stack, double sigma, uint64_t seed) {
  require(sigma >= 0.0, "noise sigma must be >= 0");
  if (sigma == 0.0) return stack;
  ImageStack out = stack;
  Rng rng(seed);
  for (double& v : out.data) v = std::max(0.0, v + sigma * rng.gaussian());
  return out;
}

}  // namespace ps
