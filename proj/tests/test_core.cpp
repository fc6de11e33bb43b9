#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Geometry>

#include "ps/core.hpp"

using namespace ps;

namespace {

NormalMap constant_map(int h, int w, const Vector3d& n) {
  NormalMap nm(h, w);
  nm.mask = Mask(h, w, true);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) nm.set(r, c, n.normalized());
  return nm;
}

}  // namespace

TEST_CASE("encode_normals maps the camera-facing normal to (128,128,255)") {
  NormalMap nm = constant_map(1, 2, Vector3d(0, 0, 1));
  nm.mask.set(0, 1, false);
  nm.set(0, 1, Vector3d(0, 0, 0));
  const auto rgb = encode_normals(nm);
  CHECK(rgb[0] == 128);
  CHECK(rgb[1] == 128);
  CHECK(rgb[2] == 255);
  // masked-out pixel stays black
  CHECK(rgb[3] == 0);
  CHECK(rgb[4] == 0);
  CHECK(rgb[5] == 0);
}

TEST_CASE("encode_normals axis case") {
  const auto rgb = encode_normals(constant_map(1, 1, Vector3d(1, 0, 0)));
  CHECK(rgb[0] == 255);
  CHECK(rgb[1] == 128);
  CHECK(rgb[2] == 128);
}

TEST_CASE("encode/decode round trip stays within quantization error") {
  Rng rng(7);
  NormalMap nm(6, 5);
  nm.mask = Mask(6, 5, true);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 5; ++c) {
      Vector3d n(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.05, 1));
      nm.set(r, c, n.normalized());
    }
  const NormalMap back = decode_normals(encode_normals(nm), nm.mask);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 5; ++c)
      for (int k = 0; k < 3; ++k)
        CHECK(std::abs(back.get(r, c)[k] - nm.get(r, c)[k]) <= 2.0 / 255.0);
}

TEST_CASE("mean_angular_error basics") {
  const NormalMap a = constant_map(4, 4, Vector3d(0, 0, 1));
  CHECK(mean_angular_error(a, a, a.mask) == doctest::Approx(0.0));

  const NormalMap b = constant_map(4, 4, Vector3d(0, 1, 0));
  CHECK(mean_angular_error(a, b, a.mask) == doctest::Approx(90.0));

  const NormalMap c = constant_map(4, 4, Vector3d(0, std::sin(kPi / 6), std::cos(kPi / 6)));
  CHECK(mean_angular_error(a, c, a.mask) == doctest::Approx(30.0).epsilon(1e-9));
}

TEST_CASE("mean_angular_error rejects an empty mask") {
  const NormalMap a = constant_map(2, 2, Vector3d(0, 0, 1));
  const Mask empty(2, 2, false);
  CHECK_THROWS_WITH_AS(mean_angular_error(a, a, empty), "no evaluable pixels", Error);
}

TEST_CASE("mean_angular_error is symmetric and rotation invariant") {
  Rng rng(11);
  NormalMap a(3, 3), b(3, 3);
  a.mask = Mask(3, 3, true);
  b.mask = a.mask;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      a.set(r, c, Vector3d(rng.gaussian(), rng.gaussian(), rng.uniform(0.2, 1)).normalized());
      b.set(r, c, Vector3d(rng.gaussian(), rng.gaussian(), rng.uniform(0.2, 1)).normalized());
    }
  const double mae = mean_angular_error(a, b, a.mask);
  CHECK(mean_angular_error(b, a, a.mask) == doctest::Approx(mae));

  const Eigen::Matrix3d rot =
      Eigen::AngleAxisd(0.83, Vector3d(1, 2, 3).normalized()).toRotationMatrix();
  NormalMap ar = a, br = b;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      ar.set(r, c, rot * a.get(r, c));
      br.set(r, c, rot * b.get(r, c));
    }
  CHECK(mean_angular_error(ar, br, a.mask) == doctest::Approx(mae).epsilon(1e-12));
}

TEST_CASE("type invariants are enforced") {
  NormalMap nm(2, 2);
  nm.mask = Mask(2, 2, true);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) nm.set(r, c, Vector3d(0, 0, 1));
  CHECK_NOTHROW(nm.validate());
  nm.set(0, 0, Vector3d(0, 0, 2));
  CHECK_THROWS_AS(nm.validate(), Error);

  ImageStack stack(1, 2, 2, 1);
  stack.mask = Mask(2, 2, true);
  CHECK_NOTHROW(stack.validate());
  stack.at(0, 0, 0, 0) = -0.1;
  CHECK_THROWS_AS(stack.validate(), Error);

  LightSet ls;
  ls.directions = {Vector3d(0, 0, 1)};
  ls.intensities = {1.0};
  CHECK_NOTHROW(ls.validate());
  ls.intensities[0] = 0.0;
  CHECK_THROWS_AS(ls.validate(), Error);
  ls.intensities[0] = 1.0;
  ls.directions[0] = Vector3d(0, 0, 1.01);
  CHECK_THROWS_AS(ls.validate(), Error);
}
