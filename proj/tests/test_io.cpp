#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ps/io.hpp"

using namespace ps;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("pstereo_io_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("float map round trip is bit identical") {
  const fs::path dir = temp_dir("fmap");
  Rng rng(3);
  FloatMap fm(8, 8, 3);
  for (auto& v : fm.data) v = static_cast<float>(rng.uniform(-5, 5));
  write_float_map(dir / "a.fmap", fm);
  const FloatMap back = read_float_map(dir / "a.fmap");
  REQUIRE(back.h == 8);
  REQUIRE(back.w == 8);
  REQUIRE(back.k == 3);
  for (size_t i = 0; i < fm.data.size(); ++i) CHECK(back.data[i] == fm.data[i]);
}

TEST_CASE("k = 1 depth map round trip") {
  const fs::path dir = temp_dir("fmap1");
  FloatMap fm(4, 6, 1);
  for (size_t i = 0; i < fm.data.size(); ++i) fm.data[i] = static_cast<float>(i) * 0.25f - 2.0f;
  write_float_map(dir / "d.fmap", fm);
  const FloatMap back = read_float_map(dir / "d.fmap");
  CHECK(back.k == 1);
  CHECK(back.data == fm.data);
}

TEST_CASE("NaN values are rejected on write") {
  const fs::path dir = temp_dir("fmapnan");
  FloatMap fm(2, 2, 1);
  fm.data[1] = std::nanf("");
  CHECK_THROWS_AS(write_float_map(dir / "bad.fmap", fm), Error);
}

TEST_CASE("corrupt float map header is rejected") {
  const fs::path dir = temp_dir("fmapbad");
  {
    std::ofstream f(dir / "junk.fmap", std::ios::binary);
    f << "NOTAMAP0123456789";
  }
  CHECK_THROWS_AS(read_float_map(dir / "junk.fmap"), Error);
  {
    std::ofstream f(dir / "trunc.fmap", std::ios::binary);
    f << "FMAP0001";
  }
  CHECK_THROWS_AS(read_float_map(dir / "trunc.fmap"), Error);
}

TEST_CASE("PNG round trips at both bit depths") {
  const fs::path dir = temp_dir("png");
  for (const int depth : {8, 16}) {
    for (const int channels : {1, 3}) {
      RasterImage img;
      img.h = 5;
      img.w = 7;
      img.c = channels;
      img.bit_depth = depth;
      img.px.resize(static_cast<size_t>(img.h) * img.w * img.c);
      const int maxv = depth == 16 ? 65535 : 255;
      for (size_t i = 0; i < img.px.size(); ++i)
        img.px[i] = static_cast<uint16_t>((i * 7919) % (maxv + 1));
      const fs::path p = dir / ("img_" + std::to_string(depth) + "_" + std::to_string(channels) + ".png");
      write_png(p, img);
      const RasterImage back = read_png(p);
      REQUIRE(back.h == img.h);
      REQUIRE(back.w == img.w);
      REQUIRE(back.c == img.c);
      REQUIRE(back.bit_depth == img.bit_depth);
      CHECK(back.px == img.px);
    }
  }
}

TEST_CASE("dataset writes and reads back with lights and ground truth") {
  const fs::path dir = temp_dir("dataset");
  const int n = 4, h = 4, w = 4;
  ImageStack stack(n, h, w, 1);
  stack.mask = Mask(h, w, true);
  Rng rng(5);
  for (auto& v : stack.data) v = rng.uniform(0, 2);

  LightSet lights;
  for (int i = 0; i < n; ++i) {
    lights.directions.push_back(Vector3d(0.1 * i, 0.2, 1).normalized());
    lights.intensities.push_back(0.5 + 0.25 * i);
  }
  NormalMap gt(h, w);
  gt.mask = stack.mask;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) gt.set(r, c, Vector3d(0.1, -0.2, 1).normalized());

  write_dataset(dir, stack, lights, &gt);

  const auto desc = DatasetDescriptor::discover(dir);
  CHECK(desc.image_files.size() == 4);
  CHECK(desc.light_directions_file.has_value());
  CHECK(desc.normal_gt_file.has_value());

  const Dataset ds = read_dataset(desc);
  CHECK(ds.stack.n == n);
  CHECK(ds.stack.mask.count() == 16);  // all-true 4x4 mask
  REQUIRE(ds.lights.has_value());
  for (int i = 0; i < n; ++i) {
    CHECK(ds.lights->directions[i].isApprox(lights.directions[i], 1e-12));
    CHECK(ds.lights->intensities[i] == doctest::Approx(lights.intensities[i]));
  }
  REQUIRE(ds.gt_normals.has_value());
  CHECK(mean_angular_error(*ds.gt_normals, gt, stack.mask) < 1e-3);
  // float-map images survive exactly up to the float32 narrowing
  for (int i = 0; i < n; ++i)
    CHECK(ds.stack.at(i, 1, 2, 0) ==
          doctest::Approx(stack.at(i, 1, 2, 0)).epsilon(1e-6));
}

TEST_CASE("dataset without light files reports absent lights") {
  const fs::path dir = temp_dir("nolights");
  ImageStack stack(2, 4, 4, 1);
  stack.mask = Mask(4, 4, true);
  LightSet lights;
  lights.directions = {Vector3d(0, 0, 1), Vector3d(0, 0, 1)};
  lights.intensities = {1.0, 1.0};
  write_dataset(dir, stack, lights, nullptr);
  fs::remove(dir / "light_directions.txt");
  fs::remove(dir / "light_intensities.txt");
  const Dataset ds = read_dataset(DatasetDescriptor::discover(dir));
  CHECK(!ds.lights.has_value());
  CHECK(!ds.gt_normals.has_value());
}

TEST_CASE("light directions are renormalized and bad rows rejected") {
  const fs::path dir = temp_dir("lights");
  ImageStack stack(2, 4, 4, 1);
  stack.mask = Mask(4, 4, true);
  LightSet lights;
  lights.directions = {Vector3d(0, 0, 1), Vector3d(0, 0, 1)};
  lights.intensities = {1.0, 1.0};
  write_dataset(dir, stack, lights, nullptr);
  {
    std::ofstream f(dir / "light_directions.txt", std::ios::trunc);
    f << "0 0 2\n0.5 0.5 0.5\n";  // non-unit rows must be renormalized
  }
  const Dataset ds = read_dataset(DatasetDescriptor::discover(dir));
  REQUIRE(ds.lights.has_value());
  CHECK(ds.lights->directions[0].norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ds.lights->directions[1].norm() == doctest::Approx(1.0).epsilon(1e-12));

  {
    std::ofstream f(dir / "light_directions.txt", std::ios::trunc);
    f << "0 0 0\n0 0 1\n";  // zero-length row
  }
  CHECK_THROWS_AS(read_dataset(DatasetDescriptor::discover(dir)), Error);
}

TEST_CASE("per-channel intensity triples average to a scalar") {
  const fs::path dir = temp_dir("triples");
  ImageStack stack(1, 4, 4, 1);
  stack.mask = Mask(4, 4, true);
  LightSet lights;
  lights.directions = {Vector3d(0, 0, 1)};
  lights.intensities = {1.0};
  write_dataset(dir, stack, lights, nullptr);
  {
    std::ofstream f(dir / "light_intensities.txt", std::ios::trunc);
    f << "1.0 2.0 3.0\n";
  }
  const Dataset ds = read_dataset(DatasetDescriptor::discover(dir));
  CHECK(ds.lights->intensities[0] == doctest::Approx(2.0));
}

TEST_CASE("16-bit PNG datasets decode to [0,1] with the right scale") {
  const fs::path dir = temp_dir("png16");
  ImageStack stack(2, 4, 4, 1);
  stack.mask = Mask(4, 4, true);
  for (auto& v : stack.data) v = 0.25;
  LightSet lights;
  lights.directions = {Vector3d(0, 0, 1), Vector3d(0, 0, 1)};
  lights.intensities = {1.0, 1.0};
  write_dataset(dir, stack, lights, nullptr, /*png16=*/true);
  const Dataset ds = read_dataset(DatasetDescriptor::discover(dir));
  CHECK(ds.stack.at(0, 0, 0, 0) == doctest::Approx(0.25).epsilon(1e-4));
}

TEST_CASE("mismatched image dimensions are a distinct error") {
  const fs::path dir = temp_dir("mismatch");
  ImageStack stack(2, 4, 4, 1);
  stack.mask = Mask(4, 4, true);
  LightSet lights;
  lights.directions = {Vector3d(0, 0, 1), Vector3d(0, 0, 1)};
  lights.intensities = {1.0, 1.0};
  write_dataset(dir, stack, lights, nullptr);
  FloatMap wrong(5, 5, 1);
  write_float_map(dir / "002.fmap", wrong);
  bool threw = false;
  try {
    read_dataset(DatasetDescriptor::discover(dir));
  } catch (const Error& e) {
    threw = true;
    CHECK(std::string(e.what()).find("dimension mismatch") != std::string::npos);
  }
  CHECK(threw);
}
