#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ps/core.hpp"

namespace ps {

/// h x w x k field of 32-bit floats with a self-describing binary header.
/// File layout: 8-byte magic "FMAP0001", three little-endian uint32 (h, w, k),
/// then h*w*k little-endian float32 in row-major order.
struct FloatMap {
  int h = 0, w = 0, k = 0;
  std::vector<float> data;

  FloatMap() = default;
  FloatMap(int h_, int w_, int k_)
      : h(h_), w(w_), k(k_), data(static_cast<size_t>(h_) * w_ * k_, 0.0f) {}

  float& at(int r, int c, int ch) { return data[(static_cast<size_t>(r) * w + c) * k + ch]; }
  float at(int r, int c, int ch) const { return data[(static_cast<size_t>(r) * w + c) * k + ch]; }
};

void write_float_map(const std::filesystem::path& path, const FloatMap& fm);
FloatMap read_float_map(const std::filesystem::path& path);

FloatMap float_map_from_normals(const NormalMap& nm);
NormalMap normals_from_float_map(const FloatMap& fm, const Mask& mask);
FloatMap float_map_from_depth(const DepthMap& dm);

/// Decoded integer raster; values in [0, 2^bit_depth - 1].
struct RasterImage {
  int h = 0, w = 0, c = 0;     // c is 1 or 3
  int bit_depth = 8;           // 8 or 16
  std::vector<uint16_t> px;    // row-major, channel-interleaved
};

RasterImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RasterImage& img);

Mask mask_from_png(const std::filesystem::path& path);
void write_mask_png(const std::filesystem::path& path, const Mask& mask);

/// Files making up one dataset directory.
struct DatasetDescriptor {
  std::filesystem::path root;
  std::vector<std::string> image_files;  // sorted
  std::string mask_file = "mask.png";
  std::optional<std::string> light_directions_file;
  std::optional<std::string> light_intensities_file;
  std::optional<std::string> normal_gt_file;

  /// Scan a directory laid out as {NNN.png|NNN.fmap}, mask.png,
  /// light_directions.txt, light_intensities.txt, normal_gt.fmap.
  static DatasetDescriptor discover(const std::filesystem::path& root);
};

struct Dataset {
  ImageStack stack;
  std::optional<LightSet> lights;
  std::optional<NormalMap> gt_normals;
};

Dataset read_dataset(const DatasetDescriptor& desc);

void write_light_files(const std::filesystem::path& dir, const LightSet& lights);

/// Writes images (as .fmap, or 16-bit PNG when png16), mask.png, light files,
/// and optionally normal_gt.fmap in the layout read_dataset expects.
void write_dataset(const std::filesystem::path& dir, const ImageStack& stack,
                   const LightSet& lights, const NormalMap* gt_normals,
                   bool png16 = false);

}  // namespace ps
