#include "ps/io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "float map I/O assumes a little-endian host");

namespace ps {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Float maps
// ---------------------------------------------------------------------------

static constexpr char kFmapMagic[8] = {'F', 'M', 'A', 'P', '0', '0', '0', '1'};

void write_float_map(const fs::path& path, const FloatMap& fm) {
  require(fm.h >= 1 && fm.w >= 1 && fm.k >= 1, "float map has empty dimensions");
  require(fm.data.size() == static_cast<size_t>(fm.h) * fm.w * fm.k,
          "float map buffer size mismatch");
  for (float v : fm.data) require(std::isfinite(v), "float map values must be finite");

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), "cannot open for writing: " + path.string());
  f.write(kFmapMagic, sizeof(kFmapMagic));
  const uint32_t dims[3] = {static_cast<uint32_t>(fm.h), static_cast<uint32_t>(fm.w),
                            static_cast<uint32_t>(fm.k)};
  f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  f.write(reinterpret_cast<const char*>(fm.data.data()),
          static_cast<std::streamsize>(fm.data.size() * sizeof(float)));
  require(f.good(), "write failed: " + path.string());
}

FloatMap read_float_map(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open float map: " + path.string());
  char magic[8];
  f.read(magic, sizeof(magic));
  require(f.gcount() == sizeof(magic) && std::memcmp(magic, kFmapMagic, 8) == 0,
          "corrupt float map header (bad magic): " + path.string());
  uint32_t dims[3];
  f.read(reinterpret_cast<char*>(dims), sizeof(dims));
  require(f.gcount() == sizeof(dims), "corrupt float map header (truncated dims): " + path.string());
  require(dims[0] >= 1 && dims[1] >= 1 && dims[2] >= 1 && dims[0] < (1u << 20) &&
              dims[1] < (1u << 20) && dims[2] <= 4096,
          "corrupt float map header (implausible dims): " + path.string());
  FloatMap fm(static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]));
  f.read(reinterpret_cast<char*>(fm.data.data()),
         static_cast<std::streamsize>(fm.data.size() * sizeof(float)));
  require(f.gcount() == static_cast<std::streamsize>(fm.data.size() * sizeof(float)),
          "float map payload truncated: " + path.string());
  return fm;
}

FloatMap float_map_from_normals(const NormalMap& nm) {
  FloatMap fm(nm.h, nm.w, 3);
  for (size_t i = 0; i < nm.data.size(); ++i) fm.data[i] = static_cast<float>(nm.data[i]);
  return fm;
}

NormalMap normals_from_float_map(const FloatMap& fm, const Mask& mask) {
  require(fm.k == 3, "normal float map must have k = 3");
  require(fm.h == mask.h && fm.w == mask.w, "normal map / mask size mismatch");
  NormalMap nm(fm.h, fm.w);
  nm.mask = mask;
  for (int r = 0; r < fm.h; ++r) {
    for (int c = 0; c < fm.w; ++c) {
      if (!mask.at(r, c)) continue;
      Vector3d n(fm.at(r, c, 0), fm.at(r, c, 1), fm.at(r, c, 2));
      const double len = n.norm();
      nm.set(r, c, len > 0 ? Vector3d(n / len) : Vector3d(0, 0, 1));
    }
  }
  return nm;
}

FloatMap float_map_from_depth(const DepthMap& dm) {
  FloatMap fm(dm.h, dm.w, 1);
  for (size_t i = 0; i < dm.data.size(); ++i) fm.data[i] = static_cast<float>(dm.data[i]);
  return fm;
}

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

namespace {

struct FileCloser {
  void operator()(FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

RasterImage read_png(const fs::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  require(fp != nullptr, "cannot open image: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, "libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("unreadable PNG file: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  const int bit_depth = png_get_bit_depth(png, info);
  const int color_type = png_get_color_type(png, info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (bit_depth == 16) png_set_swap(png);
  png_read_update_info(png, info);

  RasterImage img;
  img.h = static_cast<int>(png_get_image_height(png, info));
  img.w = static_cast<int>(png_get_image_width(png, info));
  img.c = static_cast<int>(png_get_channels(png, info));
  img.bit_depth = png_get_bit_depth(png, info);
  if (img.c != 1 && img.c != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("unsupported PNG channel count in " + path.string());
  }

  const size_t row_bytes = png_get_rowbytes(png, info);
  std::vector<uint8_t> raw(static_cast<size_t>(img.h) * row_bytes);
  std::vector<png_bytep> rows(img.h);
  for (int r = 0; r < img.h; ++r) rows[r] = raw.data() + static_cast<size_t>(r) * row_bytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  img.px.resize(static_cast<size_t>(img.h) * img.w * img.c);
  if (img.bit_depth == 16) {
    const uint16_t* src = reinterpret_cast<const uint16_t*>(raw.data());
    std::copy(src, src + img.px.size(), img.px.begin());
  } else {
    for (size_t i = 0; i < img.px.size(); ++i) img.px[i] = raw[i];
  }
  return img;
}

void write_png(const fs::path& path, const RasterImage& img) {
  require(img.c == 1 || img.c == 3, "PNG writer needs 1 or 3 channels");
  require(img.bit_depth == 8 || img.bit_depth == 16, "PNG writer needs 8 or 16 bit depth");
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  require(fp != nullptr, "cannot open for writing: " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, "libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("PNG write failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.w, img.h, img.bit_depth,
               img.c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (img.bit_depth == 16) png_set_swap(png);

  const size_t row_elems = static_cast<size_t>(img.w) * img.c;
  if (img.bit_depth == 16) {
    std::vector<png_bytep> rows(img.h);
    for (int r = 0; r < img.h; ++r)
      rows[r] = reinterpret_cast<png_bytep>(const_cast<uint16_t*>(img.px.data() + r * row_elems));
    png_write_image(png, rows.data());
  } else {
    std::vector<uint8_t> raw(static_cast<size_t>(img.h) * row_elems);
    for (size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<uint8_t>(img.px[i]);
    std::vector<png_bytep> rows(img.h);
    for (int r = 0; r < img.h; ++r) rows[r] = raw.data() + r * row_elems;
    png_write_image(png, rows.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Mask mask_from_png(const fs::path& path) {
  const RasterImage img = read_png(path);
  Mask m(img.h, img.w);
  for (int r = 0; r < img.h; ++r)
    for (int c = 0; c < img.w; ++c)
      m.set(r, c, img.px[(static_cast<size_t>(r) * img.w + c) * img.c] != 0);
  return m;
}

void write_mask_png(const fs::path& path, const Mask& mask) {
  RasterImage img;
  img.h = mask.h;
  img.w = mask.w;
  img.c = 1;
  img.bit_depth = 8;
  img.px.resize(static_cast<size_t>(mask.h) * mask.w);
  for (size_t i = 0; i < img.px.size(); ++i) img.px[i] = mask.on[i] ? 255 : 0;
  write_png(path, img);
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

DatasetDescriptor DatasetDescriptor::discover(const fs::path& root) {
  require(fs::is_directory(root), "dataset directory not found: " + root.string());
  DatasetDescriptor d;
  d.root = root;
  for (const auto& e : fs::directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string name = e.path().filename().string();
    const std::string ext = e.path().extension().string();
    const std::string stem = e.path().stem().string();
    const bool numeric_stem =
        !stem.empty() && std::all_of(stem.begin(), stem.end(), [](char ch) { return ch >= '0' && ch <= '9'; });
    if ((ext == ".png" || ext == ".fmap") && numeric_stem)
      d.image_files.push_back(name);
    else if (name == "light_directions.txt")
      d.light_directions_file = name;
    else if (name == "light_intensities.txt")
      d.light_intensities_file = name;
    else if (name == "normal_gt.fmap")
      d.normal_gt_file = name;
  }
  std::sort(d.image_files.begin(), d.image_files.end());
  require(!d.image_files.empty(), "no images found in " + root.string());
  require(fs::exists(root / d.mask_file), "mask.png missing in " + root.string());
  return d;
}

namespace {

std::vector<std::vector<double>> parse_number_lines(const fs::path& path) {
  std::ifstream f(path);
  require(f.good(), "cannot open light file: " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::istringstream ss(line);
    std::vector<double> vals;
    double v;
    while (ss >> v) vals.push_back(v);
    if (!vals.empty()) rows.push_back(std::move(vals));
  }
  return rows;
}

}  // namespace

Dataset read_dataset(const DatasetDescriptor& desc) {
  Dataset ds;
  const Mask mask = mask_from_png(desc.root / desc.mask_file);

  const int n = static_cast<int>(desc.image_files.size());
  int h = mask.h, w = mask.w, c = -1;
  for (int i = 0; i < n; ++i) {
    const fs::path p = desc.root / desc.image_files[i];
    if (p.extension() == ".fmap") {
      const FloatMap fm = read_float_map(p);
      require(fm.h == h && fm.w == w,
              "image dimension mismatch: " + p.string());
      require(fm.k == 1 || fm.k == 3, "image channel count must be 1 or 3: " + p.string());
      if (c < 0) {
        c = fm.k;
        ds.stack = ImageStack(n, h, w, c);
        ds.stack.mask = mask;
      }
      require(fm.k == c, "inconsistent channel count across images");
      for (int r = 0; r < h; ++r)
        for (int col = 0; col < w; ++col)
          for (int ch = 0; ch < c; ++ch)
            ds.stack.at(i, r, col, ch) = std::max(0.0, static_cast<double>(fm.at(r, col, ch)));
    } else {
      const RasterImage img = read_png(p);
      require(img.h == h && img.w == w, "image dimension mismatch: " + p.string());
      if (c < 0) {
        c = img.c;
        ds.stack = ImageStack(n, h, w, c);
        ds.stack.mask = mask;
      }
      require(img.c == c, "inconsistent channel count across images");
      const double scale = img.bit_depth == 16 ? 65535.0 : 255.0;
      for (int r = 0; r < h; ++r)
        for (int col = 0; col < w; ++col)
          for (int ch = 0; ch < c; ++ch)
            ds.stack.at(i, r, col, ch) =
                img.px[(static_cast<size_t>(r) * w + col) * c + ch] / scale;
    }
  }

  if (desc.light_directions_file) {
    LightSet ls;
    const auto rows = parse_number_lines(desc.root / *desc.light_directions_file);
    require(static_cast<int>(rows.size()) == n,
            "light direction count does not match image count");
    for (const auto& row : rows) {
      require(row.size() == 3, "light direction rows must have 3 components");
      Vector3d dvec(row[0], row[1], row[2]);
      require(dvec.norm() > 1e-12, "zero-length light direction row");
      ls.directions.push_back(dvec.normalized());
    }
    if (desc.light_intensities_file) {
      const auto irows = parse_number_lines(desc.root / *desc.light_intensities_file);
      require(irows.size() == rows.size(), "light intensity count does not match image count");
      for (const auto& row : irows) {
        require(row.size() == 1 || row.size() == 3,
                "light intensity rows must have 1 or 3 values");
        double e = 0.0;
        for (double v : row) e += v;
        e /= row.size();
        require(e > 0.0, "light intensity must be positive");
        ls.intensities.push_back(e);
      }
    } else {
      ls.intensities.assign(rows.size(), 1.0);
    }
    ls.validate();
    ds.lights = std::move(ls);
  }

  if (desc.normal_gt_file) {
    const FloatMap fm = read_float_map(desc.root / *desc.normal_gt_file);
    ds.gt_normals = normals_from_float_map(fm, mask);
  }
  ds.stack.validate();
  return ds;
}

void write_light_files(const fs::path& dir, const LightSet& lights) {
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "light_directions.txt", std::ios::trunc);
    require(f.good(), "cannot write light_directions.txt");
    f.precision(17);
    for (const auto& d : lights.directions) f << d.x() << " " << d.y() << " " << d.z() << "\n";
  }
  {
    std::ofstream f(dir / "light_intensities.txt", std::ios::trunc);
    require(f.good(), "cannot write light_intensities.txt");
    f.precision(17);
    for (double e : lights.intensities) f << e << "\n";
  }
}

void write_dataset(const fs::path& dir, const ImageStack& stack, const LightSet& lights,
                   const NormalMap* gt_normals, bool png16) {
  fs::create_directories(dir);
  char name[32];
  for (int i = 0; i < stack.n; ++i) {
    if (png16) {
      RasterImage img;
      img.h = stack.h;
      img.w = stack.w;
      img.c = stack.c;
      img.bit_depth = 16;
      img.px.resize(static_cast<size_t>(stack.h) * stack.w * stack.c);
      for (int r = 0; r < stack.h; ++r)
        for (int col = 0; col < stack.w; ++col)
          for (int ch = 0; ch < stack.c; ++ch)
            img.px[(static_cast<size_t>(r) * stack.w + col) * stack.c + ch] =
                static_cast<uint16_t>(
                    std::clamp(std::round(stack.at(i, r, col, ch) * 65535.0), 0.0, 65535.0));
      std::snprintf(name, sizeof(name), "%03d.png", i + 1);
      write_png(dir / name, img);
    } else {
      FloatMap fm(stack.h, stack.w, stack.c);
      for (int r = 0; r < stack.h; ++r)
        for (int col = 0; col < stack.w; ++col)
          for (int ch = 0; ch < stack.c; ++ch)
            fm.at(r, col, ch) = static_cast<float>(stack.at(i, r, col, ch));
      std::snprintf(name, sizeof(name), "%03d.fmap", i + 1);
      write_float_map(dir / name, fm);
    }
  }
  write_mask_png(dir / "mask.png", stack.mask);
  write_light_files(dir, lights);
  if (gt_normals) write_float_map(dir / "normal_gt.fmap", float_map_from_normals(*gt_normals));
}

}  // namespace ps
