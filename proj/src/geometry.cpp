#include "ps/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

namespace ps {

GradientResult normals_to_gradients(const NormalMap& nm) {
  GradientResult out;
  out.field = GradientField(nm.h, nm.w);
  out.field.mask = nm.mask;
  for (int r = 0; r < nm.h; ++r) {
    for (int c = 0; c < nm.w; ++c) {
      if (!nm.mask.at(r, c)) continue;
      const Vector3d n = nm.get(r, c);
      double nz = n.z();
      if (nz <= kGradientNzFloor) {
        nz = kGradientNzFloor;
        out.clamp_warnings++;
      }
      out.field.p(r, c) = -n.x() / nz;
      out.field.q(r, c) = -n.y() / nz;
    }
  }
  return out;
}

namespace {

struct EdgeSystem {
  // One equation per 4-neighbor edge inside the mask:
  //   depth[b] - depth[a] = g   (midpoint of the two pixel gradients)
  std::vector<int> a, b;
  std::vector<double> g;
  std::vector<int> index_of_pixel;  // h*w -> unknown index, -1 outside
  std::vector<int> pixel_of_index;
  std::vector<int> component;       // per unknown
  int n_components = 0;
};

EdgeSystem build_edge_system(const GradientField& gf, const Mask& mask) {
  EdgeSystem s;
  const int h = mask.h, w = mask.w;
  s.index_of_pixel.assign(static_cast<size_t>(h) * w, -1);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (mask.at(r, c)) {
        s.index_of_pixel[static_cast<size_t>(r) * w + c] = static_cast<int>(s.pixel_of_index.size());
        s.pixel_of_index.push_back(r * w + c);
      }

  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!mask.at(r, c)) continue;
      const int ia = s.index_of_pixel[static_cast<size_t>(r) * w + c];
      if (c + 1 < w && mask.at(r, c + 1)) {
        s.a.push_back(ia);
        s.b.push_back(s.index_of_pixel[static_cast<size_t>(r) * w + c + 1]);
        s.g.push_back(0.5 * (gf.p(r, c) + gf.p(r, c + 1)));
      }
      // y increases upward, i.e. toward smaller row index.
      if (r - 1 >= 0 && mask.at(r - 1, c)) {
        s.a.push_back(ia);
        s.b.push_back(s.index_of_pixel[static_cast<size_t>(r - 1) * w + c]);
        s.g.push_back(0.5 * (gf.q(r, c) + gf.q(r - 1, c)));
      }
    }
  }

  // Connected components (4-neighbor) for per-component gauge fixing.
  const int m = static_cast<int>(s.pixel_of_index.size());
  s.component.assign(m, -1);
  for (int seed = 0; seed < m; ++seed) {
    if (s.component[seed] >= 0) continue;
    const int comp = s.n_components++;
    std::deque<int> queue{seed};
    s.component[seed] = comp;
    while (!queue.empty()) {
      const int i = queue.front();
      queue.pop_front();
      const int r = s.pixel_of_index[i] / w;
      const int c = s.pixel_of_index[i] % w;
      const int dr[4] = {0, 0, 1, -1};
      const int dc[4] = {1, -1, 0, 0};
      for (int k = 0; k < 4; ++k) {
        const int rr = r + dr[k], cc = c + dc[k];
        if (rr < 0 || rr >= mask.h || cc < 0 || cc >= w || !mask.at(rr, cc)) continue;
        const int j = s.index_of_pixel[static_cast<size_t>(rr) * w + cc];
        if (s.component[j] < 0) {
          s.component[j] = comp;
          queue.push_back(j);
        }
      }
    }
  }
  return s;
}

}  // namespace

DepthMap integrate_depth(const GradientField& gf, const Mask& mask) {
  require(gf.h == mask.h && gf.w == mask.w, "gradient field / mask size mismatch");
  require(mask.count() >= 1, "mask has no pixels");
  const EdgeSystem sys = build_edge_system(gf, mask);
  const int m = static_cast<int>(sys.pixel_of_index.size());
  const int ne = static_cast<int>(sys.a.size());

  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m);
  for (int e = 0; e < ne; ++e) {
    rhs[sys.b[e]] += sys.g[e];
    rhs[sys.a[e]] -= sys.g[e];
  }

  const auto apply = [&](const Eigen::VectorXd& x, Eigen::VectorXd& y) {
    y.setZero();
    for (int e = 0; e < ne; ++e) {
      const double d = x[sys.b[e]] - x[sys.a[e]];
      y[sys.b[e]] += d;
      y[sys.a[e]] -= d;
    }
  };

  Eigen::VectorXd x = Eigen::VectorXd::Zero(m);
  const double bnorm = rhs.norm();
  if (bnorm > 0.0) {
    Eigen::VectorXd r = rhs, p = rhs, ap(m);
    double rs = r.squaredNorm();
    const int max_iter = std::max(1000, 20 * m);
    bool done = false;
    for (int it = 0; it < max_iter; ++it) {
      apply(p, ap);
      const double pap = p.dot(ap);
      if (pap <= 0.0) break;  // descent exhausted in the singular directions
      const double alpha = rs / pap;
      x += alpha * p;
      r -= alpha * ap;
      const double rs_new = r.squaredNorm();
      if (std::sqrt(rs_new) / bnorm < 1e-8) {
        done = true;
        break;
      }
      p = r + (rs_new / rs) * p;
      rs = rs_new;
    }
    if (!done && std::sqrt(r.squaredNorm()) / bnorm >= 1e-8)
      throw Error("depth integration stagnated: relative residual " +
                  std::to_string(std::sqrt(r.squaredNorm()) / bnorm));
  }

  // Zero-mean gauge per connected component.
  std::vector<double> comp_sum(sys.n_components, 0.0);
  std::vector<int> comp_count(sys.n_components, 0);
  for (int i = 0; i < m; ++i) {
    comp_sum[sys.component[i]] += x[i];
    comp_count[sys.component[i]]++;
  }
  DepthMap dm(mask.h, mask.w);
  dm.mask = mask;
  for (int i = 0; i < m; ++i) {
    const int px = sys.pixel_of_index[i];
    dm.data[px] = x[i] - comp_sum[sys.component[i]] / comp_count[sys.component[i]];
  }
  return dm;
}

NormalMap depth_to_normals(const DepthMap& depth) {
  NormalMap nm(depth.h, depth.w);
  nm.mask = depth.mask;
  const Mask& mask = depth.mask;
  for (int r = 0; r < depth.h; ++r) {
    for (int c = 0; c < depth.w; ++c) {
      if (!mask.at(r, c)) continue;
      double p = 0.0, q = 0.0;
      int np = 0, nq = 0;
      if (c + 1 < depth.w && mask.at(r, c + 1)) {
        p += depth.at(r, c + 1) - depth.at(r, c);
        ++np;
      }
      if (c - 1 >= 0 && mask.at(r, c - 1)) {
        p += depth.at(r, c) - depth.at(r, c - 1);
        ++np;
      }
      if (r - 1 >= 0 && mask.at(r - 1, c)) {
        q += depth.at(r - 1, c) - depth.at(r, c);
        ++nq;
      }
      if (r + 1 < depth.h && mask.at(r + 1, c)) {
        q += depth.at(r, c) - depth.at(r + 1, c);
        ++nq;
      }
      if (np) p /= np;
      if (nq) q /= nq;
      Vector3d n(-p, -q, 1.0);
      nm.set(r, c, n.normalized());
    }
  }
  return nm;
}

// ---------------------------------------------------------------------------
// Facets
// ---------------------------------------------------------------------------

Eigen::MatrixX3d FacetSet::downsample_vectors(const NormalMap& nm) const {
  Eigen::MatrixX3d out = Eigen::MatrixX3d::Zero(count, 3);
  for (int f = 0; f < count; ++f) {
    Vector3d s = Vector3d::Zero();
    for (int px : pixels_of_facet[f]) s += nm.get(px / w, px % w);
    out.row(f) = (s / static_cast<double>(pixels_of_facet[f].size())).transpose();
  }
  return out;
}

std::vector<double> FacetSet::upsample_scalars(const Eigen::VectorXd& per_facet) const {
  std::vector<double> out(masked_pixels.size(), 0.0);
  for (size_t k = 0; k < masked_pixels.size(); ++k) {
    const PixelWeight& pw = upsample[k];
    double v = 0.0;
    for (int j = 0; j < 4; ++j)
      if (pw.facet[j] >= 0) v += pw.weight[j] * per_facet[pw.facet[j]];
    out[k] = v;
  }
  return out;
}

Eigen::MatrixX3d FacetSet::facet_matrix_scaled(const std::vector<double>& row_scale) const {
  require(static_cast<int>(row_scale.size()) == count, "row scale size mismatch");
  Eigen::MatrixX3d f(count, 3);
  for (int i = 0; i < count; ++i) f.row(i) = row_scale[i] * normal[i].transpose();
  return f;
}

FacetSet build_facets(const NormalMap& nm, const AlbedoMap& albedo, const Mask& mask,
                      int factor) {
  const GradientResult gr = normals_to_gradients(nm);
  const DepthMap depth = integrate_depth(gr.field, mask);
  return build_facets_from_maps(nm, albedo, depth, mask, factor);
}

FacetSet build_facets_from_maps(const NormalMap& nm, const AlbedoMap& albedo,
                                const DepthMap& depth, const Mask& mask, int factor) {
  require(factor >= 1, "facet factor must be >= 1");
  require(nm.h == mask.h && nm.w == mask.w, "normal map / mask size mismatch");

  FacetSet fs;
  fs.h = mask.h;
  fs.w = mask.w;
  fs.factor = factor;
  fs.bh = (mask.h + factor - 1) / factor;
  fs.bw = (mask.w + factor - 1) / factor;
  fs.facet_of_block.assign(static_cast<size_t>(fs.bh) * fs.bw, -1);
  fs.facet_of_pixel.assign(static_cast<size_t>(fs.h) * fs.w, -1);
  fs.block_depth.assign(static_cast<size_t>(fs.bh) * fs.bw, 0.0);
  fs.block_has_depth.assign(static_cast<size_t>(fs.bh) * fs.bw, 0);

  const int half_block = (factor * factor) / 2;
  for (int br = 0; br < fs.bh; ++br) {
    for (int bc = 0; bc < fs.bw; ++bc) {
      std::vector<int> px;
      double depth_sum = 0.0;
      for (int r = br * factor; r < std::min((br + 1) * factor, fs.h); ++r)
        for (int c = bc * factor; c < std::min((bc + 1) * factor, fs.w); ++c)
          if (mask.at(r, c)) {
            px.push_back(r * fs.w + c);
            depth_sum += depth.at(r, c);
          }
      if (!px.empty()) {
        fs.block_depth[static_cast<size_t>(br) * fs.bw + bc] = depth_sum / px.size();
        fs.block_has_depth[static_cast<size_t>(br) * fs.bw + bc] = 1;
      }
      if (static_cast<int>(px.size()) < std::max(1, half_block)) continue;

      Vector3d pos = Vector3d::Zero();
      Vector3d nrm = Vector3d::Zero();
      double alb = 0.0;
      for (int p : px) {
        const int r = p / fs.w, c = p % fs.w;
        pos += Vector3d(c, pixel_y(fs.h, r), depth.at(r, c));
        nrm += nm.get(r, c);
        alb += albedo.mean_at(r, c);
      }
      pos /= static_cast<double>(px.size());
      alb /= static_cast<double>(px.size());
      const double nrm_len = nrm.norm();
      if (nrm_len <= 0.0) continue;
      nrm /= nrm_len;

      const int f = fs.count++;
      fs.position.push_back(pos);
      fs.normal.push_back(nrm);
      fs.albedo.push_back(std::clamp(alb, 0.0, 1.0 - 1e-6));
      const double flat = static_cast<double>(factor) * factor;
      fs.area.push_back(std::min(flat / std::max(nrm.z(), 1e-6), 5.0 * flat));
      fs.block_row.push_back(br);
      fs.block_col.push_back(bc);
      fs.facet_of_block[static_cast<size_t>(br) * fs.bw + bc] = f;
      for (int p : px) fs.facet_of_pixel[p] = f;
      fs.pixels_of_facet.push_back(std::move(px));
    }
  }
  require(fs.count >= 1, "facetization produced no facets");

  // Bilinear upsample stencils on the block-center grid, renormalized where
  // neighbor blocks carry no facet.
  fs.masked_pixels = mask.pixel_list();
  fs.upsample.resize(fs.masked_pixels.size());
  const double center_off = (factor - 1) / 2.0;
  for (size_t k = 0; k < fs.masked_pixels.size(); ++k) {
    const int r = fs.masked_pixels[k] / fs.w;
    const int c = fs.masked_pixels[k] % fs.w;
    const double gr = (r - center_off) / factor;
    const double gc = (c - center_off) / factor;
    const int r0 = static_cast<int>(std::floor(gr));
    const int c0 = static_cast<int>(std::floor(gc));
    const double fr = gr - r0;
    const double fc = gc - c0;
    FacetSet::PixelWeight pw;
    double total = 0.0;
    int slot = 0;
    for (int dr = 0; dr < 2; ++dr) {
      for (int dc = 0; dc < 2; ++dc) {
        const int br = r0 + dr, bc = c0 + dc;
        if (br < 0 || br >= fs.bh || bc < 0 || bc >= fs.bw) { ++slot; continue; }
        const int f = fs.facet_of_block[static_cast<size_t>(br) * fs.bw + bc];
        if (f < 0) { ++slot; continue; }
        const double wgt = (dr ? fr : 1.0 - fr) * (dc ? fc : 1.0 - fc);
        pw.facet[slot] = f;
        pw.weight[slot] = wgt;
        total += wgt;
        ++slot;
      }
    }
    if (total <= 1e-12) {
      // No facet among the surrounding blocks: fall back to the nearest facet.
      int best = 0;
      double best_d = std::numeric_limits<double>::max();
      for (int f = 0; f < fs.count; ++f) {
        const double dr = fs.block_row[f] * factor + center_off - r;
        const double dc = fs.block_col[f] * factor + center_off - c;
        const double d = dr * dr + dc * dc;
        if (d < best_d) {
          best_d = d;
          best = f;
        }
      }
      pw.facet = {best, -1, -1, -1};
      pw.weight = {1.0, 0, 0, 0};
    } else {
      for (int j = 0; j < 4; ++j) pw.weight[j] /= total;
    }
    fs.upsample[k] = pw;
  }
  return fs;
}

// ---------------------------------------------------------------------------
// Interreflection kernel
// ---------------------------------------------------------------------------

namespace {

// Bilinear block-mean depth at fractional pixel coordinates (row, col);
// false when no neighbor block carries depth.
bool sample_block_depth(const FacetSet& fs, double row, double col, double* out) {
  const double center_off = (fs.factor - 1) / 2.0;
  const double gr = (row - center_off) / fs.factor;
  const double gc = (col - center_off) / fs.factor;
  const int r0 = static_cast<int>(std::floor(gr));
  const int c0 = static_cast<int>(std::floor(gc));
  const double fr = gr - r0;
  const double fc = gc - c0;
  double total_w = 0.0, total = 0.0;
  for (int dr = 0; dr < 2; ++dr) {
    for (int dc = 0; dc < 2; ++dc) {
      const int br = r0 + dr, bc = c0 + dc;
      if (br < 0 || br >= fs.bh || bc < 0 || bc >= fs.bw) continue;
      if (!fs.block_has_depth[static_cast<size_t>(br) * fs.bw + bc]) continue;
      const double wgt = (dr ? fr : 1.0 - fr) * (dc ? fc : 1.0 - fc);
      total += wgt * fs.block_depth[static_cast<size_t>(br) * fs.bw + bc];
      total_w += wgt;
    }
  }
  if (total_w <= 1e-12) return false;
  *out = total / total_w;
  return true;
}

// Heightfield occlusion test between facets i and j: march the connecting
// segment at one downsampled pixel per step, skipping a margin near both
// endpoints, and compare the surface depth against the segment.
bool segment_occluded(const FacetSet& fs, int i, int j) {
  const Vector3d& pi = fs.position[i];
  const Vector3d& pj = fs.position[j];
  const double ri = pixel_y(fs.h, 0) - pi.y();  // back to row coordinates
  const double rj = pixel_y(fs.h, 0) - pj.y();
  const double ci = pi.x(), cj = pj.x();
  const double dist = std::hypot(rj - ri, cj - ci);
  const double step = fs.factor;
  const double margin = 1.5 * fs.factor;
  if (dist <= 2.0 * margin + step) return false;
  const int n = static_cast<int>(std::ceil(dist / step));
  const double eps = 0.05 * fs.factor;
  for (int k = 1; k < n; ++k) {
    const double t = static_cast<double>(k) / n;
    const double arc = dist * std::min(t, 1.0 - t);
    if (arc < margin) continue;
    const double row = ri + t * (rj - ri);
    const double col = ci + t * (cj - ci);
    const double seg_z = pi.z() + t * (pj.z() - pi.z());
    double surf_z;
    if (!sample_block_depth(fs, row, col, &surf_z)) continue;
    if (surf_z > seg_z + eps) return true;
  }
  return false;
}

}  // namespace

InterreflectionKernel interreflection_kernel(const FacetSet& fs) {
  require(fs.count >= 2, "interreflection kernel needs at least 2 facets");
  InterreflectionKernel kern;
  kern.K = Eigen::MatrixXd::Zero(fs.count, fs.count);
  for (int i = 0; i < fs.count; ++i) {
    for (int j = i + 1; j < fs.count; ++j) {
      const Vector3d r = fs.position[i] - fs.position[j];
      const double rr = r.squaredNorm();
      require(rr > 1e-12, "coincident facet positions");
      const double ci = fs.normal[i].dot(-r);
      const double cj = fs.normal[j].dot(r);
      if (ci <= 0.0 || cj <= 0.0) continue;  // back- or side-facing pair
      if (segment_occluded(fs, i, j)) continue;
      const double base = ci * cj / (rr * rr);
      const double v = base * std::sqrt(fs.area[i] * fs.area[j]);
      kern.K(i, j) = v;
      kern.K(j, i) = v;
    }
  }
  return kern;
}

}  // namespace ps
