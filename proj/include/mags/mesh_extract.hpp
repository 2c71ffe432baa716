#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "detail/mc_tables.hpp"
#include "errors.hpp"
#include "mesh.hpp"
#include "parallel.hpp"
#include "splatting.hpp"

namespace mags {

// Scalar samples on a regular lattice, x fastest.
struct DensityGrid {
  Vec3 origin = Vec3::Zero();
  double spacing = 1.0;
  std::array<int, 3> dims = {0, 0, 0};
  std::vector<double> values;

  DensityGrid() = default;
  DensityGrid(const Vec3& o, double h, std::array<int, 3> d)
      : origin(o), spacing(h), dims(d), values(static_cast<std::size_t>(d[0]) * d[1] * d[2], 0.0) {}

  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * dims[1] + y) * dims[0] + x;
  }
  double& at(int x, int y, int z) { return values[index(x, y, z)]; }
  double at(int x, int y, int z) const { return values[index(x, y, z)]; }
  Vec3 position(int x, int y, int z) const { return origin + spacing * Vec3(x, y, z); }

  template <typename F>
  static DensityGrid sample(const Vec3& o, double h, std::array<int, 3> d, F&& field) {
    DensityGrid g(o, h, d);
    for (int z = 0; z < d[2]; ++z) {
      for (int y = 0; y < d[1]; ++y) {
        for (int x = 0; x < d[0]; ++x) g.at(x, y, z) = field(g.position(x, y, z));
      }
    }
    return g;
  }
};

struct HandleSet {
  std::vector<int> vertices;
  double separation = 0.0;
};

namespace detail {

inline constexpr double kMahalanobisCutoff = 4.0;

struct DensityKernel {
  Vec3 mu;
  Mat3 inv_cov;
  Vec3 half_extent;
  double opacity;
};

inline DensityKernel density_kernel(const Gaussian3D& g) {
  const Mat3 cov = build_covariance(g.rot, g.scale());
  DensityKernel k;
  k.mu = g.mu;
  k.inv_cov = cov.inverse();
  k.half_extent = kMahalanobisCutoff * cov.diagonal().cwiseSqrt();
  k.opacity = g.opacity();
  return k;
}

inline double kernel_value(const DensityKernel& k, const Vec3& p) {
  const Vec3 d = p - k.mu;
  const double q = d.dot(k.inv_cov * d);
  if (q > kMahalanobisCutoff * kMahalanobisCutoff) return 0.0;
  return k.opacity * std::exp(-0.5 * q);
}

// Canonical processing order so results do not depend on input order.
inline std::vector<std::size_t> canonical_order(const std::vector<Gaussian3D>& gs) {
  std::vector<std::size_t> order(gs.size());
  std::iota(order.begin(), order.end(), 0);
  auto key = [&](std::size_t i) {
    const auto& g = gs[i];
    return std::make_tuple(g.mu.x(), g.mu.y(), g.mu.z(), g.log_scale.x(), g.log_scale.y(), g.log_scale.z(),
                           g.rot.w, g.rot.x, g.rot.y, g.rot.z, g.opacity_logit);
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  return order;
}

inline constexpr std::array<std::array<int, 3>, 8> kCorner = {
    {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}}};
inline constexpr std::array<std::array<int, 2>, 12> kEdgeCorners = {
    {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6}, {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}}};

// Drops faces that reference a vertex twice or have negligible area, then
// removes unreferenced vertices.
inline TriMesh compact_mesh(const std::vector<Vec3>& verts, const std::vector<Face>& faces) {
  std::vector<int> remap(verts.size(), -1);
  std::vector<Vec3> out_v;
  std::vector<Face> out_f;
  for (const auto& f : faces) {
    if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) continue;
    if (TriMesh::facet_area(verts, f) < 1e-12) continue;
    Face g;
    for (int k = 0; k < 3; ++k) {
      if (remap[f[k]] < 0) {
        remap[f[k]] = static_cast<int>(out_v.size());
        out_v.push_back(verts[f[k]]);
      }
      g[k] = remap[f[k]];
    }
    out_f.push_back(g);
  }
  return TriMesh(std::move(out_v), std::move(out_f));
}

}  // namespace detail

// Opacity-weighted mixture of the Gaussians' unnormalized densities.
inline double density_at(const std::vector<Gaussian3D>& gaussians, const Vec3& p) {
  double d = 0.0;
  for (const auto& g : gaussians) d += detail::kernel_value(detail::density_kernel(g), p);
  return d;
}

// Surface where the field crosses iso; outward normals point toward lower
// values.
inline TriMesh marching_cubes(const DensityGrid& grid, double iso) {
  const auto [nx, ny, nz] = grid.dims;
  if (nx < 2 || ny < 2 || nz < 2) fail(ErrorCode::InvalidArgument, "marching cubes needs at least 2 samples per axis");
  std::unordered_map<std::int64_t, int> weld;
  std::vector<Vec3> verts;
  std::vector<Face> faces;
  const double snap = 1e-9;

  auto vertex_on_edge = [&](int x, int y, int z, int edge) {
    const auto [ca, cb] = detail::kEdgeCorners[edge];
    std::array<int, 3> lo = detail::kCorner[ca], hi = detail::kCorner[cb];
    if (lo[0] + lo[1] + lo[2] > hi[0] + hi[1] + hi[2]) std::swap(lo, hi);
    const int axis = hi[0] != lo[0] ? 0 : (hi[1] != lo[1] ? 1 : 2);
    const int lx = x + lo[0], ly = y + lo[1], lz = z + lo[2];
    const int hx = x + hi[0], hy = y + hi[1], hz = z + hi[2];
    const double v0 = grid.at(lx, ly, lz), v1 = grid.at(hx, hy, hz);
    const double t = (iso - v0) / (v1 - v0);
    std::int64_t key;
    Vec3 p;
    if (t * grid.spacing < snap) {
      key = static_cast<std::int64_t>(grid.index(lx, ly, lz)) * 4 + 3;
      p = grid.position(lx, ly, lz);
    } else if ((1.0 - t) * grid.spacing < snap) {
      key = static_cast<std::int64_t>(grid.index(hx, hy, hz)) * 4 + 3;
      p = grid.position(hx, hy, hz);
    } else {
      key = static_cast<std::int64_t>(grid.index(lx, ly, lz)) * 4 + axis;
      p = grid.position(lx, ly, lz);
      p[axis] += t * grid.spacing;
    }
    const auto [it, inserted] = weld.emplace(key, static_cast<int>(verts.size()));
    if (inserted) verts.push_back(p);
    return it->second;
  };

  for (int z = 0; z + 1 < nz; ++z) {
    for (int y = 0; y + 1 < ny; ++y) {
      for (int x = 0; x + 1 < nx; ++x) {
        int cube = 0;
        for (int c = 0; c < 8; ++c) {
          const auto& o = detail::kCorner[c];
          if (grid.at(x + o[0], y + o[1], z + o[2]) < iso) cube |= 1 << c;
        }
        if (detail::kMcEdgeTable[cube] == 0) continue;
        const auto& tris = detail::kMcTriTable[cube];
        for (int k = 0; tris[k] != -1; k += 3) {
          const int a = vertex_on_edge(x, y, z, tris[k]);
          const int b = vertex_on_edge(x, y, z, tris[k + 1]);
          const int c = vertex_on_edge(x, y, z, tris[k + 2]);
          faces.push_back({a, b, c});
        }
      }
    }
  }
  if (faces.empty()) fail(ErrorCode::EmptySurface, "no grid cell straddles the iso level");
  TriMesh mesh = detail::compact_mesh(verts, faces);
  if (mesh.faces.empty()) fail(ErrorCode::EmptySurface, "iso surface degenerates to zero area");
  return mesh;
}

// Largest connected component by face count; ties go to the component
// holding the lower-numbered face.
inline TriMesh largest_component(const TriMesh& mesh) {
  const auto comp = mesh.vertex_components();
  std::unordered_map<int, std::size_t> count;
  std::unordered_map<int, std::size_t> first;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const int c = comp[mesh.faces[f][0]];
    ++count[c];
    first.emplace(c, f);
  }
  int best = -1;
  for (const auto& [c, n] : count) {
    if (best < 0 || n > count[best] || (n == count[best] && first[c] < first[best])) best = c;
  }
  std::vector<Face> kept;
  for (const auto& f : mesh.faces) {
    if (comp[f[0]] == best) kept.push_back(f);
  }
  return detail::compact_mesh(mesh.rest, kept);
}

// Samples the Gaussian mixture density on a grid covering the Gaussians'
// centers plus a 3x max-scale margin; the longest axis gets `resolution`
// samples.
inline DensityGrid density_grid(const std::vector<Gaussian3D>& gaussians, int resolution) {
  if (gaussians.empty()) fail(ErrorCode::InvalidArgument, "density grid needs at least one Gaussian");
  if (resolution < 2) fail(ErrorCode::InvalidArgument, "grid resolution must be at least 2");
  const auto order = detail::canonical_order(gaussians);
  std::vector<detail::DensityKernel> kernels;
  kernels.reserve(order.size());
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
  double max_scale = 0.0;
  for (std::size_t i : order) {
    kernels.push_back(detail::density_kernel(gaussians[i]));
    lo = lo.cwiseMin(gaussians[i].mu);
    hi = hi.cwiseMax(gaussians[i].mu);
    max_scale = std::max(max_scale, gaussians[i].scale().maxCoeff());
  }
  lo.array() -= 3.0 * max_scale;
  hi.array() += 3.0 * max_scale;
  const Vec3 extent = hi - lo;
  const double h = std::max(extent.maxCoeff(), 1e-9) / (resolution - 1);
  std::array<int, 3> dims;
  for (int k = 0; k < 3; ++k) dims[k] = std::max(2, static_cast<int>(std::ceil(extent[k] / h - 1e-9)) + 1);
  DensityGrid grid(lo, h, dims);

  parallel_for(0, dims[2], [&](int z) {
    const double pz = lo.z() + h * z;
    for (const auto& k : kernels) {
      if (std::abs(pz - k.mu.z()) > k.half_extent.z()) continue;
      const int x0 = std::max(0, static_cast<int>(std::ceil((k.mu.x() - k.half_extent.x() - lo.x()) / h)));
      const int x1 = std::min(dims[0] - 1, static_cast<int>(std::floor((k.mu.x() + k.half_extent.x() - lo.x()) / h)));
      const int y0 = std::max(0, static_cast<int>(std::ceil((k.mu.y() - k.half_extent.y() - lo.y()) / h)));
      const int y1 = std::min(dims[1] - 1, static_cast<int>(std::floor((k.mu.y() + k.half_extent.y() - lo.y()) / h)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) grid.at(x, y, z) += detail::kernel_value(k, grid.position(x, y, z));
      }
    }
  });
  return grid;
}

// Grid sample at the given quantile among the strictly positive samples.
inline double positive_quantile(const std::vector<double>& values, double q) {
  std::vector<double> pos;
  for (double v : values) {
    if (v > 0.0) pos.push_back(v);
  }
  if (pos.empty()) fail(ErrorCode::EmptySurface, "density grid has no positive samples");
  const auto k = static_cast<std::size_t>(std::floor(std::clamp(q, 0.0, 1.0) * static_cast<double>(pos.size() - 1)));
  std::nth_element(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(k), pos.end());
  return pos[k];
}

// Closed static mesh from the Gaussians: density grid, iso at the positive
// sample quantile, marching cubes, largest component.
inline TriMesh extract_mesh(const std::vector<Gaussian3D>& gaussians, int resolution = 128,
                            double iso_quantile = 0.3) {
  const DensityGrid grid = density_grid(gaussians, resolution);
  const double iso = positive_quantile(grid.values, iso_quantile);
  // A zero border keeps the surface closed where the density reaches the box.
  DensityGrid padded(grid.origin - Vec3::Constant(grid.spacing), grid.spacing,
                     {grid.dims[0] + 2, grid.dims[1] + 2, grid.dims[2] + 2});
  for (int z = 0; z < grid.dims[2]; ++z) {
    for (int y = 0; y < grid.dims[1]; ++y) {
      for (int x = 0; x < grid.dims[0]; ++x) padded.at(x + 1, y + 1, z + 1) = grid.at(x, y, z);
    }
  }
  return largest_component(marching_cubes(padded, iso));
}

// Dart throwing over mesh vertices in a seeded random order.
inline HandleSet poisson_disk_handles(const TriMesh& mesh, int target_count, std::uint64_t seed) {
  if (target_count < 1) fail(ErrorCode::InvalidArgument, "target handle count must be at least 1");
  std::vector<char> used(mesh.vertex_count(), 0);
  for (const auto& f : mesh.faces) {
    for (int v : f) used[v] = 1;
  }
  std::vector<int> order;
  for (std::size_t v = 0; v < used.size(); ++v) {
    if (used[v]) order.push_back(static_cast<int>(v));
  }
  if (order.empty()) fail(ErrorCode::InvalidArgument, "mesh has no faces");
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  HandleSet out;
  out.separation = std::sqrt(mesh.total_area() / target_count) * 0.7;
  auto sweep = [&] {
    for (int v : order) {
      if (static_cast<int>(out.vertices.size()) >= target_count) return;
      bool ok = true;
      for (int h : out.vertices) {
        if (h == v || (mesh.rest[h] - mesh.rest[v]).norm() < out.separation) {
          ok = false;
          break;
        }
      }
      if (ok) out.vertices.push_back(v);
    }
  };
  sweep();
  if (2 * static_cast<int>(out.vertices.size()) < target_count) {
    out.separation *= 0.5;
    sweep();
  }
  return out;
}

}  // namespace mags
