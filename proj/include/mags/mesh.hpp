#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "geom.hpp"

namespace mags {

using Face = std::array<int, 3>;

// Indexed triangle mesh with a rest pose and a deformed pose.
struct TriMesh {
  std::vector<Vec3> rest;
  std::vector<Face> faces;
  std::vector<Vec3> deformed;

  TriMesh() = default;
  TriMesh(std::vector<Vec3> vertices, std::vector<Face> f)
      : rest(std::move(vertices)), faces(std::move(f)), deformed(rest) {}

  std::size_t vertex_count() const { return rest.size(); }
  std::size_t face_count() const { return faces.size(); }

  void reset_deformation() { deformed = rest; }

  // Throws InvalidArgument on out-of-range indices, size mismatch or a rest
  // facet with area <= 1e-12.
  void validate() const {
    if (deformed.size() != rest.size()) fail(ErrorCode::InvalidArgument, "rest/deformed vertex counts differ");
    for (std::size_t f = 0; f < faces.size(); ++f) {
      for (int v : faces[f]) {
        if (v < 0 || static_cast<std::size_t>(v) >= rest.size()) {
          fail(ErrorCode::InvalidArgument, "face " + std::to_string(f) + " has an out-of-range vertex index");
        }
      }
      if (facet_area(rest, faces[f]) <= 1e-12) {
        fail(ErrorCode::InvalidArgument, "face " + std::to_string(f) + " is degenerate in the rest pose");
      }
    }
  }

  static double facet_area(const std::vector<Vec3>& v, const Face& f) {
    return 0.5 * (v[f[1]] - v[f[0]]).cross(v[f[2]] - v[f[0]]).norm();
  }

  double total_area() const {
    double a = 0.0;
    for (const auto& f : faces) a += facet_area(rest, f);
    return a;
  }

  // Unique undirected edges (i < j), sorted.
  std::vector<std::pair<int, int>> edges() const {
    std::set<std::pair<int, int>> set;
    for (const auto& f : faces) {
      for (int k = 0; k < 3; ++k) {
        const int a = f[k], b = f[(k + 1) % 3];
        set.insert({std::min(a, b), std::max(a, b)});
      }
    }
    return {set.begin(), set.end()};
  }

  // One-ring neighbors per vertex, sorted ascending.
  std::vector<std::vector<int>> neighbors() const {
    std::vector<std::vector<int>> adj(rest.size());
    for (const auto& [a, b] : edges()) {
      adj[a].push_back(b);
      adj[b].push_back(a);
    }
    for (auto& n : adj) std::sort(n.begin(), n.end());
    return adj;
  }

  // Component id per vertex (isolated vertices get their own component).
  std::vector<int> vertex_components() const {
    std::vector<int> parent(rest.size());
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int x) {
      while (parent[x] != x) x = parent[x] = parent[parent[x]];
      return x;
    };
    for (const auto& f : faces) {
      for (int k = 1; k < 3; ++k) {
        const int a = find(f[0]), b = find(f[k]);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
      }
    }
    std::map<int, int> ids;
    std::vector<int> comp(rest.size());
    for (std::size_t v = 0; v < rest.size(); ++v) {
      const int root = find(static_cast<int>(v));
      comp[v] = ids.emplace(root, static_cast<int>(ids.size())).first->second;
    }
    return comp;
  }

  int euler_characteristic() const {
    std::vector<char> used(rest.size(), 0);
    for (const auto& f : faces) {
      for (int v : f) used[v] = 1;
    }
    const long verts = std::count(used.begin(), used.end(), 1);
    return static_cast<int>(verts - static_cast<long>(edges().size()) + static_cast<long>(faces.size()));
  }

  // True when every edge is shared by exactly two faces.
  bool is_closed() const {
    std::map<std::pair<int, int>, int> count;
    for (const auto& f : faces) {
      for (int k = 0; k < 3; ++k) {
        const int a = f[k], b = f[(k + 1) % 3];
        ++count[{std::min(a, b), std::max(a, b)}];
      }
    }
    return std::all_of(count.begin(), count.end(), [](const auto& kv) { return kv.second == 2; });
  }

  Vec3 bbox_min() const {
    Vec3 m = Vec3::Constant(std::numeric_limits<double>::infinity());
    for (const auto& v : rest) m = m.cwiseMin(v);
    return m;
  }
  Vec3 bbox_max() const {
    Vec3 m = Vec3::Constant(-std::numeric_limits<double>::infinity());
    for (const auto& v : rest) m = m.cwiseMax(v);
    return m;
  }
  double bbox_diagonal() const { return rest.empty() ? 0.0 : (bbox_max() - bbox_min()).norm(); }
};

// Subdivided icosahedron projected onto a sphere, outward winding.
inline TriMesh make_icosphere(int subdivisions, double radius = 1.0, const Vec3& center = Vec3::Zero()) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                         {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (auto& p : v) p.normalize();
  std::vector<Face> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                         {11, 10, 2}, {10, 7, 6}, {7, 1, 8},   {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                         {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> mid;
    auto midpoint = [&](int a, int b) {
      const auto key = std::make_pair(std::min(a, b), std::max(a, b));
      const auto it = mid.find(key);
      if (it != mid.end()) return it->second;
      v.push_back((v[a] + v[b]).normalized());
      return mid[key] = static_cast<int>(v.size()) - 1;
    };
    std::vector<Face> next;
    next.reserve(f.size() * 4);
    for (const auto& tri : f) {
      const int ab = midpoint(tri[0], tri[1]), bc = midpoint(tri[1], tri[2]), ca = midpoint(tri[2], tri[0]);
      next.push_back({tri[0], ab, ca});
      next.push_back({tri[1], bc, ab});
      next.push_back({tri[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    f = std::move(next);
  }
  for (auto& p : v) p = center + radius * p;
  return TriMesh(std::move(v), std::move(f));
}

}  // namespace mags
