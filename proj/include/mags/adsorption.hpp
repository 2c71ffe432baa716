#pragma once

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "geom.hpp"
#include "mesh.hpp"
#include "parallel.hpp"
#include "splatting.hpp"

namespace mags {

// A Gaussian bound to one facet. `alpha` holds one placement logit per facet
// vertex; `d_alpha` and `d_mu` are the hover offsets written by the relative
// deformation field.
struct MeshAdsorbedGaussian {
  int facet = 0;
  Vec3 alpha = Vec3::Zero();
  Gaussian3D base;
  Vec3 d_alpha = Vec3::Zero();
  Vec3 d_mu = Vec3::Zero();
};

struct BakeOptions {
  bool use_hover = true;
  // Scale by sqrt(area ratio) instead of the raw ratio.
  bool sqrt_area_scale = false;
};

namespace detail {
inline Vec3 sigmoid3(const Vec3& a) { return {sigmoid(a[0]), sigmoid(a[1]), sigmoid(a[2])}; }

inline std::array<Vec3, 3> facet_vertices(const std::vector<Vec3>& v, const Face& f) {
  return {v[f[0]], v[f[1]], v[f[2]]};
}
}  // namespace detail

inline Vec3 adsorbed_mu(const Vec3& v1, const Vec3& v2, const Vec3& v3, const Vec3& alpha) {
  const Vec3 w = detail::sigmoid3(alpha);
  return (w[0] * v1 + w[1] * v2 + w[2] * v3) / w.sum();
}

inline Vec3 hovered_mu(const Vec3& v1, const Vec3& v2, const Vec3& v3, const Vec3& alpha, const Vec3& d_alpha,
                       const Vec3& d_mu) {
  return adsorbed_mu(v1, v2, v3, alpha + d_alpha) + d_mu;
}

inline double facet_cross_norm(const Vec3& v1, const Vec3& v2, const Vec3& v3) {
  return (v2 - v1).cross(v3 - v1).norm();
}

/// Multiplies every scale component by the facet's area ratio (deformed over
/// rest). Throws CollapsedFacet when the deformed facet has no area.
inline Vec3 transfer_scale(const Vec3& s, const std::array<Vec3, 3>& rest, const std::array<Vec3, 3>& deformed) {
  const double after = facet_cross_norm(deformed[0], deformed[1], deformed[2]);
  if (after < 1e-12) fail(ErrorCode::CollapsedFacet, "deformed facet has zero area");
  return s * (after / facet_cross_norm(rest[0], rest[1], rest[2]));
}

inline Mat3 facet_basis(const Vec3& v1, const Vec3& v2, const Vec3& v3) {
  const Vec3 e1 = v2 - v1;
  const Vec3 e2 = v3 - v1;
  return gram_schmidt_basis(e1, e2, e1.cross(e2));
}

inline Mat3 facet_rotation(const std::array<Vec3, 3>& rest, const std::array<Vec3, 3>& deformed) {
  return relative_rotation(facet_basis(rest[0], rest[1], rest[2]),
                           facet_basis(deformed[0], deformed[1], deformed[2]));
}

inline Quat transfer_rotation(const Quat& q, const std::array<Vec3, 3>& rest, const std::array<Vec3, 3>& deformed) {
  return compose(q, facet_rotation(rest, deformed));
}

/// Converts adsorbed Gaussians into standard ones on the mesh's deformed
/// pose. Position follows the (hovered) sigmoid-barycentric rule, scale the
/// facet area ratio and rotation the facet's frame change; opacity and color
/// are copied. A facet whose deformed pose equals its rest pose bitwise
/// passes scale and rotation through untouched.
inline std::vector<Gaussian3D> bake(const TriMesh& mesh, const std::vector<MeshAdsorbedGaussian>& gaussians,
                                    const BakeOptions& opt = {}) {
  std::vector<Gaussian3D> out(gaussians.size());
  parallel_for(0, gaussians.size(), [&](std::size_t i) {
    const auto& ag = gaussians[i];
    const Face& f = mesh.faces[ag.facet];
    const auto rest = detail::facet_vertices(mesh.rest, f);
    const auto def = detail::facet_vertices(mesh.deformed, f);
    Gaussian3D g = ag.base;
    g.mu = opt.use_hover ? hovered_mu(def[0], def[1], def[2], ag.alpha, ag.d_alpha, ag.d_mu)
                         : adsorbed_mu(def[0], def[1], def[2], ag.alpha);
    if (rest != def) {
      try {
        const double after = facet_cross_norm(def[0], def[1], def[2]);
        if (after < 1e-12) fail(ErrorCode::CollapsedFacet, "deformed facet has zero area");
        const double ratio = after / facet_cross_norm(rest[0], rest[1], rest[2]);
        g.log_scale = ag.base.log_scale + Vec3::Constant(opt.sqrt_area_scale ? 0.5 * std::log(ratio) : std::log(ratio));
        g.rot = transfer_rotation(ag.base.rot, rest, def);
      } catch (const Error& e) {
        throw Error(e.code(), std::string(e.what()) + " (facet " + std::to_string(ag.facet) + ")");
      }
    }
    out[i] = std::move(g);
  });
  return out;
}

struct AdsorbedGrad {
  Vec3 alpha = Vec3::Zero();
  Vec3 d_alpha = Vec3::Zero();
  Vec3 d_mu = Vec3::Zero();
  Vec4 rot = Vec4::Zero();
  Vec3 log_scale = Vec3::Zero();
  double opacity_logit = 0.0;
  std::vector<Vec3> sh;
};

struct BakeGrad {
  std::vector<Vec3> deformed;  // per vertex
  std::vector<Vec3> rest;      // per vertex
  std::vector<AdsorbedGrad> gaussians;
};

namespace detail {

// Gradient of log|(v2-v1) x (v3-v1)| w.r.t. the three vertices, scaled by g.
inline std::array<Vec3, 3> log_area_backward(const std::array<Vec3, 3>& v, double g) {
  const Vec3 e1 = v[1] - v[0];
  const Vec3 e2 = v[2] - v[0];
  const Vec3 n = e1.cross(e2);
  const double len = n.norm();
  const Vec3 nh = n / len;
  const Vec3 d2 = g * e2.cross(nh) / len;
  const Vec3 d3 = g * nh.cross(e1) / len;
  return {-(d2 + d3), d2, d3};
}

// Backward of facet_basis given dL/dBasis; the third column is treated as
// the cross product of the first two.
inline std::array<Vec3, 3> facet_basis_backward(const std::array<Vec3, 3>& v, const Mat3& d_basis) {
  const Vec3 e1 = v[1] - v[0];
  const Vec3 e2 = v[2] - v[0];
  const double n1 = e1.norm();
  const Vec3 t = e1 / n1;
  const Vec3 u = e2 - t.dot(e2) * t;
  const double nu = u.norm();
  const Vec3 b = u / nu;
  Vec3 d_t = d_basis.col(0);
  Vec3 d_b = d_basis.col(1);
  const Vec3 d_n = d_basis.col(2);
  d_t += b.cross(d_n);
  d_b += d_n.cross(t);
  const Vec3 d_u = (d_b - b * b.dot(d_b)) / nu;
  const Vec3 d_e2 = d_u - t * t.dot(d_u);
  d_t += -(t.dot(e2) * d_u + e2 * t.dot(d_u));
  const Vec3 d_e1 = (d_t - t * t.dot(d_t)) / n1;
  return {-(d_e1 + d_e2), d_e1, d_e2};
}

}  // namespace detail

/// Reverse-mode pass of bake(): maps per-baked-Gaussian gradients back onto
/// both vertex buffers, the placement logits, the hover offsets and the base
/// appearance. Vertex gradients are reduced in Gaussian order.
inline BakeGrad bake_backward(const TriMesh& mesh, const std::vector<MeshAdsorbedGaussian>& gaussians,
                              const std::vector<GaussianGrad>& baked_grads, const BakeOptions& opt = {}) {
  struct Local {
    std::array<Vec3, 3> d_def{Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
    std::array<Vec3, 3> d_rest{Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
  };
  BakeGrad out;
  out.deformed.assign(mesh.vertex_count(), Vec3::Zero());
  out.rest.assign(mesh.vertex_count(), Vec3::Zero());
  out.gaussians.resize(gaussians.size());
  std::vector<Local> local(gaussians.size());
  parallel_for(0, gaussians.size(), [&](std::size_t i) {
    const auto& ag = gaussians[i];
    const GaussianGrad& gg = baked_grads[i];
    AdsorbedGrad& ga = out.gaussians[i];
    Local& lg = local[i];
    const Face& f = mesh.faces[ag.facet];
    const auto rest = detail::facet_vertices(mesh.rest, f);
    const auto def = detail::facet_vertices(mesh.deformed, f);

    // Position.
    const Vec3 logits = opt.use_hover ? Vec3(ag.alpha + ag.d_alpha) : ag.alpha;
    const Vec3 w = detail::sigmoid3(logits);
    const double wsum = w.sum();
    const Vec3 mu0 = (w[0] * def[0] + w[1] * def[1] + w[2] * def[2]) / wsum;
    for (int k = 0; k < 3; ++k) {
      lg.d_def[k] += (w[k] / wsum) * gg.mu;
      const double d_w = (def[k] - mu0).dot(gg.mu) / wsum;
      const double d_logit = d_w * w[k] * (1.0 - w[k]);
      ga.alpha[k] = d_logit;
      if (opt.use_hover) ga.d_alpha[k] = d_logit;
    }
    if (opt.use_hover) ga.d_mu = gg.mu;

    ga.opacity_logit = gg.opacity_logit;
    ga.sh = gg.sh;
    ga.log_scale = gg.log_scale;

    if (rest == def) {
      ga.rot = gg.rot;
      return;
    }
    // Scale: log s' = log s + c * (log|n'| - log|n|).
    const double c = opt.sqrt_area_scale ? 0.5 : 1.0;
    const double d_log_ratio = c * gg.log_scale.sum();
    const auto d_def_area = detail::log_area_backward(def, d_log_ratio);
    const auto d_rest_area = detail::log_area_backward(rest, -d_log_ratio);
    // Rotation: R_final = R* R_q, R* = O' O^T.
    const Mat3 basis_rest = facet_basis(rest[0], rest[1], rest[2]);
    const Mat3 basis_def = facet_basis(def[0], def[1], def[2]);
    const Mat3 r_star = relative_rotation(basis_rest, basis_def);
    const Mat3 r_q = quat_to_matrix(ag.base.rot.normalized());
    const Mat3& d_final = gg.rotation_matrix;
    ga.rot = quat_to_matrix_backward(ag.base.rot, r_star.transpose() * d_final);
    const Mat3 d_star = d_final * r_q.transpose();
    const auto d_def_basis = detail::facet_basis_backward(def, d_star * basis_rest);
    const auto d_rest_basis = detail::facet_basis_backward(rest, d_star.transpose() * basis_def);
    for (int k = 0; k < 3; ++k) {
      lg.d_def[k] += d_def_area[k] + d_def_basis[k];
      lg.d_rest[k] += d_rest_area[k] + d_rest_basis[k];
    }
  });
  for (std::size_t i = 0; i < gaussians.size(); ++i) {
    const Face& f = mesh.faces[gaussians[i].facet];
    for (int k = 0; k < 3; ++k) {
      out.deformed[f[k]] += local[i].d_def[k];
      out.rest[f[k]] += local[i].d_rest[k];
    }
  }
  return out;
}

struct AdsorbInit {
  int count_per_facet = 1;
  std::uint64_t seed = 0;
  int sh_degree = 0;
};

/// Seeds `count_per_facet` Gaussians on every facet: alpha ~ N(0, 0.5^2),
/// isotropic scale 0.5 * sqrt(facet area), opacity logit 0.1, gray color,
/// base position on the rest pose.
inline std::vector<MeshAdsorbedGaussian> init_adsorbed(const TriMesh& mesh, const AdsorbInit& init) {
  if (init.count_per_facet < 1) fail(ErrorCode::InvalidArgument, "count_per_facet must be positive");
  mesh.validate();
  std::mt19937_64 rng(init.seed);
  std::normal_distribution<double> normal(0.0, 0.5);
  std::vector<MeshAdsorbedGaussian> out;
  out.reserve(mesh.face_count() * init.count_per_facet);
  for (std::size_t f = 0; f < mesh.face_count(); ++f) {
    const auto v = detail::facet_vertices(mesh.rest, mesh.faces[f]);
    const double area = TriMesh::facet_area(mesh.rest, mesh.faces[f]);
    for (int k = 0; k < init.count_per_facet; ++k) {
      MeshAdsorbedGaussian ag;
      ag.facet = static_cast<int>(f);
      ag.alpha = Vec3(normal(rng), normal(rng), normal(rng));
      ag.base.log_scale = Vec3::Constant(std::log(0.5 * std::sqrt(area)));
      ag.base.opacity_logit = 0.1;
      ag.base.sh.assign(sh_coeff_count(init.sh_degree), Vec3::Zero());
      ag.base.mu = adsorbed_mu(v[0], v[1], v[2], ag.alpha);
      out.push_back(std::move(ag));
    }
  }
  return out;
}

// Re-derives every base position from the rest pose and current logits.
inline void sync_base_positions(const TriMesh& mesh, std::vector<MeshAdsorbedGaussian>& gaussians) {
  for (auto& ag : gaussians) {
    const auto v = detail::facet_vertices(mesh.rest, mesh.faces[ag.facet]);
    ag.base.mu = adsorbed_mu(v[0], v[1], v[2], ag.alpha);
  }
}

}  // namespace mags
