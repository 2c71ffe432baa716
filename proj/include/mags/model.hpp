#pragma once

#include <vector>

#include "adsorption.hpp"
#include "arap.hpp"
#include "mesh.hpp"
#include "neural_fields.hpp"

namespace mags {

// Mesh, the Gaussians adsorbed on it and the relative deformation field that
// lets them hover.
struct MaGSModel {
  TriMesh mesh;
  std::vector<MeshAdsorbedGaussian> gaussians;
  RdfField rdf;
  bool use_rdf = true;

  void validate() const {
    mesh.validate();
    for (std::size_t i = 0; i < gaussians.size(); ++i) {
      const int f = gaussians[i].facet;
      if (f < 0 || static_cast<std::size_t>(f) >= mesh.face_count()) {
        fail(ErrorCode::InvalidArgument, "gaussian " + std::to_string(i) + " references facet " + std::to_string(f));
      }
    }
  }

  BakeOptions bake_options() const { return {use_rdf, false}; }
};

inline std::vector<RdfInput> rdf_inputs(const MaGSModel& m) {
  std::vector<RdfInput> ins(m.gaussians.size());
  for (std::size_t i = 0; i < ins.size(); ++i) {
    const auto& ag = m.gaussians[i];
    const Face& f = m.mesh.faces[ag.facet];
    ins[i].rest_centroid = (m.mesh.rest[f[0]] + m.mesh.rest[f[1]] + m.mesh.rest[f[2]]) / 3.0;
    ins[i].deformed = detail::facet_vertices(m.mesh.deformed, f);
    ins[i].alpha = ag.alpha;
  }
  return ins;
}

// Writes the hover offsets for the current V'. With the field disabled the
// offsets are cleared.
inline void update_hover(MaGSModel& m, ChunkedMlpCache* cache = nullptr) {
  if (!m.use_rdf) {
    for (auto& ag : m.gaussians) {
      ag.d_alpha.setZero();
      ag.d_mu.setZero();
    }
    return;
  }
  const auto out = rdf_query_batch(m.rdf, rdf_inputs(m), cache);
  for (std::size_t i = 0; i < out.size(); ++i) {
    m.gaussians[i].d_alpha = out[i].d_alpha;
    m.gaussians[i].d_mu = out[i].d_mu;
  }
}

inline std::vector<Gaussian3D> bake_model(const MaGSModel& m) { return bake(m.mesh, m.gaussians, m.bake_options()); }

struct ModelGrad {
  std::vector<Vec3> rest;
  std::vector<Vec3> deformed;
  std::vector<AdsorbedGrad> gaussians;  // alpha includes the path through the field input
  MlpGrad rdf;
};

/// Backward of update_hover + bake. `cache` must come from the update_hover
/// call that produced the current hover fields. `offset_grads`, when given,
/// adds a direct gradient on each predicted d_mu.
inline ModelGrad model_backward(const MaGSModel& m, const ChunkedMlpCache* cache,
                                const std::vector<GaussianGrad>& baked_grads,
                                const std::vector<Vec3>* offset_grads = nullptr) {
  BakeGrad bg = bake_backward(m.mesh, m.gaussians, baked_grads, m.bake_options());
  ModelGrad g;
  g.rest = std::move(bg.rest);
  g.deformed = std::move(bg.deformed);
  g.gaussians = std::move(bg.gaussians);
  g.rdf = m.rdf.net.zero_grad();
  if (!m.use_rdf || m.gaussians.empty()) return g;
  if (!cache) fail(ErrorCode::InvalidArgument, "model_backward needs the hover forward cache");

  const auto n = static_cast<Eigen::Index>(m.gaussians.size());
  MatX d_out(6, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& ga = g.gaussians[i];
    Vec3 dmu = ga.d_mu;
    if (offset_grads) dmu += (*offset_grads)[i];
    d_out.col(i) << ga.d_alpha, dmu;
  }
  const MatX d_x = mlp_backward_chunked(m.rdf.net, *cache, d_out, g.rdf);
  const auto ins = rdf_inputs(m);
  for (Eigen::Index i = 0; i < n; ++i) {
    const RdfInputGrad gi = m.rdf.encode_backward(ins[i], d_x.col(i).data());
    const Face& f = m.mesh.faces[m.gaussians[i].facet];
    for (int k = 0; k < 3; ++k) {
      g.rest[f[k]] += gi.rest_centroid / 3.0;
      g.deformed[f[k]] += gi.deformed[k];
    }
    g.gaussians[i].alpha += gi.alpha;
  }
  return g;
}

/// Handle targets at time t: rest position displaced by the deformation
/// field's positional delta.
inline std::vector<Vec3> handles_from_field(const TriMesh& mesh, const std::vector<int>& handles, const DfField& df,
                                            double t) {
  std::vector<Vec3> pos;
  pos.reserve(handles.size());
  for (int h : handles) {
    if (h < 0 || static_cast<std::size_t>(h) >= mesh.vertex_count()) {
      fail(ErrorCode::InvalidHandle, "handle vertex " + std::to_string(h) + " out of range");
    }
    pos.push_back(mesh.rest[h]);
  }
  const auto d = df_query_batch(df, pos, t);
  for (std::size_t k = 0; k < pos.size(); ++k) pos[k] += d[k].d_mu;
  return pos;
}

}  // namespace mags
