#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "adsorption.hpp"
#include "arap.hpp"
#include "losses.hpp"
#include "mesh_extract.hpp"
#include "model.hpp"
#include "neural_fields.hpp"
#include "optim.hpp"
#include "scene_io.hpp"
#include "splatting.hpp"

namespace mags {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  // Stage I
  int iterations = 40000;
  int warm_up = 3000;
  double position_lr_init = 1.6e-4;
  double position_lr_final = 1.6e-6;
  int position_lr_max_steps = 80000;
  double deform_lr_scale = 1.0;
  double feature_lr = 2.5e-3;
  double opacity_lr = 5e-2;
  double scaling_lr = 1e-3;
  double rotation_lr = 1e-3;
  double network_weight_decay = 5e-4;
  int network_warmup = 600;
  std::vector<std::int64_t> network_milestones = {10000, 20000};
  double dssim_weight = 0.2;
  int densify_from = 500;
  int densify_interval = 100;
  int densify_until = 50000;
  double densify_grad_threshold = 2e-4;
  double percent_dense = 0.01;
  double min_opacity = 0.005;
  int opacity_reset_interval = 3000;
  int init_points = 2000;
  double init_extent = 1.3;
  int sh_degree = 3;
  int hidden_width = 256;
  int depth = 8;
  int spatial_frequencies = 10;
  int temporal_frequencies = 6;
  // Stage II
  int stage2_iterations = 40000;
  double vertices_lr = 1.6e-4;
  double alpha_lr = 1e-4;
  int mesh_resolution = 128;
  double mesh_quantile = 0.3;
  int handle_count = 64;
  int gaussians_per_facet = 1;
  int arap_refresh = 50;
  int arap_iterations = 50;
  bool use_rdf = true;
  double rdf_offset_weight = 1e-2;
  // Both stages
  int eval_interval = 500;
  int checkpoint_interval = 1000;
  std::uint64_t seed = 0;

  void validate() const {
    for (double lr : {position_lr_init, position_lr_final, feature_lr, opacity_lr, scaling_lr, rotation_lr,
                      vertices_lr, alpha_lr, deform_lr_scale}) {
      if (!(lr > 0)) fail(ErrorCode::InvalidArgument, "learning rates must be positive");
    }
    if (iterations < 0 || stage2_iterations < 0) fail(ErrorCode::InvalidArgument, "iteration counts must be >= 0");
    if (iterations > 0 && warm_up >= iterations) fail(ErrorCode::InvalidArgument, "warm_up must be below iterations");
    if (sh_degree < 0 || sh_degree > kMaxShDegree) fail(ErrorCode::InvalidArgument, "sh_degree must be in 0..3");
    if (densify_interval <= 0 || eval_interval <= 0 || arap_refresh <= 0) {
      fail(ErrorCode::InvalidArgument, "intervals must be positive");
    }
    if (init_points < 1 || handle_count < 1 || gaussians_per_facet < 1 || mesh_resolution < 2) {
      fail(ErrorCode::InvalidArgument, "counts must be positive");
    }
  }

  // Reduced sizes for CPU runs on a 64x64 synthetic scene.
  static TrainConfig desk() {
    TrainConfig c;
    c.iterations = 5000;
    c.warm_up = 500;
    c.densify_until = 3000;
    c.densify_grad_threshold = 5e-4;
    c.deform_lr_scale = 5.0;
    c.network_milestones = {1500, 3000};
    c.init_points = 1000;
    c.sh_degree = 0;
    c.hidden_width = 64;
    c.temporal_frequencies = 3;
    c.stage2_iterations = 3000;
    c.mesh_resolution = 40;
    c.handle_count = 24;
    return c;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(
    TrainConfig, iterations, warm_up, position_lr_init, position_lr_final, position_lr_max_steps, deform_lr_scale,
    feature_lr, opacity_lr, scaling_lr, rotation_lr, network_weight_decay, network_warmup, network_milestones,
    dssim_weight, densify_from, densify_interval, densify_until, densify_grad_threshold, percent_dense, min_opacity,
    opacity_reset_interval, init_points, init_extent, sh_degree, hidden_width, depth, spatial_frequencies,
    temporal_frequencies, stage2_iterations, vertices_lr, alpha_lr, mesh_resolution, mesh_quantile, handle_count,
    gaussians_per_facet, arap_refresh, arap_iterations, use_rdf, rdf_offset_weight, eval_interval,
    checkpoint_interval, seed)

// Applies a JSON overlay; unknown keys are rejected.
inline TrainConfig overlay_config(const TrainConfig& base, const Json& overlay) {
  if (!overlay.is_object()) fail(ErrorCode::ParseError, "config overlay must be a JSON object");
  Json merged = base;
  for (const auto& [key, value] : overlay.items()) {
    if (!merged.contains(key)) fail(ErrorCode::SchemaError, "unknown config key '" + key + "'");
    merged[key] = value;
  }
  try {
    TrainConfig out = merged.get<TrainConfig>();
    out.validate();
    return out;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::SchemaError, std::string("config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Parameter groups

namespace detail {

enum GaussianGroup { kGroupMu, kGroupRot, kGroupScale, kGroupOpacity, kGroupSh, kGaussianGroups };

inline std::size_t group_width(int group, std::size_t ncoef) {
  switch (group) {
    case kGroupMu: return 3;
    case kGroupRot: return 4;
    case kGroupScale: return 3;
    case kGroupOpacity: return 1;
    default: return 3 * ncoef;
  }
}

inline void read_group(const Gaussian3D& g, int group, double* out) {
  switch (group) {
    case kGroupMu: std::copy_n(g.mu.data(), 3, out); break;
    case kGroupRot: out[0] = g.rot.w; out[1] = g.rot.x; out[2] = g.rot.y; out[3] = g.rot.z; break;
    case kGroupScale: std::copy_n(g.log_scale.data(), 3, out); break;
    case kGroupOpacity: out[0] = g.opacity_logit; break;
    default:
      for (std::size_t k = 0; k < g.sh.size(); ++k) std::copy_n(g.sh[k].data(), 3, out + 3 * k);
  }
}

inline void write_group(Gaussian3D& g, int group, const double* in) {
  switch (group) {
    case kGroupMu: g.mu = Vec3(in[0], in[1], in[2]); break;
    case kGroupRot: g.rot = Quat{in[0], in[1], in[2], in[3]}; break;
    case kGroupScale: g.log_scale = Vec3(in[0], in[1], in[2]); break;
    case kGroupOpacity: g.opacity_logit = in[0]; break;
    default:
      for (std::size_t k = 0; k < g.sh.size(); ++k) g.sh[k] = Vec3(in[3 * k], in[3 * k + 1], in[3 * k + 2]);
  }
}

inline void read_grad(const GaussianGrad& g, int group, std::size_t ncoef, double* out) {
  switch (group) {
    case kGroupMu: std::copy_n(g.mu.data(), 3, out); break;
    case kGroupRot: std::copy_n(g.rot.data(), 4, out); break;
    case kGroupScale: std::copy_n(g.log_scale.data(), 3, out); break;
    case kGroupOpacity: out[0] = g.opacity_logit; break;
    default:
      for (std::size_t k = 0; k < ncoef; ++k) {
        const Vec3 c = k < g.sh.size() ? g.sh[k] : Vec3::Zero();
        std::copy_n(c.data(), 3, out + 3 * k);
      }
  }
}

inline std::size_t coeffs(const std::vector<Gaussian3D>& gs) { return gs.empty() ? 1 : gs[0].sh.size(); }

// One Adam update of the listed groups of every Gaussian.
inline void gaussian_adam(std::vector<Gaussian3D>& gs, const std::vector<GaussianGrad>& grads,
                          std::array<AdamState, kGaussianGroups>& states, const std::array<double, kGaussianGroups>& lr,
                          int first_group = kGroupMu) {
  const std::size_t ncoef = coeffs(gs);
  for (int group = first_group; group < kGaussianGroups; ++group) {
    const std::size_t w = group_width(group, ncoef);
    std::vector<double> p(gs.size() * w), g(gs.size() * w);
    for (std::size_t i = 0; i < gs.size(); ++i) {
      read_group(gs[i], group, p.data() + i * w);
      read_grad(grads[i], group, ncoef, g.data() + i * w);
    }
    adam_step(states[group], p, g, lr[group]);
    for (std::size_t i = 0; i < gs.size(); ++i) write_group(gs[i], group, p.data() + i * w);
  }
}

inline std::vector<double> network_params(const MlpNetwork& net) {
  std::vector<double> out;
  out.reserve(net.parameter_count());
  net.for_each_block([&](const double* p, std::size_t n) { out.insert(out.end(), p, p + n); });
  return out;
}

inline void set_network_params(MlpNetwork& net, const std::vector<double>& values) {
  if (values.size() != net.parameter_count()) fail(ErrorCode::ShapeMismatch, "network parameter count mismatch");
  std::size_t o = 0;
  net.for_each_block([&](double* p, std::size_t n) {
    std::copy_n(values.begin() + o, n, p);
    o += n;
  });
}

inline std::vector<double> network_grads(const MlpGrad& g) {
  std::vector<double> out;
  for (std::size_t l = 0; l < g.weights.size(); ++l) {
    out.insert(out.end(), g.weights[l].data(), g.weights[l].data() + g.weights[l].size());
    out.insert(out.end(), g.biases[l].data(), g.biases[l].data() + g.biases[l].size());
  }
  return out;
}

inline void network_adam(MlpNetwork& net, const MlpGrad& grad, AdamState& st, double lr, double wd) {
  std::vector<double> p = network_params(net);
  adam_step(st, p, network_grads(grad), lr, wd);
  set_network_params(net, p);
}

inline std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline std::mt19937_64 rng_from(const std::string& s) {
  std::mt19937_64 rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) fail(ErrorCode::CorruptBlob, "checkpoint RNG state is unreadable");
  return rng;
}

inline void add_adam(Checkpoint& ck, const std::string& name, const AdamState& st) {
  const auto n = static_cast<std::int64_t>(st.m.size());
  ck.add(name + ".m", {n}, st.m);
  ck.add(name + ".v", {n}, st.v);
  ck.meta["adam_steps"][name] = st.step;
}

inline AdamState read_adam(const Checkpoint& ck, const std::string& name) {
  AdamState st;
  const std::size_t n = ck.blob(name + ".m").data.size();
  st.m = ck.values(name + ".m", n);
  st.v = ck.values(name + ".v", n);
  st.step = ck.meta.at("adam_steps").at(name).get<std::int64_t>();
  return st;
}

inline Json camera_json(const Camera& c) {
  Json rot = Json::array();
  for (int r = 0; r < 3; ++r) rot.push_back({c.rotation(r, 0), c.rotation(r, 1), c.rotation(r, 2)});
  return {{"rotation", rot},
          {"translation", {c.translation.x(), c.translation.y(), c.translation.z()}},
          {"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy},
          {"width", c.width}, {"height", c.height}, {"znear", c.znear}, {"zfar", c.zfar}};
}

inline Camera camera_from_json(const Json& j) {
  Camera c;
  for (int r = 0; r < 3; ++r) {
    for (int k = 0; k < 3; ++k) c.rotation(r, k) = j.at("rotation")[r][k].get<double>();
  }
  for (int k = 0; k < 3; ++k) c.translation[k] = j.at("translation")[k].get<double>();
  c.fx = j.at("fx");
  c.fy = j.at("fy");
  c.cx = j.at("cx");
  c.cy = j.at("cy");
  c.width = j.at("width");
  c.height = j.at("height");
  c.znear = j.at("znear");
  c.zfar = j.at("zfar");
  return c;
}

}  // namespace detail

inline void add_network(Checkpoint& ck, const std::string& prefix, const MlpNetwork& net) {
  for (int l = 0; l < net.layers(); ++l) {
    const MatX& w = net.weight(l);
    ck.add(prefix + ".w" + std::to_string(l), {w.rows(), w.cols()}, {w.data(), w.data() + w.size()});
    const VecX& b = net.bias(l);
    ck.add(prefix + ".b" + std::to_string(l), {b.size()}, {b.data(), b.data() + b.size()});
  }
}

inline void read_network(const Checkpoint& ck, const std::string& prefix, MlpNetwork& net) {
  for (int l = 0; l < net.layers(); ++l) {
    MatX& w = net.weight(l);
    const auto wv = ck.values(prefix + ".w" + std::to_string(l), static_cast<std::size_t>(w.size()));
    std::copy(wv.begin(), wv.end(), w.data());
    VecX& b = net.bias(l);
    const auto bv = ck.values(prefix + ".b" + std::to_string(l), static_cast<std::size_t>(b.size()));
    std::copy(bv.begin(), bv.end(), b.data());
  }
}

inline Json df_json(const DfField& df) {
  return {{"sh_degree", df.sh_degree}, {"hidden", df.net.config().hidden_width}, {"depth", df.net.config().depth},
          {"spatial", df.spatial.num_frequencies}, {"temporal", df.temporal.num_frequencies}};
}

inline DfField read_df(const Checkpoint& ck, const std::string& prefix = "df") {
  const Json& j = ck.meta.at(prefix);
  DfField df(j.at("sh_degree"), j.at("hidden"), j.at("depth"), 0, {j.at("spatial").get<int>(), true},
             {j.at("temporal").get<int>(), true});
  read_network(ck, prefix, df.net);
  return df;
}

// Mean and radius (x1.1) of the camera centers, as used for learning-rate and
// densification scales.
inline double scene_extent(const Dataset& ds) {
  Vec3 c = Vec3::Zero();
  for (const auto& f : ds.frames) c += f.camera.position();
  c /= std::max<std::size_t>(1, ds.frames.size());
  double r = 0.0;
  for (const auto& f : ds.frames) r = std::max(r, (f.camera.position() - c).norm());
  return 1.1 * std::max(r, 1e-6);
}

// ---------------------------------------------------------------------------
// Adaptive density control

struct DensifyStats {
  std::vector<double> grad_accum;
  std::vector<double> denom;

  void resize(std::size_t n) {
    grad_accum.assign(n, 0.0);
    denom.assign(n, 0.0);
  }
};

struct DensifyParams {
  double grad_threshold = 2e-4;
  double percent_dense = 0.01;
  double extent = 1.0;
  double min_opacity = 0.005;
};

struct DensifyResult {
  std::vector<int> source;  // per output Gaussian: input index or -1 for a new one
  int cloned = 0;
  int split = 0;
  int pruned = 0;
};

/// Clones small and splits large Gaussians whose mean screen-space gradient
/// exceeds the threshold, then prunes nearly transparent ones.
inline DensifyResult densify_and_prune(std::vector<Gaussian3D>& gs, const DensifyStats& stats,
                                       const DensifyParams& p, std::mt19937_64& rng) {
  DensifyResult res;
  const std::size_t n = gs.size();
  std::vector<Gaussian3D> out;
  std::vector<int> src;
  std::vector<char> hot(n, 0), big(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double mean = stats.denom[i] > 0 ? stats.grad_accum[i] / stats.denom[i] : 0.0;
    hot[i] = mean > p.grad_threshold;
    big[i] = gs[i].scale().maxCoeff() > p.percent_dense * p.extent;
  }
  // Survivors keep their slot order; clones then split children follow.
  for (std::size_t i = 0; i < n; ++i) {
    if (hot[i] && big[i]) continue;
    out.push_back(gs[i]);
    src.push_back(static_cast<int>(i));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (hot[i] && !big[i]) {
      out.push_back(gs[i]);
      src.push_back(-1);
      ++res.cloned;
    }
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(hot[i] && big[i])) continue;
    const Vec3 s = gs[i].scale();
    const Mat3 r = quat_to_matrix(gs[i].rot.normalized());
    for (int child = 0; child < 2; ++child) {
      Gaussian3D c = gs[i];
      const Vec3 offset(normal(rng) * s.x(), normal(rng) * s.y(), normal(rng) * s.z());
      c.mu = gs[i].mu + r * offset;
      c.log_scale = (s / 1.6).array().log();
      out.push_back(c);
      src.push_back(-1);
    }
    ++res.split;
  }
  std::vector<Gaussian3D> kept;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].opacity() < p.min_opacity) {
      ++res.pruned;
      continue;
    }
    kept.push_back(std::move(out[i]));
    res.source.push_back(src[i]);
  }
  gs = std::move(kept);
  return res;
}

// Caps every opacity at 0.01; returns the rows that changed.
inline std::vector<int> reset_opacity(std::vector<Gaussian3D>& gs, double cap = 0.01) {
  std::vector<int> rows;
  for (std::size_t i = 0; i < gs.size(); ++i) {
    if (gs[i].opacity() > cap) {
      gs[i].opacity_logit = logit(cap);
      rows.push_back(static_cast<int>(i));
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Models

struct Stage1Model {
  std::vector<Gaussian3D> gaussians;
  DfField df;
  Vec3 background = Vec3::Zero();
};

// Gaussians at time t; the field input is the canonical position.
inline std::vector<Gaussian3D> deform_at(const std::vector<Gaussian3D>& gs, const DfField& df, double t,
                                         std::vector<DfOutput>* deltas = nullptr, ChunkedMlpCache* cache = nullptr) {
  std::vector<Vec3> mus(gs.size());
  for (std::size_t i = 0; i < gs.size(); ++i) mus[i] = gs[i].mu;
  const auto d = df_query_batch(df, mus, t, cache);
  std::vector<Gaussian3D> out(gs.size());
  for (std::size_t i = 0; i < gs.size(); ++i) out[i] = apply_df(gs[i], d[i]);
  if (deltas) *deltas = d;
  return out;
}

struct Stage2Model {
  MaGSModel model;
  DfField df;
  std::vector<int> handles;
  ArapOptions arap;
  Vec3 background = Vec3::Zero();
};

// Deforms the mesh to time t (field-driven handles, cold ARAP solve), then
// refreshes the hover offsets.
inline ArapSolution pose_at_time(Stage2Model& m, double t, const ArapSolver* solver = nullptr) {
  std::optional<ArapSolver> own;
  if (!solver) solver = &own.emplace(m.model.mesh, m.handles, m.arap);
  const auto targets = handles_from_field(m.model.mesh, m.handles, m.df, t);
  ArapSolution sol = solver->solve(m.model.mesh.rest, targets);
  m.model.mesh.deformed = sol.deformed;
  update_hover(m.model);
  return sol;
}

struct EvalRecord {
  double psnr = 0.0;
  double ssim = 0.0;
  double loss = 0.0;
};

inline Json metric_json(int iteration, const std::string& stage, const std::string& split, const EvalRecord& r) {
  return {{"iteration", iteration}, {"stage", stage}, {"split", split}, {"psnr", r.psnr}, {"ssim", r.ssim}, {"loss", r.loss}};
}

inline EvalRecord average(const std::vector<EvalRecord>& rs) {
  EvalRecord a;
  for (const auto& r : rs) {
    a.psnr += r.psnr;
    a.ssim += r.ssim;
    a.loss += r.loss;
  }
  if (!rs.empty()) {
    a.psnr /= rs.size();
    a.ssim /= rs.size();
    a.loss /= rs.size();
  }
  return a;
}

inline EvalRecord score(const Image& render, const Image& gt, double dssim_weight) {
  const auto l = image_loss(render, gt, dssim_weight);
  return {psnr(render, gt), l.ssim, l.loss};
}

struct RunHooks {
  std::function<void(const Json&)> on_metric;
  std::function<void(const Checkpoint&)> on_checkpoint;
};

// ---------------------------------------------------------------------------
// Stage I

class Stage1Trainer {
 public:
  Stage1Trainer(const Dataset& ds, const TrainConfig& cfg) : ds_(&ds), cfg_(cfg), rng_(cfg.seed) {
    cfg_.validate();
    ds.validate();
    train_ = ds.indices(Split::Train);
    if (train_.size() < 2 && ds.frames.size() < 2) fail(ErrorCode::EmptyDataset, "stage I needs at least two frames");
    if (train_.empty()) fail(ErrorCode::EmptyDataset, "dataset has no training frames");
    extent_ = scene_extent(ds);
    model_.background = ds.background;
    model_.df = DfField(cfg_.sh_degree, cfg_.hidden_width, cfg_.depth, cfg_.seed + 1,
                        {cfg_.spatial_frequencies, true}, {cfg_.temporal_frequencies, true});
    model_.gaussians = random_init();
    stats_.resize(model_.gaussians.size());
  }

  const Stage1Model& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }
  int iteration() const { return iteration_; }
  double extent() const { return extent_; }
  bool deforming() const { return iteration_ >= cfg_.warm_up; }

  // Gaussians as rendered at time t in the current phase.
  std::vector<Gaussian3D> scene_at(double t) const {
    return deforming() ? deform_at(model_.gaussians, model_.df, t) : model_.gaussians;
  }

  double step() {
    const int it = iteration_;
    const Frame& frame = ds_->frames[train_[std::uniform_int_distribution<std::size_t>(0, train_.size() - 1)(rng_)]];
    const bool use_df = it >= cfg_.warm_up;
    std::vector<DfOutput> deltas;
    ChunkedMlpCache cache;
    const std::vector<Gaussian3D> scene =
        use_df ? deform_at(model_.gaussians, model_.df, frame.time, &deltas, &cache) : model_.gaussians;
    RasterState st;
    const RenderOutput out = rasterize(scene, frame.camera, model_.background, &st);
    const LossResult loss = image_loss(out.color, frame.image, cfg_.dssim_weight);
    std::vector<GaussianGrad> grads = rasterize_backward(scene, st, loss.grad);

    if (use_df) {
      const auto n = static_cast<Eigen::Index>(scene.size());
      MatX d_out(model_.df.output_width(), n);
      for (Eigen::Index i = 0; i < n; ++i) {
        auto [base, dd] = apply_df_backward(model_.gaussians[i], deltas[i], grads[i]);
        model_.df.pack(dd, d_out.col(i).data());
        base.mean2d = grads[i].mean2d;
        grads[i] = std::move(base);
      }
      MlpGrad g = model_.df.net.zero_grad();
      if (n > 0) mlp_backward_chunked(model_.df.net, cache, d_out, g);
      const double lr = network_lr(cfg_.position_lr_init * cfg_.deform_lr_scale, it - cfg_.warm_up,
                                   cfg_.network_warmup, cfg_.network_milestones);
      detail::network_adam(model_.df.net, g, df_adam_, lr, cfg_.network_weight_decay);
    }
    const std::array<double, detail::kGaussianGroups> lr = {
        exponential_lr(cfg_.position_lr_init * extent_, cfg_.position_lr_final * extent_, it,
                       cfg_.position_lr_max_steps),
        cfg_.rotation_lr, cfg_.scaling_lr, cfg_.opacity_lr, cfg_.feature_lr};
    detail::gaussian_adam(model_.gaussians, grads, adam_, lr);

    ++iteration_;
    const int it1 = iteration_;
    if (it1 < cfg_.densify_until) {
      const double hw = 0.5 * frame.camera.width, hh = 0.5 * frame.camera.height;
      for (std::size_t i = 0; i < scene.size(); ++i) {
        if (!st.splats[i].visible) continue;
        stats_.grad_accum[i] += Vec2(grads[i].mean2d.x() * hw, grads[i].mean2d.y() * hh).norm();
        stats_.denom[i] += 1.0;
      }
      if (it1 > cfg_.densify_from && it1 % cfg_.densify_interval == 0) densify();
      if (cfg_.opacity_reset_interval > 0 && it1 % cfg_.opacity_reset_interval == 0) {
        adam_[detail::kGroupOpacity].reset_rows(reset_opacity(model_.gaussians), 1);
      }
    }
    return loss.loss;
  }

  EvalRecord evaluate() const {
    std::vector<EvalRecord> rs;
    for (int idx : eval_frames()) {
      const Frame& f = ds_->frames[idx];
      rs.push_back(score(rasterize(scene_at(f.time), f.camera, model_.background).color, f.image, cfg_.dssim_weight));
    }
    return average(rs);
  }

  void run(const RunHooks& hooks = {}) {
    while (iteration_ < cfg_.iterations) {
      step();
      if (iteration_ % cfg_.eval_interval == 0 || iteration_ == cfg_.iterations) {
        if (hooks.on_metric) hooks.on_metric(metric_json(iteration_, "stage1", "test", evaluate()));
      }
      if (cfg_.checkpoint_interval > 0 && iteration_ % cfg_.checkpoint_interval == 0 && iteration_ < cfg_.iterations) {
        const Checkpoint ck = snapshot();
        if (hooks.on_checkpoint) hooks.on_checkpoint(ck);
      }
    }
  }

  // Serializes the state and continues from the stored (f32) values, so
  // a run resumed from the returned checkpoint matches this one bitwise.
  Checkpoint snapshot() {
    Checkpoint ck = to_checkpoint();
    const auto bytes = encode_checkpoint(ck);
    ck = decode_checkpoint(bytes);
    restore(ck);
    return ck;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.stage = "stage1";
    ck.meta["iteration"] = iteration_;
    ck.meta["rng"] = detail::rng_state(rng_);
    ck.meta["config"] = cfg_;
    ck.meta["extent"] = extent_;
    ck.meta["df"] = df_json(model_.df);
    ck.meta["background"] = {model_.background.x(), model_.background.y(), model_.background.z()};
    if (!ds_->frames.empty()) ck.meta["view"] = detail::camera_json(ds_->frames[0].camera);
    ck.meta["adam_steps"] = Json::object();
    add_gaussians(ck, "gaussians", model_.gaussians);
    add_network(ck, "df", model_.df.net);
    static const char* names[] = {"adam.mu", "adam.rot", "adam.scale", "adam.opacity", "adam.sh"};
    for (int g = 0; g < detail::kGaussianGroups; ++g) detail::add_adam(ck, names[g], adam_[g]);
    detail::add_adam(ck, "adam.df", df_adam_);
    const auto n = static_cast<std::int64_t>(stats_.grad_accum.size());
    ck.add("densify.accum", {n}, stats_.grad_accum);
    ck.add("densify.denom", {n}, stats_.denom);
    return ck;
  }

  static Stage1Trainer from_checkpoint(const Checkpoint& ck, const Dataset& ds) {
    if (ck.stage != "stage1") fail(ErrorCode::CheckpointError, "expected a stage1 checkpoint, got '" + ck.stage + "'");
    TrainConfig cfg = ck.meta.at("config").get<TrainConfig>();
    Stage1Trainer t(ds, cfg);
    t.restore(ck);
    return t;
  }

 private:
  void restore(const Checkpoint& ck) {
    iteration_ = ck.meta.at("iteration");
    rng_ = detail::rng_from(ck.meta.at("rng"));
    extent_ = ck.meta.at("extent");
    model_.gaussians = read_gaussians(ck, "gaussians");
    model_.df = read_df(ck);
    static const char* names[] = {"adam.mu", "adam.rot", "adam.scale", "adam.opacity", "adam.sh"};
    for (int g = 0; g < detail::kGaussianGroups; ++g) adam_[g] = detail::read_adam(ck, names[g]);
    df_adam_ = detail::read_adam(ck, "adam.df");
    const std::size_t n = model_.gaussians.size();
    stats_.grad_accum = ck.values("densify.accum", n);
    stats_.denom = ck.values("densify.denom", n);
  }

  std::vector<int> eval_frames() const {
    auto test = ds_->indices(Split::Test);
    return test.empty() ? train_ : test;
  }

  // Uniform points in a cube; scale from the mean squared distance to the
  // three nearest neighbours.
  std::vector<Gaussian3D> random_init() {
    std::uniform_real_distribution<double> u(-cfg_.init_extent, cfg_.init_extent);
    std::uniform_real_distribution<double> c(0.0, 1.0 / 255.0);
    std::vector<Gaussian3D> gs(cfg_.init_points);
    for (auto& g : gs) {
      g.mu = Vec3(u(rng_), u(rng_), u(rng_));
      g.sh.assign(sh_coeff_count(cfg_.sh_degree), Vec3::Zero());
      g.sh[0] = Vec3(c(rng_), c(rng_), c(rng_));
      g.opacity_logit = logit(0.1);
    }
    for (std::size_t i = 0; i < gs.size(); ++i) {
      std::array<double, 3> best = {1e30, 1e30, 1e30};
      for (std::size_t j = 0; j < gs.size(); ++j) {
        if (i == j) continue;
        const double d = (gs[i].mu - gs[j].mu).squaredNorm();
        if (d < best[2]) {
          best[2] = d;
          std::sort(best.begin(), best.end());
        }
      }
      double mean = 0.0;
      int k = 0;
      for (double b : best) {
        if (b < 1e29) {
          mean += b;
          ++k;
        }
      }
      mean = k ? mean / k : 0.01;
      gs[i].log_scale = Vec3::Constant(std::log(std::sqrt(std::max(mean, 1e-7))));
    }
    return gs;
  }

  void densify() {
    DensifyParams p{cfg_.densify_grad_threshold, cfg_.percent_dense, extent_, cfg_.min_opacity};
    const std::size_t ncoef = detail::coeffs(model_.gaussians);
    const DensifyResult r = densify_and_prune(model_.gaussians, stats_, p, rng_);
    for (int g = 0; g < detail::kGaussianGroups; ++g) adam_[g].remap(r.source, detail::group_width(g, ncoef));
    stats_.resize(model_.gaussians.size());
  }

  const Dataset* ds_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  std::vector<int> train_;
  double extent_ = 1.0;
  Stage1Model model_;
  std::array<AdamState, detail::kGaussianGroups> adam_;
  AdamState df_adam_;
  DensifyStats stats_;
  int iteration_ = 0;
};

inline Stage1Model read_stage1_model(const Checkpoint& ck) {
  if (ck.stage != "stage1") fail(ErrorCode::CheckpointError, "expected a stage1 checkpoint, got '" + ck.stage + "'");
  Stage1Model m;
  m.gaussians = read_gaussians(ck, "gaussians");
  m.df = read_df(ck);
  const auto& bg = ck.meta.at("background");
  m.background = Vec3(bg[0], bg[1], bg[2]);
  return m;
}

// ---------------------------------------------------------------------------
// Stage II

class Stage2Trainer {
 public:
  // Mesh from the Stage-I Gaussians (canonical pose).
  Stage2Trainer(const Dataset& ds, const TrainConfig& cfg, const Stage1Model& stage1)
      : Stage2Trainer(ds, cfg, extract_mesh(stage1.gaussians, cfg.mesh_resolution, cfg.mesh_quantile), stage1.df) {}

  Stage2Trainer(const Dataset& ds, const TrainConfig& cfg, TriMesh mesh, const DfField& df)
      : ds_(&ds), cfg_(cfg), rng_(cfg.seed + 2) {
    cfg_.validate();
    ds.validate();
    train_ = ds.indices(Split::Train);
    if (train_.empty()) fail(ErrorCode::EmptyDataset, "dataset has no training frames");
    extent_ = scene_extent(ds);
    model_.background = ds.background;
    model_.df = df;
    model_.arap.max_iterations = cfg_.arap_iterations;
    mesh.reset_deformation();
    model_.model.mesh = std::move(mesh);
    model_.model.mesh.validate();
    model_.handles = poisson_disk_handles(model_.model.mesh, cfg_.handle_count, cfg_.seed).vertices;
    model_.model.gaussians = init_adsorbed(model_.model.mesh, {cfg_.gaussians_per_facet, cfg_.seed, cfg_.sh_degree});
    model_.model.rdf = RdfField(cfg_.hidden_width, cfg_.depth, cfg_.seed + 3, {cfg_.spatial_frequencies, true},
                                {cfg_.spatial_frequencies, true});
    model_.model.use_rdf = cfg_.use_rdf;
    init_cache();
  }

  const Stage2Model& model() const { return model_; }
  Stage2Model& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  int iteration() const { return iteration_; }

  double step() {
    const int it = iteration_;
    const int fidx = train_[std::uniform_int_distribution<std::size_t>(0, train_.size() - 1)(rng_)];
    const Frame& frame = ds_->frames[fidx];
    MaGSModel& m = model_.model;
    const auto& disp = displacement(fidx, frame.time);
    for (std::size_t v = 0; v < m.mesh.vertex_count(); ++v) m.mesh.deformed[v] = m.mesh.rest[v] + disp[v];

    ChunkedMlpCache cache;
    update_hover(m, &cache);
    const auto scene = bake_model(m);
    RasterState st;
    const RenderOutput out = rasterize(scene, frame.camera, model_.background, &st);
    const LossResult loss = image_loss(out.color, frame.image, cfg_.dssim_weight);
    const auto grads = rasterize_backward(scene, st, loss.grad);
    const double w = m.gaussians.empty() ? 0.0 : cfg_.rdf_offset_weight / static_cast<double>(m.gaussians.size());
    std::vector<Vec3> offsets(m.gaussians.size());
    double penalty = 0.0;
    for (std::size_t i = 0; i < offsets.size(); ++i) {
      offsets[i] = 2 * w * m.gaussians[i].d_mu;
      penalty += w * m.gaussians[i].d_mu.squaredNorm();
    }
    const ModelGrad g = model_backward(m, &cache, grads, &offsets);

    // Rest vertices.
    {
      std::vector<double> p = flatten(m.mesh.rest), gr(p.size());
      for (std::size_t v = 0; v < m.mesh.vertex_count(); ++v) {
        for (int k = 0; k < 3; ++k) gr[3 * v + k] = g.rest[v][k] + g.deformed[v][k];
      }
      adam_step(vert_adam_, p, gr, cfg_.vertices_lr * extent_);
      m.mesh.rest = unflatten(p);
    }
    // Placement logits.
    {
      std::vector<double> p(3 * m.gaussians.size()), gr(p.size());
      for (std::size_t i = 0; i < m.gaussians.size(); ++i) {
        for (int k = 0; k < 3; ++k) {
          p[3 * i + k] = m.gaussians[i].alpha[k];
          gr[3 * i + k] = g.gaussians[i].alpha[k];
        }
      }
      adam_step(alpha_adam_, p, gr, cfg_.alpha_lr);
      for (std::size_t i = 0; i < m.gaussians.size(); ++i) m.gaussians[i].alpha = Vec3(p[3 * i], p[3 * i + 1], p[3 * i + 2]);
    }
    // Appearance.
    {
      std::vector<Gaussian3D> bases(m.gaussians.size());
      std::vector<GaussianGrad> bg(m.gaussians.size());
      for (std::size_t i = 0; i < bases.size(); ++i) {
        bases[i] = m.gaussians[i].base;
        bg[i].rot = g.gaussians[i].rot;
        bg[i].log_scale = g.gaussians[i].log_scale;
        bg[i].opacity_logit = g.gaussians[i].opacity_logit;
        bg[i].sh = g.gaussians[i].sh;
      }
      const std::array<double, detail::kGaussianGroups> lr = {0.0, cfg_.rotation_lr, cfg_.scaling_lr, cfg_.opacity_lr,
                                                              cfg_.feature_lr};
      detail::gaussian_adam(bases, bg, adam_, lr, detail::kGroupRot);
      for (std::size_t i = 0; i < bases.size(); ++i) m.gaussians[i].base = std::move(bases[i]);
    }
    if (m.use_rdf) {
      const double lr = network_lr(cfg_.position_lr_init * cfg_.deform_lr_scale, it, cfg_.network_warmup,
                                   cfg_.network_milestones);
      detail::network_adam(m.rdf.net, g.rdf, rdf_adam_, lr, cfg_.network_weight_decay);
    }
    sync_base_positions(m.mesh, m.gaussians);
    ++iteration_;
    return loss.loss + penalty;
  }

  // Held-out frames rendered through the full inference path.
  EvalRecord evaluate() const {
    Stage2Model m = model_;
    const ArapSolver solver(m.model.mesh, m.handles, m.arap);
    std::vector<EvalRecord> rs;
    for (int idx : eval_frames()) {
      const Frame& f = ds_->frames[idx];
      pose_at_time(m, f.time, &solver);
      rs.push_back(score(rasterize(bake_model(m.model), f.camera, m.background).color, f.image, cfg_.dssim_weight));
    }
    return average(rs);
  }

  void run(const RunHooks& hooks = {}) {
    while (iteration_ < cfg_.stage2_iterations) {
      step();
      if (iteration_ % cfg_.eval_interval == 0 || iteration_ == cfg_.stage2_iterations) {
        if (hooks.on_metric) hooks.on_metric(metric_json(iteration_, "stage2", "test", evaluate()));
      }
      if (cfg_.checkpoint_interval > 0 && iteration_ % cfg_.checkpoint_interval == 0 &&
          iteration_ < cfg_.stage2_iterations) {
        const Checkpoint ck = snapshot();
        if (hooks.on_checkpoint) hooks.on_checkpoint(ck);
      }
    }
  }

  Checkpoint snapshot() {
    Checkpoint ck = decode_checkpoint(encode_checkpoint(to_checkpoint()));
    restore(ck);
    return ck;
  }

  Checkpoint to_checkpoint() const {
    const MaGSModel& m = model_.model;
    Checkpoint ck;
    ck.stage = "stage2";
    ck.meta["iteration"] = iteration_;
    ck.meta["rng"] = detail::rng_state(rng_);
    ck.meta["config"] = cfg_;
    ck.meta["extent"] = extent_;
    ck.meta["df"] = df_json(model_.df);
    ck.meta["rdf"] = {{"hidden", m.rdf.net.config().hidden_width}, {"depth", m.rdf.net.config().depth},
                      {"centroid", m.rdf.centroid.num_frequencies}, {"shape", m.rdf.shape.num_frequencies}};
    ck.meta["use_rdf"] = m.use_rdf;
    ck.meta["arap_iterations"] = model_.arap.max_iterations;
    ck.meta["background"] = {model_.background.x(), model_.background.y(), model_.background.z()};
    if (!ds_->frames.empty()) ck.meta["view"] = detail::camera_json(ds_->frames[0].camera);
    ck.meta["adam_steps"] = Json::object();
    ck.meta["arap_solved_at"] = solved_at_;
    const auto nv = static_cast<std::int64_t>(m.mesh.vertex_count());
    const auto nf = static_cast<std::int64_t>(m.mesh.face_count());
    const auto ng = static_cast<std::int64_t>(m.gaussians.size());
    ck.add("mesh.rest", {nv, 3}, flatten(m.mesh.rest));
    std::vector<double> faces, facet, alpha;
    for (const auto& f : m.mesh.faces) faces.insert(faces.end(), {double(f[0]), double(f[1]), double(f[2])});
    ck.add("mesh.faces", {nf, 3}, faces);
    ck.add("mesh.handles", {static_cast<std::int64_t>(model_.handles.size())},
           {model_.handles.begin(), model_.handles.end()});
    std::vector<Gaussian3D> bases;
    for (const auto& ag : m.gaussians) {
      facet.push_back(ag.facet);
      alpha.insert(alpha.end(), ag.alpha.data(), ag.alpha.data() + 3);
      bases.push_back(ag.base);
    }
    ck.add("adsorbed.facet", {ng}, facet);
    ck.add("adsorbed.alpha", {ng, 3}, alpha);
    add_gaussians(ck, "adsorbed.base", bases);
    add_network(ck, "df", model_.df.net);
    add_network(ck, "rdf", m.rdf.net);
    detail::add_adam(ck, "adam.vertices", vert_adam_);
    detail::add_adam(ck, "adam.alpha", alpha_adam_);
    static const char* names[] = {"adam.mu", "adam.rot", "adam.scale", "adam.opacity", "adam.sh"};
    for (int g = detail::kGroupRot; g < detail::kGaussianGroups; ++g) detail::add_adam(ck, names[g], adam_[g]);
    detail::add_adam(ck, "adam.rdf", rdf_adam_);
    for (std::size_t k = 0; k < cache_.size(); ++k) {
      if (!cache_[k].empty()) ck.add("arap.displacement." + std::to_string(k), {nv, 3}, flatten(cache_[k]));
    }
    return ck;
  }

  static Stage2Trainer from_checkpoint(const Checkpoint& ck, const Dataset& ds) {
    if (ck.stage != "stage2") fail(ErrorCode::CheckpointError, "stage2 required");
    const TrainConfig cfg = ck.meta.at("config").get<TrainConfig>();
    Stage2Trainer t(ds, cfg, ck);
    return t;
  }

 private:
  Stage2Trainer(const Dataset& ds, const TrainConfig& cfg, const Checkpoint& ck)
      : ds_(&ds), cfg_(cfg), rng_(cfg.seed + 2) {
    train_ = ds.indices(Split::Train);
    restore(ck);
  }

  void restore(const Checkpoint& ck);

  void init_cache() {
    cache_.assign(ds_->frames.size(), {});
    solved_at_.assign(ds_->frames.size(), -1);
    solver_ = std::make_shared<const ArapSolver>(model_.model.mesh, model_.handles, model_.arap);
  }

  // Cached ARAP displacement for a frame, re-solved when older than the
  // refresh interval.
  const std::vector<Vec3>& displacement(int fidx, double t) {
    auto& d = cache_[fidx];
    if (d.empty() || iteration_ - solved_at_[fidx] >= cfg_.arap_refresh) {
      const auto& mesh = model_.model.mesh;
      const auto targets = handles_from_field(mesh, model_.handles, model_.df, t);
      std::vector<Vec3> warm;
      if (!d.empty()) {
        warm.resize(d.size());
        for (std::size_t v = 0; v < d.size(); ++v) warm[v] = mesh.rest[v] + d[v];
      }
      ArapSolution sol;
      try {
        sol = solver_->solve(mesh.rest, targets, d.empty() ? nullptr : &warm);
      } catch (const Error& e) {
        throw Error(e.code(), std::string(e.what()) + " (frame " + std::to_string(fidx) + ", t = " +
                                  std::to_string(t) + ")");
      }
      d.resize(mesh.vertex_count());
      for (std::size_t v = 0; v < d.size(); ++v) d[v] = sol.deformed[v] - mesh.rest[v];
      solved_at_[fidx] = iteration_;
    }
    return d;
  }

  std::vector<int> eval_frames() const {
    auto test = ds_->indices(Split::Test);
    return test.empty() ? train_ : test;
  }

  const Dataset* ds_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  std::vector<int> train_;
  double extent_ = 1.0;
  Stage2Model model_;
  std::shared_ptr<const ArapSolver> solver_;
  std::vector<std::vector<Vec3>> cache_;
  std::vector<int> solved_at_;
  AdamState vert_adam_, alpha_adam_, rdf_adam_;
  std::array<AdamState, detail::kGaussianGroups> adam_;
  int iteration_ = 0;
};

/// The inference-side Stage-II model stored in a checkpoint.
inline Stage2Model read_stage2_model(const Checkpoint& ck) {
  if (ck.stage != "stage2") fail(ErrorCode::CheckpointError, "stage2 required");
  Stage2Model s;
  const auto& rest_blob = ck.blob("mesh.rest");
  const auto& face_blob = ck.blob("mesh.faces");
  const auto rest = unflatten(ck.values("mesh.rest", rest_blob.data.size()));
  const auto faces = ck.values("mesh.faces", face_blob.data.size());
  std::vector<Face> f(faces.size() / 3);
  for (std::size_t i = 0; i < f.size(); ++i) {
    f[i] = {static_cast<int>(faces[3 * i]), static_cast<int>(faces[3 * i + 1]), static_cast<int>(faces[3 * i + 2])};
  }
  s.model.mesh = TriMesh(rest, f);
  const auto handles = ck.values("mesh.handles", ck.blob("mesh.handles").data.size());
  for (double h : handles) s.handles.push_back(static_cast<int>(h));
  const auto bases = read_gaussians(ck, "adsorbed.base");
  const auto facet = ck.values("adsorbed.facet", bases.size());
  const auto alpha = ck.values("adsorbed.alpha", 3 * bases.size());
  s.model.gaussians.resize(bases.size());
  for (std::size_t i = 0; i < bases.size(); ++i) {
    auto& ag = s.model.gaussians[i];
    ag.facet = static_cast<int>(facet[i]);
    ag.alpha = Vec3(alpha[3 * i], alpha[3 * i + 1], alpha[3 * i + 2]);
    ag.base = bases[i];
  }
  s.df = read_df(ck);
  const Json& r = ck.meta.at("rdf");
  s.model.rdf = RdfField(r.at("hidden"), r.at("depth"), 0, {r.at("centroid").get<int>(), true},
                         {r.at("shape").get<int>(), true});
  read_network(ck, "rdf", s.model.rdf.net);
  s.model.use_rdf = ck.meta.at("use_rdf");
  s.arap.max_iterations = ck.meta.at("arap_iterations");
  const auto& bg = ck.meta.at("background");
  s.background = Vec3(bg[0], bg[1], bg[2]);
  s.model.validate();
  return s;
}

inline void Stage2Trainer::restore(const Checkpoint& ck) {
  iteration_ = ck.meta.at("iteration");
  rng_ = detail::rng_from(ck.meta.at("rng"));
  extent_ = ck.meta.at("extent");
  model_ = read_stage2_model(ck);
  vert_adam_ = detail::read_adam(ck, "adam.vertices");
  alpha_adam_ = detail::read_adam(ck, "adam.alpha");
  static const char* names[] = {"adam.mu", "adam.rot", "adam.scale", "adam.opacity", "adam.sh"};
  for (int g = detail::kGroupRot; g < detail::kGaussianGroups; ++g) adam_[g] = detail::read_adam(ck, names[g]);
  rdf_adam_ = detail::read_adam(ck, "adam.rdf");
  init_cache();
  solved_at_ = ck.meta.at("arap_solved_at").get<std::vector<int>>();
  const std::size_t nv = model_.model.mesh.vertex_count();
  for (std::size_t k = 0; k < cache_.size(); ++k) {
    const std::string name = "arap.displacement." + std::to_string(k);
    if (ck.has(name)) cache_[k] = unflatten(ck.values(name, 3 * nv));
  }
}

inline Camera checkpoint_view(const Checkpoint& ck) {
  if (!ck.meta.contains("view")) fail(ErrorCode::CheckpointError, "checkpoint has no stored view");
  return detail::camera_from_json(ck.meta.at("view"));
}

}  // namespace mags
