#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "losses.hpp"
#include "model.hpp"

namespace mags {

// Elementwise relative error with a floor tied to the largest reference
// magnitude, so near-zero components are not judged by FD round-off alone.
inline double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double scale = 0.0;
  for (double v : numeric) scale = std::max(scale, std::abs(v));
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-4 * scale, 1e-12});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

// Central differences of f over the scalars reachable through `slots`.
template <typename F>
std::vector<double> central_differences(const std::vector<double*>& slots, F&& f, double h = 1e-4) {
  std::vector<double> out;
  out.reserve(slots.size());
  for (double* p : slots) {
    const double saved = *p;
    *p = saved + h;
    const double hi = f();
    *p = saved - h;
    const double lo = f();
    *p = saved;
    out.push_back((hi - lo) / (2 * h));
  }
  return out;
}

namespace gradcheck {

inline Camera probe_camera(int w, int h, double distance = 3.0) {
  return Camera::look_at(Vec3(0.3, -0.4, -distance), Vec3::Zero(), Vec3(0, -1, 0), 0.8, w, h);
}

inline std::vector<Gaussian3D> random_scene(std::mt19937_64& rng, int count, int sh_degree = 1, double spread = 0.4) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::normal_distribution<double> n(0, 1);
  std::vector<Gaussian3D> scene(count);
  for (auto& g : scene) {
    g.mu = spread * Vec3(u(rng), u(rng), u(rng));
    g.rot = Quat{n(rng), n(rng), n(rng), n(rng)};
    g.log_scale = Vec3(std::log(0.15 + 0.1 * u(rng)), std::log(0.12 + 0.08 * u(rng)), std::log(0.1 + 0.05 * u(rng)));
    g.opacity_logit = 0.6 * u(rng);
    g.sh.assign(sh_coeff_count(sh_degree), Vec3::Zero());
    for (auto& c : g.sh) c = 0.3 * Vec3(u(rng), u(rng), u(rng));
    g.sh[0] = Vec3(u(rng), u(rng), u(rng));
  }
  return scene;
}

// Six facets around a raised center vertex.
inline TriMesh hex_fan() {
  std::vector<Vec3> v = {Vec3(0, 0, -0.1)};
  for (int k = 0; k < 6; ++k) {
    const double a = k * M_PI / 3.0;
    v.emplace_back(0.5 * std::cos(a), 0.5 * std::sin(a), 0.05 * (k % 2));
  }
  std::vector<Face> f;
  for (int k = 0; k < 6; ++k) f.push_back({0, 1 + k, 1 + (k + 1) % 6});
  return TriMesh(std::move(v), std::move(f));
}

inline Image random_weights(std::mt19937_64& rng, int w, int h) {
  std::uniform_real_distribution<double> u(-1, 1);
  Image img(w, h, 3);
  for (double& v : img.data) v = u(rng);
  return img;
}

inline double weighted_sum(const Image& img, const Image& w) {
  double l = 0;
  for (std::size_t i = 0; i < img.size(); ++i) l += w.data[i] * img.data[i];
  return l;
}

struct Slots {
  std::vector<double*> ptr;
  std::vector<double> analytic;

  void add(double* p, double g) {
    ptr.push_back(p);
    analytic.push_back(g);
  }
  void add3(Vec3& p, const Vec3& g) {
    for (int k = 0; k < 3; ++k) add(&p[k], g[k]);
  }
  void add_quat(Quat& q, const Vec4& g) {
    add(&q.w, g[0]);
    add(&q.x, g[1]);
    add(&q.y, g[2]);
    add(&q.z, g[3]);
  }
  template <typename G>
  void add_gaussian(Gaussian3D& p, const G& g) {
    if constexpr (requires { g.mu; }) add3(p.mu, g.mu);
    add3(p.log_scale, g.log_scale);
    add_quat(p.rot, g.rot);
    add(&p.opacity_logit, g.opacity_logit);
    for (std::size_t c = 0; c < p.sh.size(); ++c) add3(p.sh[c], g.sh[c]);
  }
  void add_net(MlpNetwork& net, const MlpGrad& g) {
    for (int l = 0; l < net.layers(); ++l) {
      for (Eigen::Index i = 0; i < net.weight(l).size(); ++i) add(net.weight(l).data() + i, g.weights[l].data()[i]);
      for (Eigen::Index i = 0; i < net.bias(l).size(); ++i) add(net.bias(l).data() + i, g.biases[l][i]);
    }
  }
  template <typename F>
  double error(F&& loss, double h = 1e-4) const {
    return max_relative_error(analytic, central_differences(ptr, loss, h));
  }
};

inline double rasterizer(std::uint64_t seed = 1234) {
  std::mt19937_64 rng(seed);
  auto scene = random_scene(rng, 5, 2);
  const Camera cam = probe_camera(8, 8, 2.2);
  const Vec3 bg(0.1, 0.3, 0.2);
  const Image w = random_weights(rng, 8, 8);
  RasterState st;
  rasterize(scene, cam, bg, &st);
  const auto grads = rasterize_backward(scene, st, w);
  Slots s;
  for (std::size_t i = 0; i < scene.size(); ++i) s.add_gaussian(scene[i], grads[i]);
  return s.error([&] { return weighted_sum(rasterize(scene, cam, bg).color, w); });
}

// Gradients with respect to V', alpha, d_alpha and d_mu.
inline double bake_path(std::uint64_t seed = 21) {
  TriMesh mesh = hex_fan();
  auto ags = init_adsorbed(mesh, {.count_per_facet = 1, .seed = seed, .sh_degree = 1});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::normal_distribution<double> n(0, 1);
  for (auto& ag : ags) {
    ag.base.rot = Quat{n(rng), n(rng), n(rng), n(rng)};
    ag.base.opacity_logit = 0.5 * u(rng);
    ag.base.log_scale = Vec3(std::log(0.12), std::log(0.09), std::log(0.05));
    for (auto& c : ag.base.sh) c = 0.4 * Vec3(u(rng), u(rng), u(rng));
    ag.d_alpha = 0.3 * Vec3(u(rng), u(rng), u(rng));
    ag.d_mu = 0.05 * Vec3(u(rng), u(rng), u(rng));
  }
  for (auto& v : mesh.deformed) v += 0.1 * Vec3(u(rng), u(rng), u(rng));
  const Camera cam = probe_camera(8, 8, 2.0);
  const Vec3 bg(0.2, 0.1, 0.3);
  const Image w = random_weights(rng, 8, 8);
  const auto baked = bake(mesh, ags);
  RasterState st;
  rasterize(baked, cam, bg, &st);
  const auto g = bake_backward(mesh, ags, rasterize_backward(baked, st, w));
  Slots s;
  for (std::size_t v = 0; v < mesh.vertex_count(); ++v) s.add3(mesh.deformed[v], g.deformed[v]);
  for (std::size_t i = 0; i < ags.size(); ++i) {
    s.add3(ags[i].alpha, g.gaussians[i].alpha);
    s.add3(ags[i].d_alpha, g.gaussians[i].d_alpha);
    s.add3(ags[i].d_mu, g.gaussians[i].d_mu);
  }
  return s.error([&] { return weighted_sum(rasterize(bake(mesh, ags), cam, bg).color, w); });
}

inline double mlp(std::uint64_t seed = 21) {
  MlpNetwork net({7, 3, 12, 8, 4});
  net.initialize(seed, false);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  MatX x(7, 5), w(3, 5);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
  MlpCache cache;
  net.forward(x, &cache);
  MlpGrad g = net.zero_grad();
  const MatX dx = net.backward(cache, w, g);
  Slots s;
  s.add_net(net, g);
  for (Eigen::Index i = 0; i < x.size(); ++i) s.add(x.data() + i, dx.data()[i]);
  return s.error([&] { return net.forward(x).cwiseProduct(w).sum(); });
}

// df_query -> apply_df -> rasterize, against the canonical Gaussians and
// the network weights.
inline double deformation_field(std::uint64_t seed = 13) {
  DfField df(1, 16, 8, 7, {4, true}, {3, true});
  df.net.initialize(seed, false);
  df.net.weight(7) *= 0.1;
  df.net.bias(7) *= 0.1;
  std::mt19937_64 rng(seed);
  auto scene = random_scene(rng, 4, 1, 0.3);
  const Camera cam = probe_camera(8, 8, 2.5);
  const double t = 0.6;
  const Vec3 bg(0.1, 0.2, 0.3);
  const Image w = random_weights(rng, 8, 8);
  auto loss = [&] {
    std::vector<Gaussian3D> moved;
    for (const auto& g : scene) moved.push_back(apply_df(g, df_query(df, g.mu, t)));
    return weighted_sum(rasterize(moved, cam, bg).color, w);
  };

  std::vector<Vec3> mus;
  for (const auto& g : scene) mus.push_back(g.mu);
  ChunkedMlpCache cache;
  const auto outs = df_query_batch(df, mus, t, &cache);
  std::vector<Gaussian3D> moved;
  for (std::size_t i = 0; i < scene.size(); ++i) moved.push_back(apply_df(scene[i], outs[i]));
  RasterState st;
  rasterize(moved, cam, bg, &st);
  const auto grads = rasterize_backward(moved, st, w);
  MatX d_out(df.output_width(), static_cast<Eigen::Index>(scene.size()));
  std::vector<GaussianGrad> base(scene.size());
  for (std::size_t i = 0; i < scene.size(); ++i) {
    auto [gb, dd] = apply_df_backward(scene[i], outs[i], grads[i]);
    base[i] = gb;
    df.pack(dd, d_out.col(static_cast<Eigen::Index>(i)).data());
  }
  MlpGrad g = df.net.zero_grad();
  const MatX d_in = mlp_backward_chunked(df.net, cache, d_out, g);
  for (std::size_t i = 0; i < scene.size(); ++i) {
    Vec3 d_mu = Vec3::Zero();
    df.spatial.backward(scene[i].mu.data(), 3, d_in.col(static_cast<Eigen::Index>(i)).data(), d_mu.data());
    base[i].mu += d_mu;
  }
  Slots s;
  for (std::size_t i = 0; i < scene.size(); ++i) s.add_gaussian(scene[i], base[i]);
  s.add_net(df.net, g);
  return s.error(loss, 1e-6);
}

// Full Stage II graph: displaced mesh -> rdf_query -> bake -> rasterize ->
// image loss plus the offset penalty. Every learnable parameter.
inline double relative_field(std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  MaGSModel model;
  model.mesh = hex_fan();
  for (const int facet : {0, 1, 2, 4, 5}) {
    MeshAdsorbedGaussian ag;
    ag.facet = facet;
    ag.alpha = 0.5 * Vec3(u(rng), u(rng), u(rng));
    ag.base.rot = Quat{1.0 + 0.2 * u(rng), 0.3 * u(rng), 0.3 * u(rng), 0.3 * u(rng)};
    ag.base.log_scale = Vec3(std::log(0.2), std::log(0.15), std::log(0.1)) + 0.1 * Vec3(u(rng), u(rng), u(rng));
    ag.base.opacity_logit = 0.4 * u(rng);
    ag.base.sh.assign(4, Vec3::Zero());
    for (auto& c : ag.base.sh) c = 0.3 * Vec3(u(rng), u(rng), u(rng));
    model.gaussians.push_back(ag);
  }
  sync_base_positions(model.mesh, model.gaussians);
  model.rdf = RdfField(8, 4, seed, {3, true}, {3, true});
  model.rdf.net.initialize(seed + 1, false);
  model.rdf.net.for_each_block([](double* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) p[i] *= 0.5;
  });
  std::vector<Vec3> displacement;
  for (std::size_t i = 0; i < model.mesh.vertex_count(); ++i) {
    displacement.push_back(0.1 * Vec3(u(rng), u(rng), u(rng)));
  }
  Image gt(8, 8, 3);
  for (auto& p : gt.data) p = 0.5 + 0.4 * u(rng);
  const Camera cam = probe_camera(8, 8);
  const double offset_weight = 0.05;

  auto pose = [&] {
    for (std::size_t i = 0; i < model.mesh.vertex_count(); ++i) {
      model.mesh.deformed[i] = model.mesh.rest[i] + displacement[i];
    }
  };
  auto loss = [&] {
    pose();
    update_hover(model);
    double l = image_loss(rasterize(bake_model(model), cam, Vec3::Zero()).color, gt).loss;
    for (const auto& ag : model.gaussians) l += offset_weight * ag.d_mu.squaredNorm();
    return l;
  };

  pose();
  ChunkedMlpCache cache;
  update_hover(model, &cache);
  const auto scene = bake_model(model);
  RasterState st;
  const auto out = rasterize(scene, cam, Vec3::Zero(), &st);
  const auto lr = image_loss(out.color, gt);
  std::vector<Vec3> offsets;
  for (const auto& ag : model.gaussians) offsets.push_back(2 * offset_weight * ag.d_mu);
  const ModelGrad g = model_backward(model, &cache, rasterize_backward(scene, st, lr.grad), &offsets);

  Slots s;
  for (std::size_t v = 0; v < model.mesh.vertex_count(); ++v) s.add3(model.mesh.rest[v], g.rest[v] + g.deformed[v]);
  for (std::size_t i = 0; i < model.gaussians.size(); ++i) {
    auto& ag = model.gaussians[i];
    s.add3(ag.alpha, g.gaussians[i].alpha);
    s.add_gaussian(ag.base, g.gaussians[i]);
  }
  s.add_net(model.rdf.net, g.rdf);
  return s.error(loss, 1e-6);
}

inline double loss(std::uint64_t seed = 2) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  double worst = 0.0;
  for (int trial = 0; trial < 3; ++trial) {
    Image x(8, 8, 3), y(8, 8, 3);
    for (double& v : x.data) v = u(rng);
    for (double& v : y.data) v = u(rng);
    const auto r = image_loss(x, y);
    std::vector<double*> slots;
    for (auto& v : x.data) slots.push_back(&v);
    const auto numeric = central_differences(slots, [&] { return image_loss(x, y).loss; }, 1e-7);
    worst = std::max(worst, max_relative_error(r.grad.data, numeric));
  }
  return worst;
}

struct Result {
  std::string module;
  double error = 0.0;
  double seconds = 0.0;
};

inline constexpr double kTolerance = 1e-3;

inline std::vector<Result> run_all() {
  const std::vector<std::pair<std::string, double (*)()>> suite = {
      {"rasterize_backward", [] { return rasterizer(); }},
      {"bake", [] { return bake_path(); }},
      {"mlp_backward", [] { return mlp(); }},
      {"df_query", [] { return deformation_field(); }},
      {"rdf_query", [] { return relative_field(); }},
      {"image_loss", [] { return loss(); }},
  };
  std::vector<Result> out;
  for (const auto& [name, fn] : suite) {
    const auto t0 = std::chrono::steady_clock::now();
    const double e = fn();
    out.push_back({name, e, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
  }
  return out;
}

inline bool all_pass(const std::vector<Result>& rs) {
  return std::all_of(rs.begin(), rs.end(), [](const Result& r) { return r.error <= kTolerance; });
}

}  // namespace gradcheck
}  // namespace mags
