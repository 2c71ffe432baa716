#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "errors.hpp"
#include "geom.hpp"
#include "parallel.hpp"
#include "splatting.hpp"

namespace mags {

using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;

// Per input scalar: [x] ++ [sin(2^k pi x), cos(2^k pi x)] for k ascending.
struct Encoding {
  int num_frequencies = 10;
  bool include_input = true;

  int width_per_dim() const { return (include_input ? 1 : 0) + 2 * num_frequencies; }
  int width(int dims) const { return dims * width_per_dim(); }

  void encode(const double* x, int dims, double* out) const {
    for (int d = 0; d < dims; ++d) {
      double* o = out + d * width_per_dim();
      if (include_input) *o++ = x[d];
      for (int k = 0; k < num_frequencies; ++k) {
        const double a = std::ldexp(M_PI, k) * x[d];
        *o++ = std::sin(a);
        *o++ = std::cos(a);
      }
    }
  }

  // Accumulates dL/dx into d_x.
  void backward(const double* x, int dims, const double* d_out, double* d_x) const {
    for (int d = 0; d < dims; ++d) {
      const double* g = d_out + d * width_per_dim();
      double acc = 0.0;
      if (include_input) acc += *g++;
      for (int k = 0; k < num_frequencies; ++k) {
        const double f = std::ldexp(M_PI, k);
        const double a = f * x[d];
        acc += f * std::cos(a) * g[0] - f * std::sin(a) * g[1];
        g += 2;
      }
      d_x[d] += acc;
    }
  }
};

inline std::vector<double> positional_encoding(const std::vector<double>& x, const Encoding& enc) {
  std::vector<double> out(static_cast<std::size_t>(enc.width(static_cast<int>(x.size()))));
  enc.encode(x.data(), static_cast<int>(x.size()), out.data());
  return out;
}

struct MlpConfig {
  int input_width = 0;
  int output_width = 0;
  int hidden_width = 256;
  int depth = 8;
  // 1-based layer that also receives the network input; 0 disables.
  int skip_layer = 4;
};

struct MlpGrad {
  std::vector<MatX> weights;
  std::vector<VecX> biases;

  void set_zero() {
    for (auto& w : weights) w.setZero();
    for (auto& b : biases) b.setZero();
  }
  void add(const MlpGrad& o) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      weights[l] += o.weights[l];
      biases[l] += o.biases[l];
    }
  }
};

// Activations retained by the forward pass; columns are samples.
struct MlpCache {
  MatX input;
  std::vector<MatX> pre;   // pre-activation per layer
  std::vector<MatX> post;  // post-activation per layer
};

// Dense ReLU network with a linear last layer. Layer l (1-based) maps
// h_{l-1} to h_l; the skip layer consumes [h_{l-1}; input].
class MlpNetwork {
 public:
  MlpNetwork() = default;
  explicit MlpNetwork(const MlpConfig& cfg) : cfg_(cfg) {
    if (cfg.input_width <= 0 || cfg.output_width <= 0 || cfg.hidden_width <= 0 || cfg.depth <= 0) {
      fail(ErrorCode::InvalidArgument, "MLP widths and depth must be positive");
    }
    for (int l = 1; l <= cfg.depth; ++l) {
      weights_.push_back(MatX::Zero(out_width(l), in_width(l)));
      biases_.push_back(VecX::Zero(out_width(l)));
    }
  }

  const MlpConfig& config() const { return cfg_; }
  int layers() const { return cfg_.depth; }
  MatX& weight(int l) { return weights_[l]; }
  const MatX& weight(int l) const { return weights_[l]; }
  VecX& bias(int l) { return biases_[l]; }
  const VecX& bias(int l) const { return biases_[l]; }

  int in_width(int layer) const {
    int w = layer == 1 ? cfg_.input_width : cfg_.hidden_width;
    if (is_skip(layer)) w += cfg_.input_width;
    return w;
  }
  int out_width(int layer) const { return layer == cfg_.depth ? cfg_.output_width : cfg_.hidden_width; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (int l = 0; l < cfg_.depth; ++l) n += weights_[l].size() + biases_[l].size();
    return n;
  }

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every layer, then a zero
  // output layer so a fresh network predicts exactly zero.
  void initialize(std::uint64_t seed, bool zero_output = true) {
    std::mt19937_64 rng(seed);
    for (int l = 0; l < cfg_.depth; ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(weights_[l].cols()));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index i = 0; i < weights_[l].size(); ++i) weights_[l].data()[i] = u(rng);
      for (Eigen::Index i = 0; i < biases_[l].size(); ++i) biases_[l][i] = u(rng);
    }
    if (zero_output) {
      weights_.back().setZero();
      biases_.back().setZero();
    }
  }

  bool output_is_zero() const { return weights_.back().isZero(0.0) && biases_.back().isZero(0.0); }

  MlpGrad zero_grad() const {
    MlpGrad g;
    for (int l = 0; l < cfg_.depth; ++l) {
      g.weights.push_back(MatX::Zero(weights_[l].rows(), weights_[l].cols()));
      g.biases.push_back(VecX::Zero(biases_[l].size()));
    }
    return g;
  }

  // Visits (pointer, count) for every parameter block in a fixed order.
  template <typename F>
  void for_each_block(F&& f) {
    for (int l = 0; l < cfg_.depth; ++l) {
      f(weights_[l].data(), static_cast<std::size_t>(weights_[l].size()));
      f(biases_[l].data(), static_cast<std::size_t>(biases_[l].size()));
    }
  }
  template <typename F>
  void for_each_block(F&& f) const {
    for (int l = 0; l < cfg_.depth; ++l) {
      f(weights_[l].data(), static_cast<std::size_t>(weights_[l].size()));
      f(biases_[l].data(), static_cast<std::size_t>(biases_[l].size()));
    }
  }

  // One GEMV per column so each result is independent of the batch around it.
  template <typename Lhs>
  static MatX columnwise_product(const Lhs& w, const MatX& x) {
    MatX out(w.rows(), x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) out.col(c).noalias() = w * x.col(c);
    return out;
  }

  // x is input_width x batch.
  MatX forward(const MatX& x, MlpCache* cache = nullptr) const {
    if (x.rows() != cfg_.input_width) {
      fail(ErrorCode::ShapeMismatch, "MLP input has " + std::to_string(x.rows()) + " rows, expected " +
                                         std::to_string(cfg_.input_width));
    }
    if (cache) {
      cache->input = x;
      cache->pre.assign(cfg_.depth, MatX());
      cache->post.assign(cfg_.depth, MatX());
    }
    MatX h = x;
    for (int l = 1; l <= cfg_.depth; ++l) {
      MatX in;
      if (is_skip(l)) {
        in.resize(h.rows() + x.rows(), x.cols());
        in << h, x;
      } else {
        in = std::move(h);
      }
      MatX z = columnwise_product(weights_[l - 1], in);
      z.colwise() += biases_[l - 1];
      if (l < cfg_.depth) {
        h = z.cwiseMax(0.0);
      } else {
        h = z;
      }
      if (cache) {
        cache->pre[l - 1] = std::move(z);
        cache->post[l - 1] = h;
      }
    }
    return h;
  }

  // Accumulates parameter gradients into grad and returns dL/dx.
  MatX backward(const MlpCache& cache, const MatX& d_out, MlpGrad& grad) const {
    const Eigen::Index batch = cache.input.cols();
    if (d_out.rows() != cfg_.output_width || d_out.cols() != batch) {
      fail(ErrorCode::ShapeMismatch, "MLP output gradient shape mismatch");
    }
    MatX d_x = MatX::Zero(cfg_.input_width, batch);
    MatX d_h = d_out;
    for (int l = cfg_.depth; l >= 1; --l) {
      MatX d_z = l < cfg_.depth ? MatX(d_h.cwiseProduct((cache.pre[l - 1].array() > 0.0).cast<double>().matrix()))
                                : d_h;
      const MatX* prev = l == 1 ? &cache.input : &cache.post[l - 2];
      if (is_skip(l)) {
        MatX in(prev->rows() + cache.input.rows(), batch);
        in << *prev, cache.input;
        grad.weights[l - 1].noalias() += d_z * in.transpose();
      } else {
        grad.weights[l - 1].noalias() += d_z * prev->transpose();
      }
      grad.biases[l - 1] += d_z.rowwise().sum();
      MatX d_in = columnwise_product(weights_[l - 1].transpose(), d_z);
      if (is_skip(l)) {
        const Eigen::Index hp = prev->rows();
        d_x += d_in.bottomRows(cfg_.input_width);
        d_h = d_in.topRows(hp);
      } else {
        d_h = std::move(d_in);
      }
      if (l == 1) d_x += d_h;
    }
    return d_x;
  }

 private:
  bool is_skip(int layer) const { return cfg_.skip_layer >= 2 && layer == cfg_.skip_layer && layer <= cfg_.depth; }

  MlpConfig cfg_;
  std::vector<MatX> weights_;
  std::vector<VecX> biases_;
};

// Forward over fixed-size column chunks so results do not depend on the
// thread count; the gradient reduction runs in chunk order.
inline constexpr Eigen::Index kMlpChunk = 256;

struct ChunkedMlpCache {
  std::vector<MlpCache> chunks;
};

inline MatX mlp_forward_chunked(const MlpNetwork& net, const MatX& x, ChunkedMlpCache* cache = nullptr) {
  const Eigen::Index n = x.cols();
  const Eigen::Index count = (n + kMlpChunk - 1) / kMlpChunk;
  MatX out(net.config().output_width, n);
  if (cache) cache->chunks.assign(static_cast<std::size_t>(count), MlpCache());
  parallel_for(0, static_cast<std::size_t>(count), [&](std::size_t c) {
    const Eigen::Index lo = static_cast<Eigen::Index>(c) * kMlpChunk;
    const Eigen::Index w = std::min(kMlpChunk, n - lo);
    out.middleCols(lo, w) = net.forward(x.middleCols(lo, w), cache ? &cache->chunks[c] : nullptr);
  });
  return out;
}

inline MatX mlp_backward_chunked(const MlpNetwork& net, const ChunkedMlpCache& cache, const MatX& d_out,
                                 MlpGrad& grad) {
  const std::size_t count = cache.chunks.size();
  std::vector<MlpGrad> partial(count);
  MatX d_x(net.config().input_width, d_out.cols());
  parallel_for(0, count, [&](std::size_t c) {
    const Eigen::Index lo = static_cast<Eigen::Index>(c) * kMlpChunk;
    const Eigen::Index w = cache.chunks[c].input.cols();
    partial[c] = net.zero_grad();
    d_x.middleCols(lo, w) = net.backward(cache.chunks[c], d_out.middleCols(lo, w), partial[c]);
  });
  for (const auto& p : partial) grad.add(p);
  return d_x;
}

// ---------------------------------------------------------------------------
// Deformation field head: (mu, t) -> per-Gaussian parameter deltas.

struct DfOutput {
  Vec3 d_mu = Vec3::Zero();
  Vec4 d_q = Vec4::Zero();  // raw; the applied rotation is normalize(identity + d_q)
  Vec3 d_s = Vec3::Zero();
  double d_sigma = 0.0;
  std::vector<Vec3> d_c;
};

struct DfField {
  Encoding spatial{10, true};
  Encoding temporal{6, true};
  int sh_degree = 0;
  MlpNetwork net;

  DfField() = default;
  DfField(int sh_deg, int hidden_width, int depth, std::uint64_t seed, Encoding sp = {10, true},
          Encoding tm = {6, true})
      : spatial(sp), temporal(tm), sh_degree(sh_deg) {
    net = MlpNetwork({input_width(), output_width(), hidden_width, depth, 4});
    net.initialize(seed);
    if (!net.output_is_zero()) fail(ErrorCode::InvalidArgument, "deformation field must start as identity");
  }

  int input_width() const { return spatial.width(3) + temporal.width(1); }
  int output_width() const { return 11 + 3 * sh_coeff_count(sh_degree); }

  void encode(const Vec3& mu, double t, double* out) const {
    spatial.encode(mu.data(), 3, out);
    temporal.encode(&t, 1, out + spatial.width(3));
  }

  MatX inputs(const std::vector<Vec3>& mus, double t) const {
    MatX x(input_width(), static_cast<Eigen::Index>(mus.size()));
    for (std::size_t i = 0; i < mus.size(); ++i) encode(mus[i], t, x.col(static_cast<Eigen::Index>(i)).data());
    return x;
  }

  DfOutput unpack(const double* o) const {
    DfOutput d;
    d.d_mu = Vec3(o[0], o[1], o[2]);
    d.d_q = Vec4(o[3], o[4], o[5], o[6]);
    d.d_s = Vec3(o[7], o[8], o[9]);
    d.d_sigma = o[10];
    d.d_c.resize(sh_coeff_count(sh_degree));
    for (std::size_t k = 0; k < d.d_c.size(); ++k) d.d_c[k] = Vec3(o[11 + 3 * k], o[12 + 3 * k], o[13 + 3 * k]);
    return d;
  }

  void pack(const DfOutput& d, double* o) const {
    for (int k = 0; k < 3; ++k) o[k] = d.d_mu[k];
    for (int k = 0; k < 4; ++k) o[3 + k] = d.d_q[k];
    for (int k = 0; k < 3; ++k) o[7 + k] = d.d_s[k];
    o[10] = d.d_sigma;
    const int n = sh_coeff_count(sh_degree);
    for (int k = 0; k < n; ++k) {
      const Vec3 c = k < static_cast<int>(d.d_c.size()) ? d.d_c[k] : Vec3::Zero();
      for (int j = 0; j < 3; ++j) o[11 + 3 * k + j] = c[j];
    }
  }
};

inline DfOutput df_query(const DfField& df, const Vec3& mu, double t) {
  MatX x(df.input_width(), 1);
  df.encode(mu, t, x.data());
  const MatX y = df.net.forward(x);
  return df.unpack(y.data());
}

inline std::vector<DfOutput> df_query_batch(const DfField& df, const std::vector<Vec3>& mus, double t,
                                            ChunkedMlpCache* cache = nullptr) {
  const MatX y = mlp_forward_chunked(df.net, df.inputs(mus, t), cache);
  std::vector<DfOutput> out(mus.size());
  for (std::size_t i = 0; i < mus.size(); ++i) out[i] = df.unpack(y.col(static_cast<Eigen::Index>(i)).data());
  return out;
}

inline Quat delta_rotation(const Vec4& raw) { return Quat::from_vec(Vec4(1.0 + raw[0], raw[1], raw[2], raw[3])).normalized(); }

// Position additive, rotation composed, scale/opacity/color additive in their
// unconstrained parameters.
inline Gaussian3D apply_df(const Gaussian3D& g, const DfOutput& d) {
  Gaussian3D out = g;
  out.mu += d.d_mu;
  out.rot = g.rot * delta_rotation(d.d_q);
  out.log_scale += d.d_s;
  out.opacity_logit += d.d_sigma;
  for (std::size_t k = 0; k < out.sh.size() && k < d.d_c.size(); ++k) out.sh[k] += d.d_c[k];
  return out;
}

// Splits the gradient of a deformed Gaussian into the base Gaussian part and
// the delta part.
inline std::pair<GaussianGrad, DfOutput> apply_df_backward(const Gaussian3D& g, const DfOutput& d,
                                                           const GaussianGrad& dg) {
  GaussianGrad base = dg;
  DfOutput dd;
  dd.d_mu = dg.mu;
  const Vec4 u(1.0 + d.d_q[0], d.d_q[1], d.d_q[2], d.d_q[3]);
  const double n = u.norm();
  const Quat dq = Quat::from_vec(u / n);
  const auto [d_base, d_unit] = quat_mul_backward(g.rot, dq, dg.rot);
  base.rot = d_base;
  const Vec4 un = u / n;
  dd.d_q = (d_unit - un * un.dot(d_unit)) / n;
  dd.d_s = dg.log_scale;
  dd.d_sigma = dg.opacity_logit;
  dd.d_c.assign(d.d_c.size(), Vec3::Zero());
  for (std::size_t k = 0; k < dd.d_c.size() && k < dg.sh.size(); ++k) dd.d_c[k] = dg.sh[k];
  return {base, dd};
}

// ---------------------------------------------------------------------------
// Relative deformation field head: facet context + barycentric logits ->
// hover offsets.

struct RdfOutput {
  Vec3 d_alpha = Vec3::Zero();
  Vec3 d_mu = Vec3::Zero();
};

struct RdfInput {
  Vec3 rest_centroid = Vec3::Zero();
  std::array<Vec3, 3> deformed = {Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
  Vec3 alpha = Vec3::Zero();
};

struct RdfInputGrad {
  Vec3 rest_centroid = Vec3::Zero();
  std::array<Vec3, 3> deformed = {Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
  Vec3 alpha = Vec3::Zero();
};

// The deformed facet enters relative to its own centroid so that a rigid
// translation of the mesh does not change the prediction.
struct RdfField {
  Encoding centroid{10, true};
  Encoding shape{10, true};
  MlpNetwork net;

  RdfField() = default;
  RdfField(int hidden_width, int depth, std::uint64_t seed, Encoding c = {10, true}, Encoding s = {10, true})
      : centroid(c), shape(s) {
    net = MlpNetwork({input_width(), 6, hidden_width, depth, 4});
    net.initialize(seed);
    if (!net.output_is_zero()) fail(ErrorCode::InvalidArgument, "relative deformation field must start as identity");
  }

  int input_width() const { return centroid.width(3) + shape.width(9) + 3; }

  void encode(const RdfInput& in, double* out) const {
    centroid.encode(in.rest_centroid.data(), 3, out);
    const Vec3 c = (in.deformed[0] + in.deformed[1] + in.deformed[2]) / 3.0;
    double rel[9];
    for (int v = 0; v < 3; ++v) {
      for (int k = 0; k < 3; ++k) rel[3 * v + k] = in.deformed[v][k] - c[k];
    }
    shape.encode(rel, 9, out + centroid.width(3));
    double* a = out + centroid.width(3) + shape.width(9);
    for (int k = 0; k < 3; ++k) a[k] = in.alpha[k];
  }

  RdfInputGrad encode_backward(const RdfInput& in, const double* d_feat) const {
    RdfInputGrad g;
    centroid.backward(in.rest_centroid.data(), 3, d_feat, g.rest_centroid.data());
    const Vec3 c = (in.deformed[0] + in.deformed[1] + in.deformed[2]) / 3.0;
    double rel[9], d_rel[9] = {0};
    for (int v = 0; v < 3; ++v) {
      for (int k = 0; k < 3; ++k) rel[3 * v + k] = in.deformed[v][k] - c[k];
    }
    shape.backward(rel, 9, d_feat + centroid.width(3), d_rel);
    Vec3 mean = Vec3::Zero();
    for (int v = 0; v < 3; ++v) mean += Vec3(d_rel[3 * v], d_rel[3 * v + 1], d_rel[3 * v + 2]) / 3.0;
    for (int v = 0; v < 3; ++v) g.deformed[v] = Vec3(d_rel[3 * v], d_rel[3 * v + 1], d_rel[3 * v + 2]) - mean;
    const double* a = d_feat + centroid.width(3) + shape.width(9);
    g.alpha = Vec3(a[0], a[1], a[2]);
    return g;
  }

  MatX inputs(const std::vector<RdfInput>& ins) const {
    MatX x(input_width(), static_cast<Eigen::Index>(ins.size()));
    for (std::size_t i = 0; i < ins.size(); ++i) encode(ins[i], x.col(static_cast<Eigen::Index>(i)).data());
    return x;
  }
};

inline RdfOutput rdf_query(const RdfField& rdf, const RdfInput& in) {
  MatX x(rdf.input_width(), 1);
  rdf.encode(in, x.data());
  const MatX y = rdf.net.forward(x);
  return {Vec3(y(0, 0), y(1, 0), y(2, 0)), Vec3(y(3, 0), y(4, 0), y(5, 0))};
}

inline std::vector<RdfOutput> rdf_query_batch(const RdfField& rdf, const std::vector<RdfInput>& ins,
                                              ChunkedMlpCache* cache = nullptr) {
  const MatX y = mlp_forward_chunked(rdf.net, rdf.inputs(ins), cache);
  std::vector<RdfOutput> out(ins.size());
  for (std::size_t i = 0; i < ins.size(); ++i) {
    const auto c = y.col(static_cast<Eigen::Index>(i));
    out[i] = {Vec3(c[0], c[1], c[2]), Vec3(c[3], c[4], c[5])};
  }
  return out;
}

}  // namespace mags
