#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "geom.hpp"
#include "image.hpp"
#include "parallel.hpp"

namespace mags {

inline constexpr int kMaxShDegree = 3;
inline constexpr int kTileSize = 8;
inline constexpr double kLowPassFloor = 0.3;
inline constexpr double kAlphaMax = 0.99;
inline constexpr double kAlphaMin = 1.0 / 255.0;
// Compositing stops before a splat would push transmittance below this.
inline constexpr double kTransmittanceMin = 1e-4;

constexpr int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

// A splatting primitive. Opacity is kept as a logit and scale as a log so
// that optimizers work in unconstrained coordinates; scale() and opacity()
// give the activated values.
struct Gaussian3D {
  Vec3 mu = Vec3::Zero();
  Quat rot;
  Vec3 log_scale = Vec3::Zero();
  double opacity_logit = 0.0;
  std::vector<Vec3> sh = {Vec3::Zero()};

  Vec3 scale() const { return log_scale.array().exp(); }
  double opacity() const { return sigmoid(opacity_logit); }
  int sh_degree() const { return static_cast<int>(std::lround(std::sqrt(static_cast<double>(sh.size())))) - 1; }
};

// Pinhole camera; camera space looks down +z with image y pointing down.
struct Camera {
  Mat3 rotation = Mat3::Identity();  // world -> camera
  Vec3 translation = Vec3::Zero();
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;
  double znear = 0.01;
  double zfar = 100.0;

  Vec3 to_camera(const Vec3& p) const { return rotation * p + translation; }
  Vec3 position() const { return -rotation.transpose() * translation; }

  bool valid() const { return fx > 0 && fy > 0 && znear > 0 && zfar > znear && width > 0 && height > 0; }

  // Camera at `eye` looking at `target`; `fov_x` in radians.
  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fov_x, int width, int height) {
    const Vec3 forward = (target - eye).normalized();
    const Vec3 right = forward.cross(up).normalized();
    const Vec3 down = forward.cross(right);
    Camera cam;
    cam.rotation.row(0) = right.transpose();
    cam.rotation.row(1) = down.transpose();
    cam.rotation.row(2) = forward.transpose();
    cam.translation = -cam.rotation * eye;
    cam.fx = 0.5 * width / std::tan(0.5 * fov_x);
    cam.fy = cam.fx;
    cam.cx = 0.5 * width;
    cam.cy = 0.5 * height;
    cam.width = width;
    cam.height = height;
    return cam;
  }

  // Same pose and field of view at a different resolution.
  Camera resized(int w, int h) const {
    Camera c = *this;
    const double sx = static_cast<double>(w) / width;
    const double sy = static_cast<double>(h) / height;
    c.fx *= sx;
    c.fy *= sy;
    c.cx *= sx;
    c.cy *= sy;
    c.width = w;
    c.height = h;
    return c;
  }
};

struct RenderOutput {
  Image color;  // H x W x 3, linear
  Image alpha;  // H x W x 1
  Image depth;  // H x W x 1, expected camera-space z of the composited surface
  std::vector<int> contributors;
};

inline Mat3 build_covariance(const Quat& q, const Vec3& s) {
  const Mat3 r = quat_to_matrix(q.normalized());
  return r * s.cwiseProduct(s).asDiagonal() * r.transpose();
}

// ---------------------------------------------------------------------------
// Spherical harmonics

namespace sh {
inline constexpr double C0 = 0.28209479177387814;
inline constexpr double C1 = 0.4886025119029199;
inline constexpr std::array<double, 5> C2 = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                             -1.0925484305920792, 0.5462742152960396};
inline constexpr std::array<double, 7> C3 = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                                             0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                                             -0.5900435899266435};

// Real SH basis values and their gradients w.r.t. the (unit) direction.
inline void basis(const Vec3& d, int degree, std::array<double, 16>& y, std::array<Vec3, 16>* grad = nullptr) {
  const double x = d.x(), yy = d.y(), z = d.z();
  y[0] = C0;
  if (grad) (*grad)[0] = Vec3::Zero();
  if (degree < 1) return;
  y[1] = -C1 * yy;
  y[2] = C1 * z;
  y[3] = -C1 * x;
  if (grad) {
    (*grad)[1] = Vec3(0, -C1, 0);
    (*grad)[2] = Vec3(0, 0, C1);
    (*grad)[3] = Vec3(-C1, 0, 0);
  }
  if (degree < 2) return;
  const double xx = x * x, y2 = yy * yy, zz = z * z;
  y[4] = C2[0] * x * yy;
  y[5] = C2[1] * yy * z;
  y[6] = C2[2] * (2 * zz - xx - y2);
  y[7] = C2[3] * x * z;
  y[8] = C2[4] * (xx - y2);
  if (grad) {
    (*grad)[4] = C2[0] * Vec3(yy, x, 0);
    (*grad)[5] = C2[1] * Vec3(0, z, yy);
    (*grad)[6] = C2[2] * Vec3(-2 * x, -2 * yy, 4 * z);
    (*grad)[7] = C2[3] * Vec3(z, 0, x);
    (*grad)[8] = C2[4] * Vec3(2 * x, -2 * yy, 0);
  }
  if (degree < 3) return;
  y[9] = C3[0] * yy * (3 * xx - y2);
  y[10] = C3[1] * x * yy * z;
  y[11] = C3[2] * yy * (4 * zz - xx - y2);
  y[12] = C3[3] * z * (2 * zz - 3 * xx - 3 * y2);
  y[13] = C3[4] * x * (4 * zz - xx - y2);
  y[14] = C3[5] * z * (xx - y2);
  y[15] = C3[6] * x * (xx - 3 * y2);
  if (grad) {
    (*grad)[9] = C3[0] * Vec3(6 * x * yy, 3 * xx - 3 * y2, 0);
    (*grad)[10] = C3[1] * Vec3(yy * z, x * z, x * yy);
    (*grad)[11] = C3[2] * Vec3(-2 * x * yy, 4 * zz - xx - 3 * y2, 8 * yy * z);
    (*grad)[12] = C3[3] * Vec3(-6 * x * z, -6 * yy * z, 6 * zz - 3 * xx - 3 * y2);
    (*grad)[13] = C3[4] * Vec3(4 * zz - 3 * xx - y2, -2 * x * yy, 8 * x * z);
    (*grad)[14] = C3[5] * Vec3(2 * x * z, -2 * yy * z, xx - y2);
    (*grad)[15] = C3[6] * Vec3(3 * xx - 3 * y2, -6 * x * yy, 0);
  }
}
}  // namespace sh

// RGB from SH coefficients seen along `view_dir` (unit). Band 0 carries the
// usual +0.5 offset; the result is clamped at zero.
inline Vec3 sh_to_color(const std::vector<Vec3>& coeffs, const Vec3& view_dir) {
  const int degree = std::min(kMaxShDegree, static_cast<int>(std::lround(std::sqrt(double(coeffs.size())))) - 1);
  std::array<double, 16> y{};
  sh::basis(view_dir, degree, y);
  Vec3 c = Vec3::Constant(0.5);
  for (int k = 0; k < sh_coeff_count(degree); ++k) c += y[k] * coeffs[k];
  return c.cwiseMax(0.0);
}

// ---------------------------------------------------------------------------
// Projection

struct Projection {
  Vec2 mean;
  Mat2 cov;  // includes the low-pass floor
  double depth = 0.0;
};

namespace detail {
inline Eigen::Matrix<double, 2, 3> projection_jacobian(const Camera& cam, const Vec3& p) {
  const double z = p.z();
  Eigen::Matrix<double, 2, 3> j;
  j << cam.fx / z, 0.0, -cam.fx * p.x() / (z * z), 0.0, cam.fy / z, -cam.fy * p.y() / (z * z);
  return j;
}
}  // namespace detail

/// Projects a Gaussian to the image plane. Returns nullopt (culled) when the
/// center lies outside the clip range or more than 3 sigma outside the image.
inline std::optional<Projection> project_gaussian(const Gaussian3D& g, const Camera& cam) {
  const Vec3 p = cam.to_camera(g.mu);
  if (p.z() <= cam.znear || p.z() >= cam.zfar) return std::nullopt;
  const auto j = detail::projection_jacobian(cam, p);
  const Eigen::Matrix<double, 2, 3> t = j * cam.rotation;
  Projection out;
  out.cov = t * build_covariance(g.rot, g.scale()) * t.transpose();
  out.cov(0, 0) += kLowPassFloor;
  out.cov(1, 1) += kLowPassFloor;
  out.mean = Vec2(cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy);
  out.depth = p.z();
  const double mid = 0.5 * (out.cov(0, 0) + out.cov(1, 1));
  const double lambda_max = mid + std::sqrt(std::max(0.1, mid * mid - out.cov.determinant()));
  const double r3 = 3.0 * std::sqrt(lambda_max);
  if (out.mean.x() < -0.5 - r3 || out.mean.x() > cam.width - 0.5 + r3 || out.mean.y() < -0.5 - r3 ||
      out.mean.y() > cam.height - 0.5 + r3) {
    return std::nullopt;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rasterization

struct ProjectedSplat {
  bool visible = false;
  Vec3 p_cam = Vec3::Zero();
  Vec2 mean = Vec2::Zero();
  Mat2 cov = Mat2::Identity();
  Mat2 conic = Mat2::Identity();
  double opacity = 0.0;
  double min_power = 0.0;  // below this, alpha is under the cutoff
  Vec3 color = Vec3::Zero();
  Vec3 view_dir = Vec3::UnitZ();
  Vec3 color_raw = Vec3::Zero();  // before the zero clamp
  std::array<int, 4> rect = {0, 0, -1, -1};  // inclusive tile bounds x0, y0, x1, y1
};

// Everything the backward pass needs from the forward pass.
struct RasterState {
  Camera camera;
  Vec3 background = Vec3::Zero();
  std::vector<ProjectedSplat> splats;
  std::vector<int> order;                    // visible splats, ascending depth
  std::vector<std::vector<int>> tile_lists;  // per tile, in depth order
  int tiles_x = 0;
  int tiles_y = 0;
};

namespace detail {

inline ProjectedSplat preprocess(const Gaussian3D& g, const Camera& cam) {
  ProjectedSplat s;
  const auto proj = project_gaussian(g, cam);
  if (!proj) return s;
  const double det = proj->cov.determinant();
  if (!(det > 1e-12)) return s;
  s.p_cam = cam.to_camera(g.mu);
  s.mean = proj->mean;
  s.cov = proj->cov;
  s.conic << proj->cov(1, 1) / det, -proj->cov(0, 1) / det, -proj->cov(1, 0) / det, proj->cov(0, 0) / det;
  s.opacity = g.opacity();
  s.min_power = std::log(kAlphaMin / s.opacity) - 1e-9;
  // Pixels farther than this radius have alpha below the 1/255 cutoff.
  const double reach = 255.0 * s.opacity;
  if (!(reach >= 1.0)) return s;
  const double mid = 0.5 * (s.cov(0, 0) + s.cov(1, 1));
  const double lambda_max = mid + std::sqrt(std::max(0.0, mid * mid - det));
  const double radius = std::sqrt(2.0 * std::log(reach)) * std::sqrt(lambda_max) + 1.0;
  const int x0 = static_cast<int>(std::floor((s.mean.x() - radius) / kTileSize));
  const int x1 = static_cast<int>(std::floor((s.mean.x() + radius) / kTileSize));
  const int y0 = static_cast<int>(std::floor((s.mean.y() - radius) / kTileSize));
  const int y1 = static_cast<int>(std::floor((s.mean.y() + radius) / kTileSize));
  const int tx = (cam.width + kTileSize - 1) / kTileSize;
  const int ty = (cam.height + kTileSize - 1) / kTileSize;
  s.rect = {std::max(x0, 0), std::max(y0, 0), std::min(x1, tx - 1), std::min(y1, ty - 1)};
  if (s.rect[0] > s.rect[2] || s.rect[1] > s.rect[3]) return s;
  s.view_dir = (g.mu - cam.position()).normalized();
  const int degree = std::min(kMaxShDegree, g.sh_degree());
  std::array<double, 16> y{};
  sh::basis(s.view_dir, degree, y);
  s.color_raw = Vec3::Constant(0.5);
  for (int k = 0; k < sh_coeff_count(degree); ++k) s.color_raw += y[k] * g.sh[k];
  s.color = s.color_raw.cwiseMax(0.0);
  s.visible = true;
  return s;
}

// Alpha of a splat at a pixel center, 0 when below the cutoff. Shared by the
// tiled and the naive traversal so both see identical arithmetic.
inline double splat_alpha(const ProjectedSplat& s, double px, double py, double* gauss = nullptr) {
  const double dx = px - s.mean.x();
  const double dy = py - s.mean.y();
  const double power = -0.5 * (s.conic(0, 0) * dx * dx + s.conic(1, 1) * dy * dy) - s.conic(0, 1) * dx * dy;
  if (power > 0.0 || power < s.min_power) return 0.0;
  const double g = std::exp(power);
  const double alpha = std::min(kAlphaMax, s.opacity * g);
  if (alpha < kAlphaMin) return 0.0;
  if (gauss) *gauss = g;
  return alpha;
}

struct PixelResult {
  Vec3 color;
  double alpha;
  double depth;
  int count;
};

template <typename Ids>
PixelResult composite_pixel(const RasterState& st, const Ids& ids, int x, int y) {
  double transmittance = 1.0;
  Vec3 c = Vec3::Zero();
  double depth = 0.0;
  int count = 0;
  for (int id : ids) {
    const ProjectedSplat& s = st.splats[id];
    const double a = splat_alpha(s, x, y);
    if (a == 0.0) continue;
    if (transmittance * (1.0 - a) < kTransmittanceMin) break;
    const double w = a * transmittance;
    c += w * s.color;
    depth += w * s.p_cam.z();
    transmittance *= (1.0 - a);
    ++count;
  }
  const double acc = 1.0 - transmittance;
  c += transmittance * st.background;
  return {c, acc, acc > 0.0 ? depth / acc : 0.0, count};
}

inline RasterState prepare(const std::vector<Gaussian3D>& scene, const Camera& cam, const Vec3& background) {
  RasterState st;
  st.camera = cam;
  st.background = background;
  st.splats.resize(scene.size());
  parallel_for(0, scene.size(), [&](std::size_t i) { st.splats[i] = preprocess(scene[i], cam); });
  for (std::size_t i = 0; i < scene.size(); ++i) {
    if (st.splats[i].visible) st.order.push_back(static_cast<int>(i));
  }
  std::stable_sort(st.order.begin(), st.order.end(),
                   [&](int a, int b) { return st.splats[a].p_cam.z() < st.splats[b].p_cam.z(); });
  st.tiles_x = (cam.width + kTileSize - 1) / kTileSize;
  st.tiles_y = (cam.height + kTileSize - 1) / kTileSize;
  st.tile_lists.assign(static_cast<std::size_t>(st.tiles_x) * st.tiles_y, {});
  for (int id : st.order) {
    const auto& r = st.splats[id].rect;
    for (int ty = r[1]; ty <= r[3]; ++ty) {
      for (int tx = r[0]; tx <= r[2]; ++tx) st.tile_lists[static_cast<std::size_t>(ty) * st.tiles_x + tx].push_back(id);
    }
  }
  return st;
}

inline RenderOutput allocate_output(const Camera& cam) {
  RenderOutput out;
  out.color = Image(cam.width, cam.height, 3);
  out.alpha = Image(cam.width, cam.height, 1);
  out.depth = Image(cam.width, cam.height, 1);
  out.contributors.assign(static_cast<std::size_t>(cam.width) * cam.height, 0);
  return out;
}

inline void store_pixel(RenderOutput& out, int x, int y, const PixelResult& px) {
  for (int c = 0; c < 3; ++c) out.color.at(x, y, c) = px.color[c];
  out.alpha.at(x, y, 0) = px.alpha;
  out.depth.at(x, y, 0) = px.depth;
  out.contributors[static_cast<std::size_t>(y) * out.color.width + x] = px.count;
}

}  // namespace detail

/// Renders with 8x8 tile binning. `state`, when given, receives the
/// retained forward intermediates for rasterize_backward.
inline RenderOutput rasterize(const std::vector<Gaussian3D>& scene, const Camera& cam, const Vec3& background,
                              RasterState* state = nullptr) {
  RasterState st = detail::prepare(scene, cam, background);
  RenderOutput out = detail::allocate_output(cam);
  parallel_for(0, st.tile_lists.size(), [&](std::size_t tile) {
    const int tx = static_cast<int>(tile % st.tiles_x);
    const int ty = static_cast<int>(tile / st.tiles_x);
    const auto& ids = st.tile_lists[tile];
    for (int y = ty * kTileSize; y < std::min(cam.height, (ty + 1) * kTileSize); ++y) {
      for (int x = tx * kTileSize; x < std::min(cam.width, (tx + 1) * kTileSize); ++x) {
        detail::store_pixel(out, x, y, detail::composite_pixel(st, ids, x, y));
      }
    }
  });
  if (state) *state = std::move(st);
  return out;
}

// Reference traversal: every visible splat visits every pixel.
inline RenderOutput rasterize_naive(const std::vector<Gaussian3D>& scene, const Camera& cam, const Vec3& background) {
  const RasterState st = detail::prepare(scene, cam, background);
  RenderOutput out = detail::allocate_output(cam);
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) detail::store_pixel(out, x, y, detail::composite_pixel(st, st.order, x, y));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward

struct GaussianGrad {
  Vec3 mu = Vec3::Zero();
  Vec4 rot = Vec4::Zero();  // w.r.t. the raw quaternion
  Vec3 log_scale = Vec3::Zero();
  double opacity_logit = 0.0;
  std::vector<Vec3> sh;
  Mat3 rotation_matrix = Mat3::Zero();  // w.r.t. the normalized rotation matrix
  Vec2 mean2d = Vec2::Zero();           // screen-space, pixels
};

namespace detail {
struct SplatAccum {
  Vec2 mean = Vec2::Zero();
  Mat2 conic = Mat2::Zero();
  double opacity = 0.0;
  Vec3 color = Vec3::Zero();
};
}  // namespace detail

/// Gradients of sum(d_color .* color) w.r.t. every Gaussian parameter.
///
/// Per-pixel contributions are accumulated tile by tile into tile-local
/// buffers and reduced in tile order, so results do not depend on the
/// thread count.
inline std::vector<GaussianGrad> rasterize_backward(const std::vector<Gaussian3D>& scene, const RasterState& st,
                                                    const Image& d_color) {
  const Camera& cam = st.camera;
  if (d_color.width != cam.width || d_color.height != cam.height || d_color.channels != 3) {
    fail(ErrorCode::DimensionMismatch, "gradient image does not match the render");
  }
  std::vector<std::vector<detail::SplatAccum>> tile_accum(st.tile_lists.size());
  parallel_for(0, st.tile_lists.size(), [&](std::size_t tile) {
    const auto& ids = st.tile_lists[tile];
    auto& acc = tile_accum[tile];
    acc.assign(ids.size(), {});
    const int tx = static_cast<int>(tile % st.tiles_x);
    const int ty = static_cast<int>(tile / st.tiles_x);
    struct Hit {
      int local;
      double alpha;
      double gauss;
      double transmittance;
    };
    std::vector<Hit> hits;
    for (int y = ty * kTileSize; y < std::min(cam.height, (ty + 1) * kTileSize); ++y) {
      for (int x = tx * kTileSize; x < std::min(cam.width, (tx + 1) * kTileSize); ++x) {
        const Vec3 g_pix(d_color.at(x, y, 0), d_color.at(x, y, 1), d_color.at(x, y, 2));
        if (g_pix.isZero(0.0)) continue;
        hits.clear();
        double t = 1.0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          double gauss = 0.0;
          const double a = detail::splat_alpha(st.splats[ids[k]], x, y, &gauss);
          if (a == 0.0) continue;
          if (t * (1.0 - a) < kTransmittanceMin) break;
          hits.push_back({static_cast<int>(k), a, gauss, t});
          t *= (1.0 - a);
        }
        // Light arriving from behind splat i: background plus everything after it.
        Vec3 behind = t * st.background;
        for (auto it = hits.rbegin(); it != hits.rend(); ++it) {
          const ProjectedSplat& s = st.splats[ids[it->local]];
          auto& a = acc[it->local];
          a.color += it->alpha * it->transmittance * g_pix;
          const double d_alpha = g_pix.dot(it->transmittance * s.color - behind / (1.0 - it->alpha));
          behind += it->alpha * it->transmittance * s.color;
          if (s.opacity * it->gauss >= kAlphaMax) continue;  // clamped: flat
          a.opacity += d_alpha * it->gauss;
          const double d_g = d_alpha * s.opacity * it->gauss;  // times dG/dpower / G
          const double dx = x - s.mean.x();
          const double dy = y - s.mean.y();
          // power = -0.5 d^T Q d
          a.conic(0, 0) += -0.5 * dx * dx * d_g;
          a.conic(1, 1) += -0.5 * dy * dy * d_g;
          a.conic(0, 1) += -0.5 * dx * dy * d_g;
          a.conic(1, 0) += -0.5 * dx * dy * d_g;
          const Vec2 qd = s.conic * Vec2(dx, dy);
          a.mean += d_g * qd;
        }
      }
    }
  });

  std::vector<detail::SplatAccum> total(scene.size());
  for (std::size_t tile = 0; tile < st.tile_lists.size(); ++tile) {
    const auto& ids = st.tile_lists[tile];
    for (std::size_t k = 0; k < ids.size(); ++k) {
      auto& dst = total[ids[k]];
      const auto& src = tile_accum[tile][k];
      dst.mean += src.mean;
      dst.conic += src.conic;
      dst.opacity += src.opacity;
      dst.color += src.color;
    }
  }

  std::vector<GaussianGrad> grads(scene.size());
  parallel_for(0, scene.size(), [&](std::size_t i) {
    const Gaussian3D& g = scene[i];
    GaussianGrad& out = grads[i];
    out.sh.assign(g.sh.size(), Vec3::Zero());
    const ProjectedSplat& s = st.splats[i];
    if (!s.visible) return;
    const auto& a = total[i];
    out.mean2d = a.mean;
    const double o = s.opacity;
    out.opacity_logit = a.opacity * o * (1.0 - o);

    // Color through SH and the view direction.
    const int degree = std::min(kMaxShDegree, g.sh_degree());
    std::array<double, 16> y{};
    std::array<Vec3, 16> dy{};
    sh::basis(s.view_dir, degree, y, &dy);
    Vec3 d_raw = a.color;
    for (int c = 0; c < 3; ++c) {
      if (s.color_raw[c] < 0.0) d_raw[c] = 0.0;
    }
    Vec3 d_dir = Vec3::Zero();
    for (int k = 0; k < sh_coeff_count(degree); ++k) {
      out.sh[k] = y[k] * d_raw;
      d_dir += g.sh[k].dot(d_raw) * dy[k];
    }
    const Vec3 offset = g.mu - cam.position();
    const double dist = offset.norm();
    out.mu += (d_dir - s.view_dir * s.view_dir.dot(d_dir)) / dist;

    // Conic -> 2D covariance -> 3D covariance and projection Jacobian.
    const Mat2 d_cov = -s.conic.transpose() * a.conic * s.conic.transpose();
    const Vec3& p = s.p_cam;
    const auto j = detail::projection_jacobian(cam, p);
    const Eigen::Matrix<double, 2, 3> t = j * cam.rotation;
    const Mat3 rmat = quat_to_matrix(g.rot.normalized());
    const Vec3 scale = g.scale();
    const Mat3 m = rmat * scale.asDiagonal();
    const Mat3 sigma = m * m.transpose();
    const Mat3 d_sigma = t.transpose() * d_cov * t;
    const Eigen::Matrix<double, 2, 3> d_t = (d_cov + d_cov.transpose()) * t * sigma;
    const Eigen::Matrix<double, 2, 3> d_j = d_t * cam.rotation.transpose();
    const double z = p.z();
    Vec3 d_p = j.transpose() * a.mean;
    d_p.x() += d_j(0, 2) * (-cam.fx / (z * z));
    d_p.y() += d_j(1, 2) * (-cam.fy / (z * z));
    d_p.z() += d_j(0, 0) * (-cam.fx / (z * z)) + d_j(1, 1) * (-cam.fy / (z * z)) +
               d_j(0, 2) * (2.0 * cam.fx * p.x() / (z * z * z)) + d_j(1, 2) * (2.0 * cam.fy * p.y() / (z * z * z));
    out.mu += cam.rotation.transpose() * d_p;

    const Mat3 d_m = (d_sigma + d_sigma.transpose()) * m;
    Vec3 d_scale;
    for (int k = 0; k < 3; ++k) d_scale[k] = rmat.col(k).dot(d_m.col(k));
    out.log_scale = d_scale.cwiseProduct(scale);
    out.rotation_matrix = d_m * scale.asDiagonal();
    out.rot = quat_to_matrix_backward(g.rot, out.rotation_matrix);
  });
  return grads;
}

}  // namespace mags
