#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <utility>

#include "errors.hpp"

namespace mags {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

// Hamilton quaternion (w, x, y, z). Gaussians store the raw, possibly
// unnormalized 4-vector; everything that consumes a rotation normalizes it.
struct Quat {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static Quat identity() { return {}; }
  static Quat from_vec(const Vec4& v) { return {v[0], v[1], v[2], v[3]}; }

  Vec4 vec() const { return {w, x, y, z}; }
  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  Quat normalized() const {
    const double n = norm();
    return {w / n, x / n, y / n, z / n};
  }

  // Sign flip so that w >= 0; q and -q encode the same rotation.
  Quat canonical() const {
    if (w < 0.0) return {-w, -x, -y, -z};
    return *this;
  }

  Quat conjugate() const { return {w, -x, -y, -z}; }

  bool operator==(const Quat&) const = default;
};

inline Quat operator*(const Quat& a, const Quat& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

// Rotation matrix of a unit quaternion. The input is assumed normalized.
inline Mat3 quat_to_matrix(const Quat& q) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

// Shepperd's method; result canonicalized to w >= 0.
inline Quat matrix_to_quat(const Mat3& r) {
  const double trace = r.trace();
  Quat q;
  if (trace > r(0, 0) && trace > r(1, 1) && trace > r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + trace);
    q = {0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s};
  } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2));
    q = {(r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s};
  } else if (r(1, 1) > r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2));
    q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s, (r(1, 2) + r(2, 1)) / s};
  } else {
    const double s = 2.0 * std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1));
    q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, 0.25 * s};
  }
  return q.normalized().canonical();
}

/// Applies `rotation` after the rotation encoded by `q`: the returned
/// quaternion's matrix is rotation * R(q).
inline Quat compose(const Quat& q, const Mat3& rotation) {
  return (matrix_to_quat(rotation) * q.normalized()).normalized().canonical();
}

// Gradient of a scalar through R = quat_to_matrix(normalize(q_raw)):
// given dL/dR returns dL/dq_raw.
inline Vec4 quat_to_matrix_backward(const Quat& q_raw, const Mat3& d_r) {
  const double n = q_raw.norm();
  const Quat q = q_raw.normalized();
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 dw, dx, dy, dz;
  dw << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
  dx << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
  dy << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
  dz << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
  const Vec4 d_unit(d_r.cwiseProduct(dw).sum(), d_r.cwiseProduct(dx).sum(),
                    d_r.cwiseProduct(dy).sum(), d_r.cwiseProduct(dz).sum());
  const Vec4 qv = q.vec();
  return (d_unit - qv * qv.dot(d_unit)) / n;
}

// Backward of c = a * b (Hamilton) for both operands.
inline std::pair<Vec4, Vec4> quat_mul_backward(const Quat& a, const Quat& b, const Vec4& d_c) {
  // c = L(a) b = R(b) a with the usual left/right multiplication matrices.
  Eigen::Matrix4d left;
  left << a.w, -a.x, -a.y, -a.z,
      a.x, a.w, -a.z, a.y,
      a.y, a.z, a.w, -a.x,
      a.z, -a.y, a.x, a.w;
  Eigen::Matrix4d right;
  right << b.w, -b.x, -b.y, -b.z,
      b.x, b.w, b.z, -b.y,
      b.y, -b.z, b.w, b.x,
      b.z, b.y, -b.x, b.w;
  return {right.transpose() * d_c, left.transpose() * d_c};
}

inline Mat3 rotation_z(double radians) {
  return Eigen::AngleAxisd(radians, Vec3::UnitZ()).toRotationMatrix();
}

inline bool is_rotation(const Mat3& m, double tol = 1e-6) {
  return (m.transpose() * m - Mat3::Identity()).norm() <= tol && std::abs(m.determinant() - 1.0) <= tol;
}

/// Orthonormal basis from three edge vectors by classical Gram-Schmidt.
///
/// Column 0 is e1 normalized, column 1 the normalized part of e2 orthogonal
/// to it, column 2 the normalized residual of e3. The result is a proper
/// rotation whenever e3 lies on the positive side of e1 x e2.
///
/// Throws DegenerateFacet when e1 vanishes, e2 is (anti)parallel to e1 within
/// 1e-6 rad, or e3 lies in span(e1, e2).
inline Mat3 gram_schmidt_basis(const Vec3& e1, const Vec3& e2, const Vec3& e3) {
  constexpr double kAngleTol = 1e-6;
  const double n1 = e1.norm();
  if (!(n1 > 0.0) || !std::isfinite(n1)) fail(ErrorCode::DegenerateFacet, "first edge has zero length");
  const double n2 = e2.norm();
  if (!(n2 > 0.0) || e1.cross(e2).norm() <= std::sin(kAngleTol) * n1 * n2) {
    fail(ErrorCode::DegenerateFacet, "second edge is parallel to the first");
  }
  const Vec3 c0 = e1 / n1;
  Vec3 u1 = e2 - c0.dot(e2) * c0;
  const Vec3 c1 = u1 / u1.norm();
  const Vec3 u2 = e3 - c0.dot(e3) * c0 - c1.dot(e3) * c1;
  const double n3 = e3.norm();
  if (!(n3 > 0.0) || u2.norm() <= std::sin(kAngleTol) * n3) {
    fail(ErrorCode::DegenerateFacet, "third edge lies in the span of the first two");
  }
  Mat3 basis;
  basis.col(0) = c0;
  basis.col(1) = c1;
  basis.col(2) = u2 / u2.norm();
  return basis;
}

// Maps the before-basis onto the after-basis: R * before = after.
inline Mat3 relative_rotation(const Mat3& before, const Mat3& after) {
  return after * before.transpose();
}

namespace detail {

// Cyclic Jacobi eigen-decomposition of a symmetric 3x3 matrix. Eigenvalues
// come back in descending order with matching eigenvector columns.
inline std::pair<Vec3, Mat3> symmetric_eigen(Mat3 a) {
  Mat3 v = Mat3::Identity();
  const double scale = std::max(a.cwiseAbs().maxCoeff(), 1e-300);
  for (int sweep = 0; sweep < 64; ++sweep) {
    const double off = std::abs(a(0, 1)) + std::abs(a(0, 2)) + std::abs(a(1, 2));
    if (off <= 1e-18 * scale) break;
    for (int p = 0; p < 2; ++p) {
      for (int q = p + 1; q < 3; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        Mat3 rot = Mat3::Identity();
        rot(p, p) = c;
        rot(q, q) = c;
        rot(p, q) = s;
        rot(q, p) = -s;
        a = rot.transpose() * a * rot;
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        v = v * rot;
      }
    }
  }
  std::array<int, 3> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](int i, int j) { return a(i, i) > a(j, j); });
  Vec3 values;
  Mat3 vectors;
  for (int k = 0; k < 3; ++k) {
    values[k] = a(order[k], order[k]);
    vectors.col(k) = v.col(order[k]);
  }
  return {values, vectors};
}

}  // namespace detail

/// Closest proper rotation to m in the Frobenius norm.
///
/// Works from the eigen-decomposition of mᵀm. Only the two dominant singular
/// directions are needed: the third column of the left factor is fixed by
/// their cross product and det(V), which is exactly the "flip the smallest
/// singular direction" rule. Throws RankDeficient when two or more singular
/// values fall below 1e-9, where the best rotation is not unique.
inline Mat3 polar_rotation(const Mat3& m) {
  constexpr double kSingularTol = 1e-9;
  const auto [lambda, v] = detail::symmetric_eigen(m.transpose() * m);
  const double s1 = std::sqrt(std::max(lambda[1], 0.0));
  if (!(s1 >= kSingularTol)) fail(ErrorCode::RankDeficient, "two or more vanishing singular values");
  const Vec3 a0 = m * v.col(0);
  const Vec3 u0 = a0.normalized();
  const Vec3 a1 = m * v.col(1);
  const Vec3 u1 = (a1 - u0.dot(a1) * u0).normalized();
  const double det_v = v.determinant() >= 0.0 ? 1.0 : -1.0;
  Mat3 u;
  u.col(0) = u0;
  u.col(1) = u1;
  u.col(2) = det_v * u0.cross(u1);
  return u * v.transpose();
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace mags
