#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "errors.hpp"
#include "image.hpp"

namespace mags {

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

namespace detail {

inline std::vector<double> ssim_kernel() {
  std::vector<double> k(kSsimWindow);
  const int r = kSsimWindow / 2;
  double sum = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    k[i] = std::exp(-0.5 * (i - r) * (i - r) / (kSsimSigma * kSsimSigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Separable Gaussian blur, one plane at a time. Near the border the window
// is truncated and renormalized. With `transpose` the adjoint is applied.
class WindowFilter {
 public:
  WindowFilter(int w, int h) : w_(w), h_(h), k_(ssim_kernel()), nx_(norms(w)), ny_(norms(h)) {}

  std::vector<double> apply(const std::vector<double>& in, bool transpose = false) const {
    std::vector<double> tmp(in.size()), out(in.size());
    pass(in, tmp, true, transpose);
    pass(tmp, out, false, transpose);
    return out;
  }

 private:
  std::vector<double> norms(int n) const {
    const int r = kSsimWindow / 2;
    std::vector<double> out(n, 0.0);
    for (int p = 0; p < n; ++p) {
      for (int d = -r; d <= r; ++d) {
        if (p + d >= 0 && p + d < n) out[p] += k_[d + r];
      }
    }
    return out;
  }

  void pass(const std::vector<double>& in, std::vector<double>& out, bool horizontal, bool transpose) const {
    const int r = kSsimWindow / 2;
    const int n = horizontal ? w_ : h_;
    const auto& norm = horizontal ? nx_ : ny_;
    for (int y = 0; y < h_; ++y) {
      for (int x = 0; x < w_; ++x) {
        const int p = horizontal ? x : y;
        double acc = 0.0;
        for (int d = -r; d <= r; ++d) {
          const int q = p + d;
          if (q < 0 || q >= n) continue;
          const int idx = horizontal ? y * w_ + q : q * w_ + x;
          acc += k_[d + r] * (transpose ? in[idx] / norm[q] : in[idx]);
        }
        out[y * w_ + x] = transpose ? acc : acc / norm[p];
      }
    }
  }

  int w_, h_;
  std::vector<double> k_, nx_, ny_;
};

inline std::vector<double> plane(const Image& img, int c) {
  std::vector<double> out(static_cast<std::size_t>(img.width) * img.height);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = img.data[i * img.channels + c];
  return out;
}

}  // namespace detail

struct SsimResult {
  double ssim = 0.0;
  Image grad;  // d mean-SSIM / d first image
};

/// Mean SSIM over pixels and channels with an 11x11 Gaussian window
/// (sigma 1.5); the gradient is taken w.r.t. `x`.
inline SsimResult ssim(const Image& x, const Image& y, bool want_grad = false) {
  if (!x.same_shape(y)) fail(ErrorCode::DimensionMismatch, "ssim: image shapes differ");
  SsimResult res;
  if (want_grad) res.grad = Image(x.width, x.height, x.channels);
  if (x.size() == 0) return res;
  const detail::WindowFilter filt(x.width, x.height);
  const double inv_n = 1.0 / static_cast<double>(x.size());
  double total = 0.0;
  for (int c = 0; c < x.channels; ++c) {
    const auto px = detail::plane(x, c), py = detail::plane(y, c);
    std::vector<double> xx(px.size()), yy(px.size()), xy(px.size());
    for (std::size_t i = 0; i < px.size(); ++i) {
      xx[i] = px[i] * px[i];
      yy[i] = py[i] * py[i];
      xy[i] = px[i] * py[i];
    }
    const auto mx = filt.apply(px), my = filt.apply(py);
    const auto exx = filt.apply(xx), eyy = filt.apply(yy), exy = filt.apply(xy);
    std::vector<double> da(px.size()), db(px.size()), dc(px.size());
    for (std::size_t i = 0; i < px.size(); ++i) {
      const double sxx = exx[i] - mx[i] * mx[i];
      const double syy = eyy[i] - my[i] * my[i];
      const double sxy = exy[i] - mx[i] * my[i];
      const double n1 = 2 * mx[i] * my[i] + kSsimC1, n2 = 2 * sxy + kSsimC2;
      const double d1 = mx[i] * mx[i] + my[i] * my[i] + kSsimC1, d2 = sxx + syy + kSsimC2;
      const double s = n1 * n2 / (d1 * d2);
      total += s;
      if (!want_grad) continue;
      // Partials of s w.r.t. the local mean of x, E[x^2] and E[xy].
      da[i] = inv_n * (2 * my[i] * (n2 - n1) / (d1 * d2) - 2 * mx[i] * s * (1 / d1 - 1 / d2));
      db[i] = inv_n * (-s / d2);
      dc[i] = inv_n * (2 * n1 / (d1 * d2));
    }
    if (!want_grad) continue;
    const auto ga = filt.apply(da, true), gb = filt.apply(db, true), gc = filt.apply(dc, true);
    for (std::size_t i = 0; i < px.size(); ++i) {
      res.grad.data[i * x.channels + c] = ga[i] + 2 * px[i] * gb[i] + py[i] * gc[i];
    }
  }
  res.ssim = total * inv_n;
  return res;
}

struct LossResult {
  double loss = 0.0;
  double l1 = 0.0;
  double ssim = 0.0;
  Image grad;  // d loss / d render
};

/// (1 - w) * L1 + w * (1 - SSIM), w = dssim_weight.
inline LossResult image_loss(const Image& render, const Image& gt, double dssim_weight = 0.2) {
  if (!render.same_shape(gt)) fail(ErrorCode::DimensionMismatch, "image_loss: render and target shapes differ");
  LossResult out;
  const SsimResult s = ssim(render, gt, true);
  out.ssim = s.ssim;
  out.grad = Image(render.width, render.height, render.channels);
  if (render.size() == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(render.size());
  double l1 = 0.0;
  for (std::size_t i = 0; i < render.size(); ++i) {
    const double d = render.data[i] - gt.data[i];
    l1 += std::abs(d);
    const double sign = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
    out.grad.data[i] = (1 - dssim_weight) * sign * inv_n - dssim_weight * s.grad.data[i];
  }
  out.l1 = l1 * inv_n;
  out.loss = (1 - dssim_weight) * out.l1 + dssim_weight * (1 - out.ssim);
  return out;
}

// Peak signal-to-noise ratio for [0,1] images; infinite for identical inputs.
inline double psnr(const Image& a, const Image& b) {
  if (!a.same_shape(b)) fail(ErrorCode::DimensionMismatch, "psnr: image shapes differ");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  if (a.size() == 0 || mse == 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse / static_cast<double>(a.size()));
}

}  // namespace mags
