#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "mags/splatting.hpp"
#include "test_util.hpp"

namespace mags {
namespace {

using testing::central_differences;
using testing::max_relative_error;
using testing::random_scene;
using testing::sh_dc_for_color;
using testing::test_camera;

Camera axis_camera(double focal, int w = 32, int h = 32) {
  Camera cam;
  cam.fx = cam.fy = focal;
  cam.cx = w / 2.0;
  cam.cy = h / 2.0;
  cam.width = w;
  cam.height = h;
  cam.znear = 0.1;
  cam.zfar = 100.0;
  return cam;
}

Gaussian3D isotropic(const Vec3& mu, double s, double opacity, const Vec3& color) {
  Gaussian3D g;
  g.mu = mu;
  g.log_scale = Vec3::Constant(std::log(s));
  g.opacity_logit = logit(opacity);
  g.sh = {sh_dc_for_color(color)};
  return g;
}

TEST(BuildCovariance, Examples) {
  EXPECT_LE((build_covariance(Quat::identity(), Vec3(1, 1, 1)) - Mat3::Identity()).norm(), 1e-15);
  EXPECT_LE((build_covariance(Quat::identity(), Vec3(2, 1, 1)) - Vec3(4, 1, 1).asDiagonal().toDenseMatrix()).norm(),
            1e-15);
  const Quat rz = matrix_to_quat(rotation_z(M_PI / 2));
  EXPECT_LE((build_covariance(rz, Vec3(2, 1, 1)) - Vec3(1, 4, 1).asDiagonal().toDenseMatrix()).norm(), 1e-12);
}

TEST(BuildCovariance, EigenvaluesAreSquaredScales) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  std::uniform_real_distribution<double> u(0.1, 3);
  for (int i = 0; i < 100; ++i) {
    const Vec3 s(u(rng), u(rng), u(rng));
    const Mat3 sigma = build_covariance(Quat{n(rng), n(rng), n(rng), n(rng)}, s);
    EXPECT_LE((sigma - sigma.transpose()).norm(), 1e-12);
    Eigen::SelfAdjointEigenSolver<Mat3> es(sigma);
    Vec3 expect = s.cwiseProduct(s);
    std::sort(expect.data(), expect.data() + 3);
    EXPECT_LE((es.eigenvalues() - expect).norm(), 1e-9);
  }
}

TEST(ProjectGaussian, OnAxisUnitCovariance) {
  const double z = 5.0;
  const Camera cam = axis_camera(z);
  const auto proj = project_gaussian(isotropic({0, 0, z}, 1.0, 0.5, Vec3::Zero()), cam);
  ASSERT_TRUE(proj);
  EXPECT_LE((proj->cov - 1.3 * Mat2::Identity()).norm(), 1e-12);
  EXPECT_NEAR(proj->depth, z, 1e-15);
  EXPECT_LE((proj->mean - Vec2(16, 16)).norm(), 1e-12);

  const auto far = project_gaussian(isotropic({0, 0, 2 * z}, 1.0, 0.5, Vec3::Zero()), cam);
  ASSERT_TRUE(far);
  const Mat2 near_raw = proj->cov - kLowPassFloor * Mat2::Identity();
  const Mat2 far_raw = far->cov - kLowPassFloor * Mat2::Identity();
  EXPECT_LE((far_raw - 0.25 * near_raw).norm(), 1e-12);
}

TEST(ProjectGaussian, Culling) {
  const Camera cam = axis_camera(5.0);
  EXPECT_FALSE(project_gaussian(isotropic({0, 0, cam.znear / 2}, 0.01, 0.5, Vec3::Zero()), cam));
  EXPECT_FALSE(project_gaussian(isotropic({0, 0, 200.0}, 0.01, 0.5, Vec3::Zero()), cam));
  EXPECT_FALSE(project_gaussian(isotropic({100, 0, 5}, 0.01, 0.5, Vec3::Zero()), cam));
}

TEST(ShToColor, Examples) {
  const std::vector<Vec3> zero = {Vec3::Zero()};
  EXPECT_LE((sh_to_color(zero, Vec3::UnitZ()) - Vec3::Constant(0.5)).norm(), 0.0);
  const std::vector<Vec3> dc = {Vec3(0.3, -0.2, 0.1)};
  EXPECT_EQ(sh_to_color(dc, Vec3::UnitX()), sh_to_color(dc, Vec3(0, 0.6, 0.8)));
  std::vector<Vec3> band1(4, Vec3::Zero());
  band1[2] = Vec3(0.2, 0.1, 0.4);  // z-linear term
  const Vec3 diff = sh_to_color(band1, Vec3::UnitZ()) - sh_to_color(band1, -Vec3::UnitZ());
  EXPECT_LE((diff - 2 * 0.48860251 * band1[2]).norm(), 1e-8);
}

TEST(Rasterize, EmptySceneIsBackground) {
  const Camera cam = axis_camera(10.0, 8, 8);
  const Vec3 bg(0.2, 0.4, 0.6);
  const RenderOutput out = rasterize({}, cam, bg);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      for (int c = 0; c < 3; ++c) EXPECT_EQ(out.color.at(x, y, c), bg[c]);
      EXPECT_EQ(out.alpha.at(x, y, 0), 0.0);
    }
  }
}

TEST(Rasterize, SingleSaturatedGaussian) {
  const Camera cam = axis_camera(10.0, 8, 8);
  const Vec3 c(0.8, 0.3, 0.1);
  const Vec3 bg(0.0, 0.0, 0.0);
  const RenderOutput out = rasterize({isotropic({0, 0, 4}, 0.2, 0.99, c)}, cam, bg);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(out.color.at(4, 4, k), 0.99 * c[k] + 0.01 * bg[k], 1e-12);
}

TEST(Rasterize, TwoTermCompositing) {
  const Camera cam = axis_camera(10.0, 8, 8);
  const std::vector<Gaussian3D> scene = {isotropic({0, 0, 4}, 0.2, 0.5, Vec3(1, 0, 0)),
                                         isotropic({0, 0, 4}, 0.2, 0.5, Vec3(0, 0, 1))};
  const RenderOutput out = rasterize(scene, cam, Vec3::Zero());
  EXPECT_NEAR(out.color.at(4, 4, 0), 0.5, 1e-6);
  EXPECT_NEAR(out.color.at(4, 4, 1), 0.0, 1e-6);
  EXPECT_NEAR(out.color.at(4, 4, 2), 0.25, 1e-6);
  EXPECT_EQ(out.contributors[4 * 8 + 4], 2);
}

TEST(Rasterize, StopsOnceNearlyOpaque) {
  const Camera cam = axis_camera(10.0, 8, 8);
  std::vector<Gaussian3D> scene;
  for (int k = 0; k < 5; ++k) scene.push_back(isotropic({0, 0, 4.0 + 0.1 * k}, 0.2, 0.99, Vec3(0.2 * k, 0.5, 0.5)));
  const RenderOutput out = rasterize(scene, cam, Vec3::Zero());
  EXPECT_EQ(out.contributors[4 * 8 + 4], 2);
  EXPECT_NEAR(out.color.at(4, 4, 0), 0.99 * 0.01 * 0.2, 1e-6);
}

TEST(Rasterize, TiledMatchesNaiveBitwise) {
  std::mt19937_64 rng(42);
  for (int scene_id = 0; scene_id < 20; ++scene_id) {
    const auto scene = random_scene(rng, 30, 2, 0.8);
    const Camera cam = test_camera(40, 36, 2.5);
    const RenderOutput a = rasterize(scene, cam, Vec3(0.1, 0.2, 0.3));
    const RenderOutput b = rasterize_naive(scene, cam, Vec3(0.1, 0.2, 0.3));
    EXPECT_EQ(a.color.data, b.color.data) << "scene " << scene_id;
    EXPECT_EQ(a.alpha.data, b.alpha.data);
    EXPECT_EQ(a.depth.data, b.depth.data);
  }
}

TEST(Rasterize, PermutationInvariant) {
  std::mt19937_64 rng(9);
  auto scene = random_scene(rng, 25);
  const Camera cam = test_camera(24, 24);
  const RenderOutput ref = rasterize(scene, cam, Vec3::Zero());
  std::shuffle(scene.begin(), scene.end(), rng);
  EXPECT_EQ(rasterize(scene, cam, Vec3::Zero()).color.data, ref.color.data);
}

TEST(Rasterize, AlphaBoundedAndCoverageAtMostOne) {
  std::mt19937_64 rng(21);
  auto scene = random_scene(rng, 40);
  for (auto& g : scene) g.opacity_logit = 50.0;
  const RenderOutput out = rasterize(scene, test_camera(24, 24), Vec3::Zero());
  for (double a : out.alpha.data) {
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
}

TEST(Rasterize, FootprintConsistentAcrossResolution) {
  const Gaussian3D g = isotropic({0, 0, 4}, 0.3, 0.5, Vec3::Zero());
  const Camera lo = axis_camera(40.0, 32, 32);
  const Camera hi = lo.resized(64, 64);
  const auto a = project_gaussian(g, lo);
  const auto b = project_gaussian(g, hi);
  ASSERT_TRUE(a && b);
  const double frac_lo = std::sqrt(a->cov.determinant()) / (32.0 * 32.0);
  const double frac_hi = std::sqrt(b->cov.determinant()) / (64.0 * 64.0);
  EXPECT_NEAR(frac_hi / frac_lo, 1.0, 0.05);
}

TEST(RasterizeBackward, ZeroUpstreamGivesZero) {
  std::mt19937_64 rng(2);
  const auto scene = random_scene(rng, 5);
  RasterState st;
  rasterize(scene, test_camera(8, 8), Vec3::Zero(), &st);
  const auto grads = rasterize_backward(scene, st, Image(8, 8, 3));
  for (const auto& g : grads) {
    EXPECT_EQ(g.mu, Vec3::Zero());
    EXPECT_EQ(g.rot, Vec4::Zero());
    EXPECT_EQ(g.opacity_logit, 0.0);
  }
}

TEST(RasterizeBackward, OpacityGradientByHand) {
  const Camera cam = axis_camera(10.0, 8, 8);
  const Vec3 c(0.7, 0.2, 0.4);
  const std::vector<Gaussian3D> scene = {isotropic({0, 0, 4}, 0.2, 0.6, c)};
  RasterState st;
  rasterize(scene, cam, Vec3::Zero(), &st);
  Image d(8, 8, 3);
  d.at(5, 4, 0) = 1.0;  // loss = red channel of one off-center pixel
  const auto grads = rasterize_backward(scene, st, d);
  const auto& s = st.splats[0];
  const Vec2 dd = Vec2(5, 4) - s.mean;
  const double gauss = std::exp(-0.5 * dd.dot(s.conic * dd));
  const double o = 0.6;
  EXPECT_NEAR(grads[0].opacity_logit / (o * (1 - o)), gauss * c[0], 1e-12);
}

TEST(RasterizeBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(1234);
  auto scene = random_scene(rng, 5, 2);
  const Camera cam = test_camera(8, 8, 2.2);
  const Vec3 bg(0.1, 0.3, 0.2);
  Image weights(8, 8, 3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (double& w : weights.data) w = u(rng);
  auto loss = [&] {
    const auto out = rasterize(scene, cam, bg);
    double l = 0;
    for (std::size_t i = 0; i < out.color.size(); ++i) l += weights.data[i] * out.color.data[i];
    return l;
  };
  RasterState st;
  rasterize(scene, cam, bg, &st);
  const auto grads = rasterize_backward(scene, st, weights);

  std::vector<double*> mu, rot, scale, opac, sh;
  std::vector<double> a_mu, a_rot, a_scale, a_opac, a_sh;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    auto& g = scene[i];
    for (int k = 0; k < 3; ++k) {
      mu.push_back(&g.mu[k]);
      a_mu.push_back(grads[i].mu[k]);
      scale.push_back(&g.log_scale[k]);
      a_scale.push_back(grads[i].log_scale[k]);
    }
    rot.insert(rot.end(), {&g.rot.w, &g.rot.x, &g.rot.y, &g.rot.z});
    for (int k = 0; k < 4; ++k) a_rot.push_back(grads[i].rot[k]);
    opac.push_back(&g.opacity_logit);
    a_opac.push_back(grads[i].opacity_logit);
    for (std::size_t k = 0; k < g.sh.size(); ++k) {
      for (int c = 0; c < 3; ++c) {
        sh.push_back(&g.sh[k][c]);
        a_sh.push_back(grads[i].sh[k][c]);
      }
    }
  }
  EXPECT_LE(max_relative_error(a_mu, central_differences(mu, loss)), 1e-3);
  EXPECT_LE(max_relative_error(a_rot, central_differences(rot, loss)), 1e-3);
  EXPECT_LE(max_relative_error(a_scale, central_differences(scale, loss)), 1e-3);
  EXPECT_LE(max_relative_error(a_opac, central_differences(opac, loss)), 1e-3);
  EXPECT_LE(max_relative_error(a_sh, central_differences(sh, loss)), 1e-3);
}

TEST(RasterizeBackward, DeterministicAcrossThreadCounts) {
  std::mt19937_64 rng(77);
  const auto scene = random_scene(rng, 60);
  const Camera cam = test_camera(48, 48);
  Image d(48, 48, 3, 0.5);
  set_thread_count(1);
  RasterState st1;
  const auto img1 = rasterize(scene, cam, Vec3::Zero(), &st1);
  const auto g1 = rasterize_backward(scene, st1, d);
  set_thread_count(4);
  RasterState st4;
  const auto img4 = rasterize(scene, cam, Vec3::Zero(), &st4);
  const auto g4 = rasterize_backward(scene, st4, d);
  set_thread_count(0);
  EXPECT_EQ(img1.color.data, img4.color.data);
  for (std::size_t i = 0; i < scene.size(); ++i) {
    EXPECT_EQ(g1[i].mu, g4[i].mu);
    EXPECT_EQ(g1[i].rot, g4[i].rot);
  }
}

TEST(FloatImage, DumpRoundTrip) {
  Image img(3, 2, 3);
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = 0.125 * static_cast<double>(i);
  const auto bytes = encode_float_image(img);
  ASSERT_EQ(bytes.size(), 12u + 18u * 4u);
  EXPECT_EQ(bytes[0], 3);
  EXPECT_EQ(bytes[4], 2);
  EXPECT_EQ(bytes[8], 3);
  EXPECT_EQ(decode_float_image(bytes).data, img.data);
}

TEST(Png, EncodeDecodeRoundTripsQuantized) {
  Image img(4, 4, 3);
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = (i % 7) / 6.0;
  const Image back = decode_png(encode_png(img));
  ASSERT_TRUE(back.same_shape(img));
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 0.02);
}

}  // namespace
}  // namespace mags
