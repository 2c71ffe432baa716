#include <gtest/gtest.h>

#include <random>

#include "mags/losses.hpp"
#include "mags/model.hpp"
#include "test_util.hpp"

namespace mags {
namespace {

using testing::central_differences;
using testing::max_relative_error;

// Six-facet fan around a raised center vertex.
TriMesh hex_fan() {
  std::vector<Vec3> v = {Vec3(0, 0, -0.1)};
  for (int k = 0; k < 6; ++k) {
    const double a = k * M_PI / 3.0;
    v.emplace_back(0.5 * std::cos(a), 0.5 * std::sin(a), 0.05 * (k % 2));
  }
  std::vector<Face> f;
  for (int k = 0; k < 6; ++k) f.push_back({0, 1 + k, 1 + (k + 1) % 6});
  return TriMesh(std::move(v), std::move(f));
}

struct Fixture {
  MaGSModel model;
  std::vector<Vec3> displacement;
  Camera cam = testing::test_camera(8, 8);
  Image gt;
  double offset_weight = 0.05;

  explicit Fixture(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1, 1);
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
    for (std::size_t i = 0; i < model.mesh.vertex_count(); ++i) {
      displacement.push_back(0.1 * Vec3(u(rng), u(rng), u(rng)));
    }
    gt = Image(8, 8, 3);
    for (auto& p : gt.data) p = 0.5 + 0.4 * u(rng);
  }

  void pose() {
    for (std::size_t i = 0; i < model.mesh.vertex_count(); ++i) {
      model.mesh.deformed[i] = model.mesh.rest[i] + displacement[i];
    }
  }

  double loss() {
    pose();
    update_hover(model);
    const auto scene = bake_model(model);
    double l = image_loss(rasterize(scene, cam, Vec3::Zero()).color, gt).loss;
    for (const auto& ag : model.gaussians) l += offset_weight * ag.d_mu.squaredNorm();
    return l;
  }

  ModelGrad grad() {
    pose();
    ChunkedMlpCache cache;
    update_hover(model, &cache);
    const auto scene = bake_model(model);
    RasterState st;
    const auto out = rasterize(scene, cam, Vec3::Zero(), &st);
    const auto lr = image_loss(out.color, gt);
    const auto gg = rasterize_backward(scene, st, lr.grad);
    std::vector<Vec3> offsets;
    for (const auto& ag : model.gaussians) offsets.push_back(2 * offset_weight * ag.d_mu);
    return model_backward(model, &cache, gg, &offsets);
  }
};

TEST(StageTwoGradient, EveryLearnableParameterMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u}) {
    Fixture fx(seed);
    const ModelGrad g = fx.grad();

    std::vector<double*> slots;
    std::vector<double> analytic;
    for (std::size_t v = 0; v < fx.model.mesh.vertex_count(); ++v) {
      for (int k = 0; k < 3; ++k) {
        slots.push_back(&fx.model.mesh.rest[v][k]);
        analytic.push_back(g.rest[v][k] + g.deformed[v][k]);
      }
    }
    for (std::size_t i = 0; i < fx.model.gaussians.size(); ++i) {
      auto& ag = fx.model.gaussians[i];
      const auto& ga = g.gaussians[i];
      for (int k = 0; k < 3; ++k) {
        slots.push_back(&ag.alpha[k]);
        analytic.push_back(ga.alpha[k]);
        slots.push_back(&ag.base.log_scale[k]);
        analytic.push_back(ga.log_scale[k]);
      }
      slots.insert(slots.end(), {&ag.base.rot.w, &ag.base.rot.x, &ag.base.rot.y, &ag.base.rot.z});
      for (int k = 0; k < 4; ++k) analytic.push_back(ga.rot[k]);
      slots.push_back(&ag.base.opacity_logit);
      analytic.push_back(ga.opacity_logit);
      for (std::size_t c = 0; c < ag.base.sh.size(); ++c) {
        for (int k = 0; k < 3; ++k) {
          slots.push_back(&ag.base.sh[c][k]);
          analytic.push_back(ga.sh[c][k]);
        }
      }
    }
    const std::size_t mesh_and_gaussians = analytic.size();
    for (int l = 0; l < fx.model.rdf.net.layers(); ++l) {
      auto& w = fx.model.rdf.net.weight(l);
      for (Eigen::Index i = 0; i < w.size(); ++i) {
        slots.push_back(w.data() + i);
        analytic.push_back(g.rdf.weights[l].data()[i]);
      }
      auto& b = fx.model.rdf.net.bias(l);
      for (Eigen::Index i = 0; i < b.size(); ++i) {
        slots.push_back(b.data() + i);
        analytic.push_back(g.rdf.biases[l][i]);
      }
    }
    const auto numeric = central_differences(slots, [&] { return fx.loss(); }, 1e-6);
    EXPECT_LE(max_relative_error(analytic, numeric), 1e-3) << "seed " << seed;
    // The mesh and Gaussian block alone, so network weights cannot mask it.
    const std::vector<double> a0(analytic.begin(), analytic.begin() + mesh_and_gaussians);
    const std::vector<double> n0(numeric.begin(), numeric.begin() + mesh_and_gaussians);
    EXPECT_LE(max_relative_error(a0, n0), 1e-3) << "seed " << seed;
  }
}

TEST(MaGSModel, ZeroFieldMatchesMeshDrivenBakeExactly) {
  Fixture fx(5);
  fx.model.rdf = RdfField(16, 8, 9);
  fx.pose();
  update_hover(fx.model);
  const auto with_field = rasterize(bake_model(fx.model), fx.cam, Vec3::Zero());
  MaGSModel plain = fx.model;
  plain.use_rdf = false;
  update_hover(plain);
  const auto without = rasterize(bake_model(plain), fx.cam, Vec3::Zero());
  EXPECT_EQ(with_field.color.data, without.color.data);
  for (const auto& ag : fx.model.gaussians) {
    EXPECT_EQ(ag.d_alpha, Vec3::Zero());
    EXPECT_EQ(ag.d_mu, Vec3::Zero());
  }
}

TEST(MaGSModel, DisabledFieldHasNoNetworkGradient) {
  Fixture fx(6);
  fx.model.use_rdf = false;
  const ModelGrad g = fx.grad();
  for (const auto& w : g.rdf.weights) EXPECT_TRUE(w.isZero(0.0));
}

TEST(MaGSModel, ValidateRejectsBadFacet) {
  Fixture fx(7);
  fx.model.gaussians[0].facet = 6;
  EXPECT_THROW(fx.model.validate(), Error);
}

TEST(HandlesFromField, ZeroFieldReturnsRestPositions) {
  const TriMesh m = hex_fan();
  const DfField df(0, 16, 8, 3);
  const std::vector<int> handles = {0, 3, 5};
  const auto targets = handles_from_field(m, handles, df, 0.7);
  for (std::size_t k = 0; k < handles.size(); ++k) EXPECT_EQ(targets[k], m.rest[handles[k]]);
  EXPECT_THROW(handles_from_field(m, {9}, df, 0.0), Error);
}

TEST(HandlesFromField, AddsPositionalDelta) {
  const TriMesh m = hex_fan();
  DfField df(0, 16, 4, 3);
  df.net.initialize(4, false);
  const auto targets = handles_from_field(m, {2}, df, 0.25);
  EXPECT_EQ(targets[0], m.rest[2] + df_query(df, m.rest[2], 0.25).d_mu);
}

}  // namespace
}  // namespace mags
