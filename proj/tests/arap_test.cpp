#include <gtest/gtest.h>

#include <random>

#include "mags/arap.hpp"
#include "oracles.hpp"

namespace mags {
namespace {

using namespace oracles;

TEST(ArapEnergy, Examples) {
  const TriMesh mesh = grid_mesh(3, 3);
  const auto edges = mesh.edges();
  std::vector<Mat3> ident(mesh.vertex_count(), Mat3::Identity());
  EXPECT_EQ(arap_energy(mesh.rest, mesh.rest, ident, edges, {}), 0.0);

  const Mat3 r = euler_rotation(Vec3(0.3, -0.7, 1.1));
  std::vector<Vec3> moved;
  for (const auto& v : mesh.rest) moved.push_back(r * v + Vec3(1, 2, 3));
  EXPECT_LE(arap_energy(mesh.rest, moved, std::vector<Mat3>(mesh.vertex_count(), r), edges, {}), 1e-24);

  const std::vector<Vec3> rest = {Vec3(0, 0, 0), Vec3(1, 0, 0)};
  const std::vector<Vec3> stretched = {Vec3(0, 0, 0), Vec3(2, 0, 0)};
  EXPECT_DOUBLE_EQ(arap_energy(rest, stretched, {Mat3::Identity(), Mat3::Identity()}, {{0, 1}}, {}), 2.0);
}

TEST(ArapSolve, AllHandlesRigid) {
  ArapProblem p{grid_mesh(3, 3), {}, {}, {}};
  const Mat3 r = euler_rotation(Vec3(0.2, 0.4, -0.5));
  for (int v = 0; v < 9; ++v) p.handles.push_back({v, r * p.mesh.rest[v] + Vec3(0.5, 0, -1)});
  const auto sol = arap_solve(p);
  for (int v = 0; v < 9; ++v) EXPECT_EQ(sol.deformed[v], p.handles[v].target);
  EXPECT_LE(sol.energy, 1e-9);
}

TEST(ArapSolve, BarMatchesBruteForce) {
  BarProblem bar;
  const double oracle = brute_force_arap(bar.mesh, bar.handles, 1e-10);
  EXPECT_NEAR(oracle, kBarEnergy, 1e-9);
  ArapProblem p{bar.mesh, bar.handles, {}, {.max_iterations = 500, .tolerance = 1e-13}};
  const auto sol = arap_solve(p);
  EXPECT_NEAR(sol.energy, oracle, 1e-6);
  for (const auto& h : bar.handles) EXPECT_LE((sol.deformed[h.vertex] - h.target).norm(), 1e-9);
  for (const auto& r : sol.rotations) EXPECT_TRUE(is_rotation(r, 1e-9));
}

TEST(ArapSolve, Errors) {
  ArapProblem empty{grid_mesh(3, 3), {}, {}, {}};
  try {
    arap_solve(empty);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoConstraints);
  }

  TriMesh lonely = grid_mesh(3, 3);
  lonely.rest.emplace_back(5, 5, 5);
  lonely.deformed = lonely.rest;
  ArapProblem singular{lonely, {{0, Vec3::Zero()}}, {}, {}};
  try {
    arap_solve(singular);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SolverSingular);
  }

  ArapProblem dup{grid_mesh(3, 3), {{0, Vec3::Zero()}, {0, Vec3::Zero()}}, {}, {}};
  EXPECT_THROW(arap_solve(dup), Error);
  ArapProblem range{grid_mesh(3, 3), {{9, Vec3::Zero()}}, {}, {}};
  try {
    arap_solve(range);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidHandle);
  }
}

TEST(ArapSolve, EnergyMonotoneOnRandomProblems) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 100; ++trial) {
    TriMesh mesh = random_sheet(rng, 4 + trial % 3, 3 + trial % 4);
    const int n = static_cast<int>(mesh.vertex_count());
    std::vector<int> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    std::shuffle(ids.begin(), ids.end(), rng);
    const int count = 1 + trial % 4;
    ArapProblem p{mesh, {}, {}, {.max_iterations = 30, .cotangent_weights = trial % 5 == 0}};
    for (int k = 0; k < count; ++k) {
      p.handles.push_back({ids[k], mesh.rest[ids[k]] + 0.4 * Vec3(u(rng), u(rng), u(rng))});
    }
    const auto sol = arap_solve(p);
    for (std::size_t k = 1; k < sol.energy_history.size(); ++k) {
      EXPECT_LE(sol.energy_history[k], sol.energy_history[k - 1] + 1e-12 * (1 + sol.energy_history[k - 1]))
          << "trial " << trial << " step " << k;
    }
    for (const auto& h : p.handles) EXPECT_LE((sol.deformed[h.vertex] - h.target).norm(), 1e-9);
    for (const auto& r : sol.rotations) EXPECT_TRUE(is_rotation(r, 1e-9));
  }
}

TEST(ArapSolve, RigidHandlesGiveRigidSolution) {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 10; ++trial) {
    TriMesh mesh = random_sheet(rng, 5, 4);
    const Mat3 r = euler_rotation(0.5 * Vec3(u(rng), u(rng), u(rng)));
    const Vec3 t(u(rng), u(rng), u(rng));
    ArapProblem p{mesh, {}, {}, {.max_iterations = 2000, .tolerance = 1e-12}};
    for (int v : {0, 4, 15, 19, 7}) p.handles.push_back({v, r * mesh.rest[v] + t});
    const auto sol = arap_solve(p);
    EXPECT_LE(sol.energy, 1e-6);
    for (std::size_t v = 0; v < mesh.vertex_count(); ++v) {
      EXPECT_LE((sol.deformed[v] - (r * mesh.rest[v] + t)).norm(), 1e-4);
    }
  }
}

TEST(ArapSolve, TranslationEquivariance) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 10; ++trial) {
    TriMesh mesh = random_sheet(rng, 5, 5);
    ArapProblem p{mesh, {}, {}, {}};
    for (int v : {0, 12, 24}) p.handles.push_back({v, mesh.rest[v] + 0.3 * Vec3(u(rng), u(rng), u(rng))});
    const auto a = arap_solve(p);
    const Vec3 shift(u(rng), u(rng), u(rng));
    for (auto& h : p.handles) h.target += shift;
    const auto b = arap_solve(p);
    ASSERT_EQ(a.iterations, b.iterations);
    for (std::size_t v = 0; v < mesh.vertex_count(); ++v) {
      EXPECT_LE((b.deformed[v] - a.deformed[v] - shift).norm(), 1e-8);
    }
  }
}

TEST(ArapSolver, WarmStartAndReuse) {
  TriMesh mesh = grid_mesh(5, 3, 0.5);
  const ArapSolver solver(mesh, {0, 10, 14}, {.max_iterations = 5000, .tolerance = 1e-10});
  std::vector<Vec3> targets = {mesh.rest[0], mesh.rest[10], mesh.rest[14] + Vec3(0, 0, 0.5)};
  const auto cold = solver.solve(mesh.rest, targets);
  const auto warm = solver.solve(mesh.rest, targets, &cold.deformed);
  EXPECT_LE(warm.iterations, 2);
  EXPECT_NEAR(warm.energy, cold.energy, 1e-6);
  const auto again = solver.solve(mesh.rest, targets);
  EXPECT_EQ(again.deformed, cold.deformed);
}

TEST(ArapSolve, CotangentWeightsKeepRigidMotion) {
  TriMesh mesh = grid_mesh(4, 4, 0.3);
  const Mat3 r = euler_rotation(Vec3(0.1, 0.2, 0.3));
  ArapProblem p{mesh, {}, {}, {.max_iterations = 2000, .tolerance = 1e-12, .cotangent_weights = true}};
  for (int v : {0, 3, 12, 15}) p.handles.push_back({v, r * mesh.rest[v]});
  const auto sol = arap_solve(p);
  for (std::size_t v = 0; v < mesh.vertex_count(); ++v) {
    EXPECT_LE((sol.deformed[v] - r * mesh.rest[v]).norm(), 1e-4);
  }
}

}  // namespace
}  // namespace mags
