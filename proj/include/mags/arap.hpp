#pragma once

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "errors.hpp"
#include "geom.hpp"
#include "mesh.hpp"
#include "parallel.hpp"

namespace mags {

struct HandleConstraint {
  int vertex = 0;
  Vec3 target = Vec3::Zero();
};

struct ArapOptions {
  int max_iterations = 50;
  // Stop once no vertex moves more than this in a global step. Non-positive
  // means 1e-5 times the rest bounding-box diagonal.
  double tolerance = 0.0;
  bool cotangent_weights = false;
};

struct ArapProblem {
  TriMesh mesh;
  std::vector<HandleConstraint> handles;
  // Per edge of mesh.edges(); empty selects the weights named by options.
  std::vector<double> edge_weights;
  ArapOptions options;
};

struct ArapSolution {
  std::vector<Vec3> deformed;
  std::vector<Mat3> rotations;
  double energy = 0.0;
  int iterations = 0;
  std::vector<double> energy_history;
};

// Sum over directed one-ring edges of w_ij |(v'_i - v'_j) - R_i (v_i - v_j)|^2.
inline double arap_energy(const std::vector<Vec3>& rest, const std::vector<Vec3>& deformed,
                          const std::vector<Mat3>& rotations, const std::vector<std::pair<int, int>>& edges,
                          const std::vector<double>& weights) {
  double e = 0.0;
  for (std::size_t k = 0; k < edges.size(); ++k) {
    const auto [i, j] = edges[k];
    const double w = weights.empty() ? 1.0 : weights[k];
    const Vec3 d = deformed[i] - deformed[j];
    const Vec3 r = rest[i] - rest[j];
    e += w * (d - rotations[i] * r).squaredNorm();
    e += w * (-d + rotations[j] * r).squaredNorm();
  }
  return e;
}

// Half-sum of the opposite-angle cotangents, floored so weights stay positive.
inline std::vector<double> cotangent_weights(const std::vector<Vec3>& v, const std::vector<Face>& faces,
                                             const std::vector<std::pair<int, int>>& edges) {
  std::map<std::pair<int, int>, double> acc;
  for (const auto& f : faces) {
    for (int k = 0; k < 3; ++k) {
      const int a = f[k], b = f[(k + 1) % 3], c = f[(k + 2) % 3];
      const Vec3 u = v[a] - v[c], w = v[b] - v[c];
      const double cross = u.cross(w).norm();
      const double cot = cross > 1e-300 ? u.dot(w) / cross : 0.0;
      acc[{std::min(a, b), std::max(a, b)}] += 0.5 * cot;
    }
  }
  std::vector<double> out;
  out.reserve(edges.size());
  for (const auto& e : edges) out.push_back(std::max(acc[e], 1e-6));
  return out;
}

// Prefactored global step for a fixed topology, weight set and handle set.
class ArapSolver {
 public:
  ArapSolver(const TriMesh& mesh, std::vector<int> handle_vertices, const ArapOptions& options = {},
             std::vector<double> edge_weights = {})
      : n_(static_cast<int>(mesh.vertex_count())),
        handles_(std::move(handle_vertices)),
        options_(options),
        edges_(mesh.edges()),
        weights_(std::move(edge_weights)) {
    if (handles_.empty()) fail(ErrorCode::NoConstraints, "ARAP needs at least one handle");
    std::vector<char> seen(n_, 0);
    for (int h : handles_) {
      if (h < 0 || h >= n_) fail(ErrorCode::InvalidHandle, "handle vertex " + std::to_string(h) + " out of range");
      if (seen[h]) fail(ErrorCode::InvalidHandle, "duplicate handle vertex " + std::to_string(h));
      seen[h] = 1;
    }
    if (weights_.empty()) {
      weights_ = options_.cotangent_weights ? cotangent_weights(mesh.rest, mesh.faces, edges_)
                                            : std::vector<double>(edges_.size(), 1.0);
    }
    if (weights_.size() != edges_.size()) fail(ErrorCode::DimensionMismatch, "edge weight count mismatch");
    for (double w : weights_) {
      if (!(w > 0.0)) fail(ErrorCode::InvalidArgument, "edge weights must be positive");
    }

    // Every component needs a handle or the reduced Laplacian is singular.
    const auto comp = mesh.vertex_components();
    const int ncomp = n_ == 0 ? 0 : *std::max_element(comp.begin(), comp.end()) + 1;
    std::vector<char> anchored(ncomp, 0);
    for (int h : handles_) anchored[comp[h]] = 1;
    for (int v = 0; v < n_; ++v) {
      if (!anchored[comp[v]]) {
        fail(ErrorCode::SolverSingular,
             "vertex " + std::to_string(v) + " lies in a component without handles; the constrained system is singular");
      }
    }

    neighbors_.assign(n_, {});
    for (std::size_t k = 0; k < edges_.size(); ++k) {
      const auto [i, j] = edges_[k];
      neighbors_[i].push_back({j, weights_[k]});
      neighbors_[j].push_back({i, weights_[k]});
    }

    free_index_.assign(n_, -1);
    for (int v = 0; v < n_; ++v) {
      if (!seen[v]) {
        free_index_[v] = static_cast<int>(free_.size());
        free_.push_back(v);
      }
    }
    if (!free_.empty()) {
      std::vector<Eigen::Triplet<double>> trip;
      for (int v : free_) {
        const int r = free_index_[v];
        double diag = 0.0;
        for (const auto& [j, w] : neighbors_[v]) {
          diag += w;
          if (free_index_[j] >= 0) trip.emplace_back(r, free_index_[j], -w);
        }
        trip.emplace_back(r, r, diag);
      }
      Eigen::SparseMatrix<double> lap(static_cast<int>(free_.size()), static_cast<int>(free_.size()));
      lap.setFromTriplets(trip.begin(), trip.end());
      llt_.compute(lap);
      if (llt_.info() != Eigen::Success) {
        fail(ErrorCode::SolverSingular, "constrained Laplacian is not positive definite");
      }
    }
  }

  const std::vector<int>& handle_vertices() const { return handles_; }
  const std::vector<std::pair<int, int>>& edges() const { return edges_; }
  const std::vector<double>& weights() const { return weights_; }

  // targets[k] is the goal for handle_vertices()[k]. A warm start supplies the
  // initial free-vertex positions.
  ArapSolution solve(const std::vector<Vec3>& rest, const std::vector<Vec3>& targets,
                     const std::vector<Vec3>* warm_start = nullptr) const {
    if (static_cast<int>(rest.size()) != n_) fail(ErrorCode::DimensionMismatch, "rest vertex count mismatch");
    if (targets.size() != handles_.size()) fail(ErrorCode::DimensionMismatch, "handle target count mismatch");
    if (warm_start && static_cast<int>(warm_start->size()) != n_) {
      fail(ErrorCode::DimensionMismatch, "warm start vertex count mismatch");
    }

    double tol = options_.tolerance;
    if (tol <= 0.0) {
      Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
      for (const auto& v : rest) {
        lo = lo.cwiseMin(v);
        hi = hi.cwiseMax(v);
      }
      tol = 1e-5 * (rest.empty() ? 1.0 : (hi - lo).norm());
    }

    ArapSolution sol;
    if (warm_start) {
      sol.deformed = *warm_start;
    } else {
      // Rest pose carried by the mean handle displacement.
      Vec3 shift = Vec3::Zero();
      for (std::size_t k = 0; k < handles_.size(); ++k) shift += targets[k] - rest[handles_[k]];
      shift /= static_cast<double>(handles_.size());
      sol.deformed = rest;
      for (auto& v : sol.deformed) v += shift;
    }
    for (std::size_t k = 0; k < handles_.size(); ++k) sol.deformed[handles_[k]] = targets[k];
    sol.rotations.assign(n_, Mat3::Identity());

    // Fixed handle contribution to the right-hand side.
    Eigen::MatrixXd fixed = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(free_.size()), 3);
    for (int v : free_) {
      for (const auto& [j, w] : neighbors_[v]) {
        if (free_index_[j] < 0) fixed.row(free_index_[v]) += w * sol.deformed[j].transpose();
      }
    }

    local_step(rest, sol);
    double energy = arap_energy(rest, sol.deformed, sol.rotations, edges_, weights_);
    sol.energy_history.push_back(energy);
    for (int it = 0; it < options_.max_iterations && !free_.empty(); ++it) {
      const double moved = global_step(rest, fixed, sol);
      const double solved = arap_energy(rest, sol.deformed, sol.rotations, edges_, weights_);
      check_monotone(energy, solved, it, "global");
      energy = solved;
      local_step(rest, sol);
      const double after = arap_energy(rest, sol.deformed, sol.rotations, edges_, weights_);
      check_monotone(energy, after, it, "local");
      energy = after;
      sol.energy_history.push_back(energy);
      sol.iterations = it + 1;
      if (moved < tol) break;
    }
    sol.energy = energy;
    return sol;
  }

 private:
  struct Neighbor {
    int vertex;
    double weight;
  };

  void local_step(const std::vector<Vec3>& rest, ArapSolution& sol) const {
    parallel_for(0, n_, [&](int i) {
      Mat3 cov = Mat3::Zero();
      for (const auto& [j, w] : neighbors_[i]) {
        cov += w * (sol.deformed[i] - sol.deformed[j]) * (rest[i] - rest[j]).transpose();
      }
      try {
        sol.rotations[i] = polar_rotation(cov);
      } catch (const Error& e) {
        // A degenerate one-ring leaves the previous rotation, which cannot
        // raise the energy.
        if (e.code() != ErrorCode::RankDeficient) throw;
      }
    });
  }

  double global_step(const std::vector<Vec3>& rest, const Eigen::MatrixXd& fixed, ArapSolution& sol) const {
    Eigen::MatrixXd rhs = fixed;
    for (int v : free_) {
      Vec3 b = Vec3::Zero();
      for (const auto& [j, w] : neighbors_[v]) {
        b += 0.5 * w * (sol.rotations[v] + sol.rotations[j]) * (rest[v] - rest[j]);
      }
      rhs.row(free_index_[v]) += b.transpose();
    }
    const Eigen::MatrixXd x = llt_.solve(rhs);
    if (llt_.info() != Eigen::Success || !x.allFinite()) {
      fail(ErrorCode::SolverSingular, "global ARAP solve failed");
    }
    double moved = 0.0;
    for (int v : free_) {
      const Vec3 p = x.row(free_index_[v]).transpose();
      moved = std::max(moved, (p - sol.deformed[v]).norm());
      sol.deformed[v] = p;
    }
    return moved;
  }

  static void check_monotone(double before, double after, int it, const char* step) {
    if (after > before + 1e-9 * (1.0 + before)) {
      fail(ErrorCode::SolverSingular, std::string("ARAP energy increased in ") + step + " step at iteration " +
                                          std::to_string(it) + " (" + std::to_string(before) + " -> " +
                                          std::to_string(after) + ")");
    }
  }

  int n_;
  std::vector<int> handles_;
  ArapOptions options_;
  std::vector<std::pair<int, int>> edges_;
  std::vector<double> weights_;
  std::vector<std::vector<Neighbor>> neighbors_;
  std::vector<int> free_;
  std::vector<int> free_index_;
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt_;
};

inline ArapSolution arap_solve(const ArapProblem& problem, const std::vector<Vec3>* warm_start = nullptr) {
  std::vector<int> ids;
  std::vector<Vec3> targets;
  for (const auto& h : problem.handles) {
    ids.push_back(h.vertex);
    targets.push_back(h.target);
  }
  const ArapSolver solver(problem.mesh, ids, problem.options, problem.edge_weights);
  return solver.solve(problem.mesh.rest, targets, warm_start);
}

}  // namespace mags
