#pragma once

#include <functional>
#include <iosfwd>
#include <vector>

#include "pclab/core.hpp"
#include "pclab/grid.hpp"
#include "pclab/mdp.hpp"

namespace pclab {

using ValueFn = std::function<double(const Vector&)>;

/// Values on the nodes of a state grid; off-grid reads interpolate
/// multilinearly with clamped extrapolation. +inf marks infeasible nodes.
struct ValueTable {
  Grid grid;
  std::vector<double> values;

  double at(std::size_t node) const { return values[node]; }
  double operator()(const Vector& s) const { return grid.interpolate(values, s); }
  ValueFn as_function() const;
  void write_csv(std::ostream& os) const;
};

/// Q over state-grid x action-grid nodes, flat index state * |A| + action.
struct QTable {
  Grid states;
  Grid actions;
  std::vector<double> values;

  double at(std::size_t state, std::size_t action) const { return values[state * actions.size() + action]; }
  /// Multilinear in the joint (s, a) grid.
  double operator()(const Vector& s, const Vector& a) const;
  double row_min(std::size_t state) const;
  void write_csv(std::ostream& os) const;
};

/// Greedy action index per state node; ties go to the lowest action index.
struct PolicyTable {
  Grid states;
  Grid actions;
  std::vector<std::uint32_t> action_index;

  Vector action_at(std::size_t state) const { return actions.node(action_index[state]); }
  /// Multilinear interpolation of the node actions.
  Vector operator()(const Vector& s) const;
  Policy as_policy() const;
  void write_csv(std::ostream& os) const;
};

struct ValueIterationResult {
  ValueTable value;
  QTable q;
  PolicyTable policy;
  std::size_t iterations = 0;
  std::vector<double> residuals;  // sup-norm change per sweep over finite nodes
};

struct ValueIterationOptions {
  double tol = 1e-10;
  std::size_t max_iters = 100000;
  bool parallel = true;
};

/// Jacobi value iteration on the grid. The returned V is exactly the row
/// minimum of the returned Q and the policy attains it.
/// Throws ConvergenceError on hitting max_iters and InfeasibleError when
/// every node is infinite.
ValueIterationResult value_iteration(const TabularMDP& mdp, const ValueIterationOptions& opts = {});

/// One Bellman backup l(s, a) + gamma E[V(s+)] at an arbitrary (s, a).
double bellman_q(const TabularMDP& mdp, const ValueFn& v, const Vector& s, const Vector& a);

/// Q*(s, a) - V*(s) where Q* is finite, +inf otherwise.
ExtReal advantage(const QTable& q, const ValueTable& v, const Vector& s, const Vector& a);

struct RiccatiSolution {
  Matrix P;
  Matrix K;
  double v0 = 0.0;
  double residual = 0.0;
  std::size_t iterations = 0;

  double value(const Vector& s) const { return s.dot(P * s) + v0; }
  Vector policy(const Vector& s) const { return -K * s; }
};

/// Discounted Riccati fixed point
///   P = Qc + g A'PA - g^2 A'PB (Rc + g B'PB)^-1 B'PA,
///   K = g (Rc + g B'PB)^-1 B'PA,  v0 = g Tr(P W_eff) / (1 - g)
/// with W_eff the covariance of the truncated noise.
RiccatiSolution riccati_solve(const StochasticLinearSystem& sys, double gamma, double tol = 1e-12,
                              std::size_t max_iters = 1000000);

}  // namespace pclab
