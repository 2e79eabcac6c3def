#pragma once

// Data-parallel inner loops. Every kernel has a serial reference and an
// OpenMP variant that must produce bit-identical output; tests hold them to
// that and bench/ compares their speed.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "pclab/grid.hpp"
#include "pclab/mdp.hpp"

namespace pclab::kernels {

/// Sparse one-step backup over (state node, action node) pairs:
///   Q(i, j) = stage(i, j) + gamma * sum_k weight_k * V[index_k]
/// with the entries of pair p stored in [offsets[p], offsets[p + 1]).
struct BellmanOperator {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  std::vector<double> stage;
  std::vector<std::size_t> offsets;
  std::vector<std::uint32_t> index;
  std::vector<double> weight;

  std::size_t pair(std::size_t i, std::size_t j) const { return i * n_actions + j; }
};

/// Stage cost and successor distribution of pair (state node, action node).
using PairFn = std::function<void(const Vector& s, const Vector& a, double& stage, std::vector<Outcome>& next)>;

/// Builds the operator by interpolating every successor onto `states`.
BellmanOperator build_operator(const Grid& states, const Grid& actions, const PairFn& pair_fn);

/// Operator of a TabularMDP (kernel or quadrature successors).
BellmanOperator build_operator(const TabularMDP& mdp);

/// One Jacobi sweep. Writes V_next(i) = min_j Q(i, j) and the lowest
/// minimizing action index. `q` is filled with all Q(i, j) when non-empty.
void bellman_sweep_serial(const BellmanOperator& op, double gamma, std::span<const double> v,
                          std::span<double> v_next, std::span<std::uint32_t> argmin, std::span<double> q);
void bellman_sweep_omp(const BellmanOperator& op, double gamma, std::span<const double> v,
                       std::span<double> v_next, std::span<std::uint32_t> argmin, std::span<double> q);

/// Truncated discounted return of one rollout from s0 drawing noise from `rng`.
/// Throws DomainError when the state leaves the bounding box or the policy
/// leaves the action box. Returns +inf on an infinite stage cost.
double discounted_return(const TabularMDP& mdp, const Policy& policy, const Vector& s0, std::size_t horizon,
                         Rng& rng);

/// Replicate i uses make_stream(seed, i).
std::vector<double> discounted_returns_serial(const TabularMDP& mdp, const Policy& policy, const Vector& s0,
                                              std::size_t n, std::size_t horizon, std::uint64_t seed);
std::vector<double> discounted_returns_omp(const TabularMDP& mdp, const Policy& policy, const Vector& s0,
                                           std::size_t n, std::size_t horizon, std::uint64_t seed);

/// Threads OpenMP will use (1 when built without OpenMP).
int max_threads();

}  // namespace pclab::kernels
