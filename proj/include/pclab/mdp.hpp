#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include "pclab/core.hpp"
#include "pclab/grid.hpp"
#include "pclab/random.hpp"

namespace pclab {

struct Outcome {
  Vector next;
  double prob;
};

using StepFn = std::function<Vector(const Vector& s, const Vector& a, const Vector& w)>;
using KernelFn = std::function<std::vector<Outcome>(const Vector& s, const Vector& a)>;
using CostFn = std::function<double(const Vector& s, const Vector& a)>;
using ConstraintFn = std::function<Vector(const Vector& s, const Vector& a)>;
using Policy = std::function<Vector(const Vector& s)>;

/// Discretized stochastic MDP.
///
/// The transition is s+ = step(s, a, w) with w drawn from independent
/// truncated normals (one per noise dimension), or, when `kernel` is set, an
/// exact finite-support distribution. The stage cost is `cost` where every
/// component of `constraint` is <= 0 and +inf elsewhere.
class TabularMDP {
 public:
  struct Spec {
    Grid states;
    Grid actions;
    StepFn step;
    std::vector<TruncatedNormal> noise;
    KernelFn kernel;
    CostFn cost;
    ConstraintFn constraint;
    double gamma = 0.9;
    /// Compact set every transition must stay in; defaults to the state grid box.
    std::optional<Box> bounds;
    int quadrature_points = 15;
  };

  explicit TabularMDP(Spec spec);

  const Grid& states() const { return spec_.states; }
  const Grid& actions() const { return spec_.actions; }
  double gamma() const { return spec_.gamma; }
  const Box& bounds() const { return bounds_; }
  std::size_t noise_dim() const { return spec_.noise.size(); }
  bool deterministic() const;

  /// L(s, a) with the constraint folded in as +inf. Throws DomainError when
  /// s or a lie outside their boxes.
  ExtReal stage_cost(const Vector& s, const Vector& a) const;
  /// Same without domain checks; used by solvers on clamped points.
  double stage_cost_unchecked(const Vector& s, const Vector& a) const;
  double base_cost(const Vector& s, const Vector& a) const { return spec_.cost(s, a); }

  Vector step(const Vector& s, const Vector& a, const Vector& w) const { return spec_.step(s, a, w); }

  /// Successor distribution used for expectations: the exact kernel when
  /// present, otherwise the tensor Gauss–Legendre rule over the noise box.
  std::vector<Outcome> successors(const Vector& s, const Vector& a) const;
  Vector expected_next(const Vector& s, const Vector& a) const;
  Vector sample_next(const Vector& s, const Vector& a, Rng& rng) const;

  /// Largest finite |stage cost| over grid nodes (bound used for horizon truncation).
  double cost_bound() const;

 private:
  Spec spec_;
  Box bounds_;
  std::vector<std::pair<Vector, double>> noise_rule_;
};

/// x+ = A x + B u + L z, y = C x + v. z has independent standard normal
/// components truncated at +-truncation, L is the Cholesky factor of W.
/// v is optional measurement noise (per output, truncated the same way).
struct StochasticLinearSystem {
  Matrix A;
  Matrix B;
  Matrix C;
  Matrix W;
  Matrix Qc;
  Matrix Rc;
  double truncation = 4.0;
  double measurement_sigma = 0.0;

  Eigen::Index n() const { return A.rows(); }
  Eigen::Index m() const { return B.cols(); }
  Eigen::Index q() const { return C.rows(); }

  /// Throws DomainError on inconsistent dimensions or non-PSD/PD matrices.
  void validate() const;
  /// Cholesky-type factor L with L L^T = W (zero columns allowed for singular W).
  Matrix noise_factor() const;
  /// Covariance of the truncated process noise actually realized.
  Matrix effective_noise_covariance() const;
  /// Draw one process-noise vector.
  Vector sample_process_noise(Rng& rng) const;
  Vector sample_measurement_noise(Rng& rng) const;
};

/// Markov-chain realization. |states| = |actions| + 1 = |costs| + 1.
struct Trajectory {
  std::vector<Vector> states;
  std::vector<Vector> actions;
  std::vector<double> costs;
  std::uint64_t seed = 0;

  /// CSV with columns k, s0.., a0.., cost (last row has no action/cost).
  void write_csv(std::ostream& os) const;
};

struct PerformanceEstimate {
  double mean = 0.0;
  double half_width = 0.0;  // 95% normal-approximation half-width
  std::size_t n = 0;

  double lower() const { return mean - half_width; }
  double upper() const { return mean + half_width; }
  bool contains(double x) const { return x >= lower() && x <= upper(); }
};

struct SteadyStateReport {
  std::vector<double> histogram;  // mass per state-grid cell
  Box support_box;
  double perturbation_radius = 0.0;
  bool diverged = false;
  std::vector<Vector> samples;  // post burn-in states

  Vector histogram_mean(const Grid& grid) const;
  Matrix histogram_covariance(const Grid& grid) const;
};

/// Horizon H with gamma^H * cost_bound < tol.
std::size_t truncation_horizon(const TabularMDP& mdp, double tol = 1e-6);

Trajectory rollout(const TabularMDP& mdp, const Policy& policy, const Vector& s0, std::size_t horizon,
                   std::uint64_t seed);

/// Monte-Carlo estimate of the discounted closed-loop cost from s0.
PerformanceEstimate estimate_performance(const TabularMDP& mdp, const Policy& policy, const Vector& s0,
                                         std::size_t n_rollouts, std::size_t horizon, std::uint64_t seed = 0);

/// Paired estimate of J(a) - J(b): replicate i of both policies shares one
/// random stream, so common noise cancels in the difference.
PerformanceEstimate estimate_performance_gap(const TabularMDP& mdp, const Policy& a, const Policy& b,
                                             const Vector& s0, std::size_t n_rollouts, std::size_t horizon,
                                             std::uint64_t seed = 0);

/// Simulates the chain with actions drawn uniformly from B(policy(s), r)
/// (clamped to the action box). Leaving the bounding box sets `diverged`.
SteadyStateReport estimate_steady_state(const TabularMDP& mdp, const Policy& policy, double r,
                                        std::size_t burn_in, std::size_t n_samples, std::uint64_t seed,
                                        std::optional<Vector> s0 = std::nullopt);

}  // namespace pclab
