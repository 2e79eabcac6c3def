#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include <json.hpp>

#include "pclab/core.hpp"
#include "pclab/exact_solver.hpp"
#include "pclab/mdp.hpp"
#include "pclab/predictive_control.hpp"

namespace pclab {

/// Least-squares tensor Chebyshev fit of a value function on a box. Used as a
/// smooth stand-in for V* where derivatives of order 3 and 4 are needed.
class ChebyshevProxy {
 public:
  ChebyshevProxy(const ValueFn& v, Box region, int degree, int samples_per_axis = 0);

  double operator()(const Vector& x) const;
  ValueFn as_function() const;
  const Box& region() const { return region_; }
  int degree() const { return degree_; }
  /// RMS misfit on the fitting lattice.
  double fit_rms() const { return fit_rms_; }

 private:
  Box region_;
  int degree_;
  Vector coef_;
  double fit_rms_ = 0.0;
};

/// s' P s + v0 of an LQR solution as a value function.
ValueFn quadratic_value(const RiccatiSolution& sol);

/// Central finite-difference partial derivative D^alpha f(x) with step h,
/// tensor product of second-order 1-D stencils, Richardson-extrapolated once.
/// Orders up to 4 per coordinate.
double fd_partial(const ValueFn& f, const Vector& x, const std::vector<int>& alpha, double h);

/// Hessian by fd_partial.
Matrix fd_hessian(const ValueFn& f, const Vector& x, double h);

/// E[V*(s+) | s, a] - V*(f(s, a)), both terms through `vstar`.
/// Throws DomainError if f(s, a) leaves the state box or V* is infinite on a successor.
double compute_delta(const TabularMDP& mdp, const PredictionModel& model, const ValueFn& vstar, const Vector& s,
                     const Vector& a);

/// Probe region: steady-state samples of the chain driven by pi* with
/// actions perturbed uniformly in B(pi*(s), r), and actions uniform in the same ball.
struct ProbeOptions {
  double r = 0.0;
  std::size_t n_probes = 200;
  std::size_t burn_in = 200;
  std::size_t chain_length = 4000;
  std::uint64_t seed = 0;
  std::optional<Vector> s0;
};

struct ProbeSet {
  std::vector<Vector> states;
  std::vector<Vector> actions;
  double r = 0.0;
  SteadyStateReport steady;
};

/// Throws DomainError when the chain leaves the bounding box.
ProbeSet draw_probes(const TabularMDP& mdp, const Policy& pistar, const ProbeOptions& opts);

struct GapProbe {
  Vector s;
  Vector a;
  double delta = 0.0;
  double quadratic_term = 0.0;  // 0.5 Tr(Sigma Hess V*(f))
  double remainder = 0.0;       // delta - quadratic_term
  double third_order = 0.0;     // sum_{|alpha|=3} |D^alpha V*(f)| / alpha! * mu3
  double fourth_order = 0.0;    // c * mu4
  double mu2 = 0.0;             // E ||s+ - f||_inf^k
  double mu3 = 0.0;
  double mu4 = 0.0;

  double bound() const { return fourth_order + third_order; }
};

/// Delta over every (state node, action node) pair whose successors stay
/// strictly inside the state box.
struct GlobalDelta {
  double mean = 0.0;
  double spread = 0.0;
  double cv = 0.0;
  std::size_t count = 0;
};

struct GapReport {
  std::vector<GapProbe> probes;
  double v0_hat = 0.0;
  double spread = 0.0;  // max |delta - v0_hat|
  double cv = 0.0;      // std / |mean|, 0 when every delta is 0
  double c = 0.0;       // Taylor constant over the successor hull
  Box hull;
  bool smooth = false;
  std::optional<GlobalDelta> global;

  double relative_spread() const;
  double max_abs_remainder() const;
  nlohmann::json to_json() const;
  /// One row per probe.
  void write_csv(std::ostream& os) const;
};

struct DeltaOptions {
  /// Finite-difference step; <= 0 selects one state-grid cell.
  double fd_step = 0.0;
  /// Whether vstar is smooth enough for third and fourth derivatives.
  bool smooth = false;
  bool global = false;
  /// Lattice points per axis for the Taylor constant search; 0 picks by dimension.
  std::size_t hull_points = 0;
};

GapReport delta_constancy_report(const TabularMDP& mdp, const PredictionModel& model, const ValueFn& vstar,
                                 const ProbeSet& probes, const DeltaOptions& opts = {});

/// Convenience form drawing its own probes.
GapReport delta_constancy_report(const TabularMDP& mdp, const PredictionModel& model, const ValueFn& vstar,
                                 const Policy& pistar, double r, std::size_t n_probes, std::uint64_t seed,
                                 const DeltaOptions& opts = {});

GlobalDelta global_delta(const TabularMDP& mdp, const PredictionModel& model, const ValueFn& vstar);

struct Lemma1Result {
  bool applicable = false;
  std::vector<bool> pass;
  std::vector<double> margin;  // bound - |R|
  bool all_pass() const;
  std::size_t failures() const;
};

/// |R| <= c mu4 + third-order term at every probe. Not applicable unless the
/// report was built from a smooth value function with finite derivatives.
Lemma1Result lemma1_check(const GapReport& report);

/// h_s^2/8 max|V''| + h_a^2/8 max|d^2 Q / da^2| per stage, summed over the
/// N + 1 interpolation layers with discounting. Curvature is taken over
/// pairs whose successors stay strictly inside the state box.
double grid_error_bound(const TabularMDP& mdp, const ValueIterationResult& vi, std::size_t horizon);

struct VerdictProbe {
  Vector s;
  std::size_t mpc_index = 0;
  std::size_t star_index = 0;
  double suboptimality = 0.0;  // Q*(s, a_mpc) - min_a Q*(s, a)
  double max_residual = 0.0;   // max over local actions of |Q_mpc + Q0 - Q*|
  bool mismatch = false;
};

struct OptimalityVerdict {
  double q0_hat = 0.0;
  double max_offset_residual = 0.0;
  double max_exact_residual = 0.0;  // same with q0 forced to 0
  double tie_tolerance = 0.0;
  double argmin_mismatch_rate = 0.0;
  std::size_t mismatches = 0;
  std::size_t local_pairs = 0;
  std::optional<PerformanceEstimate> policy_gap;
  std::vector<VerdictProbe> probes;

  nlohmann::json to_json() const;
  void write_csv(std::ostream& os) const;
};

struct Theorem1Options {
  /// Radius of the local action set around pi*(s) for the residual.
  double r = 0.0;
  /// An MPC action counts as a mismatch when it is worse than the best
  /// action for Q* by more than this.
  double tie_tolerance = 1e-9;
  double stage_offset = 0.0;
  std::size_t rollouts = 0;  // 0 skips the closed-loop gap
  std::size_t horizon = 0;   // 0 = truncation_horizon(mdp)
  std::uint64_t seed = 0;
  std::optional<Vector> s0;
  bool parallel = true;
};

/// Builds the N-step grid MPC with the given model and T = V*, compares its
/// Q with Q* on the probe states, and estimates J(pi_mpc) - J(pi*).
OptimalityVerdict theorem1_check(const TabularMDP& mdp, const PredictionModel& model, const ValueIterationResult& vi,
                                 std::size_t horizon, const std::vector<Vector>& probe_states,
                                 const Theorem1Options& opts);

struct TelescopingResult {
  double residual = 0.0;        // max |Q_hat_mpc - Q*| over local probe pairs
  double min_advantage = 0.0;   // max_s |min_a A*(s, a)| at probe states
  double discount_sum = 0.0;    // gamma (1 - gamma^N) / (1 - gamma)
  std::size_t pairs = 0;
};

/// MPC with stage cost L + gamma v0 and T = V* against Q*.
TelescopingResult telescoping_identity_check(const TabularMDP& mdp, const PredictionModel& model,
                                             const ValueIterationResult& vi, std::size_t horizon, double v0,
                                             const std::vector<Vector>& probe_states, double r, bool parallel = true);

}  // namespace pclab
