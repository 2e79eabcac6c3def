#pragma once

#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pclab/core.hpp"
#include "pclab/exact_solver.hpp"
#include "pclab/grid.hpp"
#include "pclab/kernels.hpp"
#include "pclab/mdp.hpp"

namespace pclab {

enum class ModelProvenance { kTrueDeterministic, kExpectedValueAnalytic, kExpectedValueRegressed, kPerturbed };

std::string to_string(ModelProvenance p);

/// f(s, a) = A s + B a + d
struct LinearModel {
  Matrix A;
  Matrix B;
  Vector d;
};

/// Least-squares fit summary of a regressed model.
struct RegressionFit {
  std::vector<std::string> basis;  // regressor names, e.g. "1", "s0", "a0", "s0*a0"
  Matrix coefficients;             // state_dim x basis
  Matrix standard_errors;          // same shape
  double residual_rms = 0.0;
  std::size_t samples = 0;
};

/// Deterministic prediction model used inside MPC. Outputs are clamped to
/// `clamp_box` when one is set.
class PredictionModel {
 public:
  using Fn = std::function<Vector(const Vector& s, const Vector& a)>;

  PredictionModel(Fn f, ModelProvenance provenance, std::optional<Box> clamp_box = std::nullopt);
  static PredictionModel linear(LinearModel lm, ModelProvenance provenance,
                                std::optional<Box> clamp_box = std::nullopt);

  Vector operator()(const Vector& s, const Vector& a) const;
  ModelProvenance provenance() const { return provenance_; }
  const std::optional<LinearModel>& linear_form() const { return linear_; }
  const std::optional<RegressionFit>& fit() const { return fit_; }
  const std::optional<Box>& clamp_box() const { return clamp_; }

  /// Same model with a constant added to every prediction.
  PredictionModel perturbed(const Vector& bias) const;
  void attach_fit(RegressionFit fit) { fit_ = std::move(fit); }

 private:
  Fn f_;
  ModelProvenance provenance_;
  std::optional<Box> clamp_;
  std::optional<LinearModel> linear_;
  std::optional<RegressionFit> fit_;
};

/// Noise-free step of a deterministic MDP.
PredictionModel true_model(const TabularMDP& mdp);
/// f(s, a) = E[s+ | s, a] evaluated with the MDP's own quadrature or kernel.
PredictionModel expected_value_model(const TabularMDP& mdp);

enum class Basis { kLinear, kPolynomial2 };

/// Observed transitions (s, a, s+), one per column.
struct TransitionData {
  Matrix s;
  Matrix a;
  Matrix next;

  Eigen::Index size() const { return s.cols(); }
};

/// Least-squares fit of s+ on basis(s, a). Throws DomainError when there are
/// fewer than 10 samples per coefficient or when the regressors are rank
/// deficient (the message names the deficient directions). Data whose
/// targets are identically zero yields the zero model.
PredictionModel fit_expected_value_model(const TransitionData& data, Basis basis,
                                         std::optional<Box> clamp_box = std::nullopt);

/// Draws `n` transitions with (s, a) uniform on the grid boxes.
TransitionData sample_transitions(const TabularMDP& mdp, std::size_t n, std::uint64_t seed);

struct QuadraticCost {
  Matrix Q;
  Matrix R;
};

struct QuadraticTerminal {
  Matrix P;
  double offset = 0.0;
};

/// Finite-horizon problem
///   min  g^N T(x_N) + sum_i g^i (L(x_i, u_i) + stage_offset)
///   s.t. x_{i+1} = f(x_i, u_i), h(x_i, u_i) <= 0, x_0 = s, x_N in terminal set.
struct MPCProblem {
  PredictionModel model;
  CostFn stage_cost;
  ConstraintFn constraint;
  ValueFn terminal_cost;
  std::optional<Box> terminal_set;  // nullopt = whole state box
  std::size_t horizon = 1;
  double gamma = 0.9;
  double stage_offset = 0.0;
  std::optional<QuadraticCost> quadratic_cost;
  std::optional<QuadraticTerminal> quadratic_terminal;

  /// L(s, a) + stage_offset, +inf when h(s, a) > 0.
  double extended_stage_cost(const Vector& s, const Vector& a) const;
};

struct MPCSolution {
  ExtReal value = ExtReal::infinity();
  std::vector<Vector> inputs;  // u*_0 .. u*_{N-1}
  std::vector<Vector> states;  // x*_0 .. x*_N
  bool feasible = false;

  /// Columns i, x<k>, u<k> (last row has no input).
  void write_csv(std::ostream& os) const;
};

/// Common interface of the two solution backends.
class MpcBackend {
 public:
  virtual ~MpcBackend() = default;
  virtual MPCSolution solve(const Vector& s) const = 0;
  /// Optimum with the first input pinned to a.
  virtual ExtReal q(const Vector& s, const Vector& a) const = 0;
  virtual const MPCProblem& problem() const = 0;
  /// u*_0 only, nullopt when infeasible.
  virtual std::optional<Vector> first_input(const Vector& s) const;
};

/// Exact optimum over a discretized action grid by backward recursion with
/// multilinearly interpolated cost-to-go tables on a state grid.
class GridDpMpc final : public MpcBackend {
 public:
  GridDpMpc(MPCProblem problem, Grid states, Grid actions, bool parallel = true);

  MPCSolution solve(const Vector& s) const override;
  ExtReal q(const Vector& s, const Vector& a) const override;
  const MPCProblem& problem() const override { return problem_; }
  std::optional<Vector> first_input(const Vector& s) const override;

  /// Cost-to-go tables V_1 .. V_N (V_N = T restricted to the terminal set).
  const ValueTable& cost_to_go(std::size_t stage) const { return tables_.at(stage - 1); }
  /// V_0 and the first-input argmin at every state node.
  const ValueTable& value_table() const { return value0_; }
  const PolicyTable& policy_table() const { return policy0_; }
  const Grid& states() const { return states_; }
  const Grid& actions() const { return actions_; }

  /// Lowest-index argmin of q(s, .) over the action grid, nullopt if infeasible.
  std::optional<std::size_t> argmin(const Vector& s) const;

 private:
  std::size_t argmin_stage(const Vector& x, std::size_t stage, double& best) const;

  MPCProblem problem_;
  Grid states_;
  Grid actions_;
  std::vector<Vector> action_nodes_;
  std::vector<ValueTable> tables_;
  ValueTable value0_;
  PolicyTable policy0_;
};

/// Exact continuous optimum of a linear-quadratic, unconstrained problem by
/// stacked least squares. Throws DomainError when the problem is not LQ.
class BatchLqMpc final : public MpcBackend {
 public:
  explicit BatchLqMpc(MPCProblem problem);

  MPCSolution solve(const Vector& s) const override;
  ExtReal q(const Vector& s, const Vector& a) const override;
  const MPCProblem& problem() const override { return problem_; }

 private:
  double cost(const Vector& s, const Vector& u) const;
  Vector optimal_inputs(const Vector& s, std::optional<Vector> first) const;

  MPCProblem problem_;
  Eigen::Index n_ = 0;
  Eigen::Index m_ = 0;
  Matrix hessian_;  // H of U'HU + 2 (F s + e)'U
  Matrix linear_;   // F
  Vector affine_;   // e
};

/// s -> u*_0 of the backend. Infeasible states throw InfeasibleError from
/// operator(); try_action reports them as nullopt.
class MpcPolicy {
 public:
  explicit MpcPolicy(std::shared_ptr<const MpcBackend> backend) : backend_(std::move(backend)) {}
  Vector operator()(const Vector& s) const;
  std::optional<Vector> try_action(const Vector& s) const;
  Policy as_policy() const;

 private:
  std::shared_ptr<const MpcBackend> backend_;
};

MpcPolicy mpc_policy(std::shared_ptr<const MpcBackend> backend);

/// Input-output state x_i = [y_i, ..., y_{i-p}, u_{i-1}, ..., u_{i-l}] (most recent first).
struct IoStateLayout {
  Eigen::Index q = 1;
  Eigen::Index m = 1;
  std::size_t p = 0;
  std::size_t l = 0;

  Eigen::Index dim() const { return static_cast<Eigen::Index>(p + 1) * q + static_cast<Eigen::Index>(l) * m; }
  /// ys = y_i .. y_{i-p}, us = u_{i-1} .. u_{i-l}.
  Vector build(std::span<const Vector> ys, std::span<const Vector> us) const;
  /// State after applying u and observing y_next.
  Vector shift(const Vector& x, const Vector& y_next, const Vector& u) const;
  Vector output(const Vector& x) const { return x.head(q); }
  /// Row selector S with S x = y_i.
  Matrix output_selector() const;
};

}  // namespace pclab
