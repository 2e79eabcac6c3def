#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "pclab/core.hpp"
#include "pclab/mdp.hpp"
#include "pclab/predictive_control.hpp"

namespace pclab {

enum class Excitation { kUniform, kPrbs };

std::string to_string(Excitation e);

/// Hankel-type data matrix. Column j stacks
///   y_{j-p} .. y_{j+N}, u_{j-l} .. u_{j+N-1}
/// (each block oldest first) taken from one recorded run.
struct TrajectoryLibrary {
  Matrix columns;
  std::size_t p = 0;
  std::size_t l = 0;
  std::size_t N = 1;
  Eigen::Index q = 1;
  Eigen::Index m = 1;
  std::uint64_t seed = 0;
  Excitation excitation = Excitation::kUniform;
  // The recorded run the columns were sliced from.
  std::vector<Vector> y;
  std::vector<Vector> u;

  Eigen::Index height() const { return column_height(p, l, N, q, m); }
  Eigen::Index count() const { return columns.cols(); }

  static Eigen::Index column_height(std::size_t p, std::size_t l, std::size_t N, Eigen::Index q, Eigen::Index m);
  /// Shortest run accepted by collect_library.
  static std::size_t min_length(std::size_t p, std::size_t l, std::size_t N, Eigen::Index q, Eigen::Index m);

  // Row offsets of the blocks inside a column.
  Eigen::Index y_row(std::ptrdiff_t lag) const;  // lag in [-p, N]
  Eigen::Index u_row(std::ptrdiff_t lag) const;  // lag in [-l, N - 1]

  /// Rows of the past window: y_{-p} .. y_0, u_{-l} .. u_{-1}.
  Matrix past_rows() const;
  Matrix future_u_rows() const;
  Matrix future_y_rows() const;

  /// One line per column; header names each entry by signal and lag.
  void write_csv(std::ostream& os) const;
};

struct LibraryOptions {
  Excitation excitation = Excitation::kUniform;
  Box input_box;
  std::optional<Vector> x0;
};

/// Simulates `sys` for `length` steps under the excitation and slices every
/// complete window into a column. Throws DomainError when length is below
/// TrajectoryLibrary::min_length.
TrajectoryLibrary collect_library(const StochasticLinearSystem& sys, const LibraryOptions& opts, std::size_t length,
                                  std::size_t p, std::size_t l, std::size_t N, std::uint64_t seed);

/// Outputs y_{k-p} .. y_k and inputs u_{k-l} .. u_{k-1}, oldest first.
struct IoWindow {
  std::vector<Vector> y;
  std::vector<Vector> u;

  Vector stacked() const;
  /// From the stacked state [y_k, .., y_{k-p}, u_{k-1}, .., u_{k-l}].
  static IoWindow from_state(const IoStateLayout& layout, const Vector& x);
};

struct ImplicitPrediction {
  Vector y;              // y_{k+1} .. y_{k+N}
  Vector alpha;
  double residual = 0;   // ||D_known alpha - b|| / (1 + ||b||)
  double kkt_residual = 0;  // distance of alpha from the row space of D_known
};

/// min ||alpha||^2 s.t. D_known alpha = b, prediction D_unknown alpha.
class ImplicitPredictor {
 public:
  explicit ImplicitPredictor(const TrajectoryLibrary& lib, double consistency_tol = 1e-8);

  /// Throws DomainError("query outside behavior span") when the known rows
  /// cannot be matched.
  ImplicitPrediction predict(const IoWindow& recent, const std::vector<Vector>& future_u) const;
  const Matrix& known() const { return known_; }
  const Matrix& unknown() const { return unknown_; }

 private:
  std::size_t N_;
  Eigen::Index q_;
  Matrix known_;
  Matrix unknown_;
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod_;
  Matrix row_projector_;
  double tol_;
};

/// Y_f = Psi [y_{k-p}; ..; y_k; u_{k-l}; ..; u_{k+N-1}].
struct ExplicitPredictor {
  Matrix psi;
  std::size_t p = 0;
  std::size_t l = 0;
  std::size_t N = 1;
  Eigen::Index q = 1;
  Eigen::Index m = 1;
  double residual_rms = 0.0;

  Eigen::Index past_dim() const { return static_cast<Eigen::Index>(p + 1) * q + static_cast<Eigen::Index>(l) * m; }
  Eigen::Index regressor_dim() const { return past_dim() + static_cast<Eigen::Index>(N) * m; }
  Vector regressor(const IoWindow& recent, const std::vector<Vector>& future_u) const;
  Vector predict(const IoWindow& recent, const std::vector<Vector>& future_u) const;
  /// Matrix with a header line naming the regressor columns.
  void write_csv(std::ostream& os) const;
};

/// Ridge least squares over the library columns. lambda = 0 requires a full
/// row-rank regressor matrix (DomainError otherwise).
ExplicitPredictor fit_explicit_predictor(const TrajectoryLibrary& lib, double lambda);

/// Psi obtained by iterating the one-step map
///   y_{k+1} = G [y_{k-p}; ..; y_k; u_{k-l}; ..; u_k].
ExplicitPredictor iterate_one_step(const Matrix& G, std::size_t p, std::size_t l, std::size_t N, Eigen::Index q,
                                   Eigen::Index m);

/// Causal part of the first block row of Psi (coefficients on u_{k+1}.. dropped).
Matrix one_step_block(const ExplicitPredictor& pred);

/// Fits G on every one-step window of the library (N per column) and
/// assembles Psi by iteration.
ExplicitPredictor structured_refit(const TrajectoryLibrary& lib, double lambda);

/// State-space form of the one-step map on the stacked IO state.
LinearModel induced_io_model(const Matrix& G, const IoStateLayout& layout);

struct SelfConsistencyReport {
  Matrix one_step;
  Matrix iterated_psi;
  double deviation = 0.0;
  double tolerance = 1e-6;
  bool pass = false;
};

SelfConsistencyReport self_consistency_check(const ExplicitPredictor& pred, double tol = 1e-6);

enum class Regularizer { kNone, kRidge, kLasso };

struct DdpcConfig {
  std::size_t horizon = 1;
  double gamma = 1.0;
  Matrix Qy;
  Matrix Ru;
  /// Terminal x_N' P x_N on the stacked IO state built from predicted data.
  std::optional<Matrix> terminal_P;
  std::optional<Box> input_box;
  Regularizer regularizer = Regularizer::kNone;
  double lambda = 0.0;
  /// Weight of the past-window penalty in lasso mode.
  double rho = 1e4;
  double tol = 1e-8;
  std::size_t max_iters = 100000;
};

struct DdpcPlan {
  std::vector<Vector> inputs;   // u_k .. u_{k+N-1}
  std::vector<Vector> outputs;  // predicted y_{k+1} .. y_{k+N}
  double value = 0.0;           // control cost plus regularizer
  Vector alpha;                 // embedded mode only
  std::size_t iterations = 0;
};

/// Explicit-predictor DDPC. `first` pins u_k.
DdpcPlan ddpc_control(const ExplicitPredictor& pred, const IoWindow& recent, const DdpcConfig& cfg,
                      std::optional<Vector> first = std::nullopt);
/// Embedded (DeePC-style) DDPC on the library with ridge or lasso on alpha.
DdpcPlan ddpc_control(const TrajectoryLibrary& lib, const IoWindow& recent, const DdpcConfig& cfg,
                      std::optional<Vector> first = std::nullopt);

/// DDPC optimum at stacked IO state s with u_k = a; +inf when a leaves the input box.
ExtReal q_pc(const ExplicitPredictor& pred, const DdpcConfig& cfg, const IoStateLayout& layout, const Vector& s,
             const Vector& a);

}  // namespace pclab
