#include <gtest/gtest.h>

#include <sstream>

#include "pclab/ddpc.hpp"
#include "test_util.hpp"

using namespace pclab;
using pclab::test::scalar;

namespace {

StochasticLinearSystem lti2(double meas = 0.0, double proc = 0.0) {
  StochasticLinearSystem s;
  s.A = (Matrix(2, 2) << 0.9, 0.3, -0.2, 0.8).finished();
  s.B = (Matrix(2, 1) << 0.5, 1.0).finished();
  s.C = Matrix::Identity(2, 2);
  s.W = proc * proc * Matrix::Identity(2, 2);
  s.Qc = Matrix::Identity(2, 2);
  s.Rc = Matrix::Constant(1, 1, 0.1);
  s.measurement_sigma = meas;
  return s;
}

// y+ = 0.5 y + u, y = x
StochasticLinearSystem scalar_sys(double c = 1.0) {
  StochasticLinearSystem s;
  s.A = Matrix::Constant(1, 1, 0.5);
  s.B = Matrix::Ones(1, 1);
  s.C = Matrix::Constant(1, 1, c);
  s.W = Matrix::Zero(1, 1);
  s.Qc = Matrix::Ones(1, 1);
  s.Rc = Matrix::Ones(1, 1);
  return s;
}

LibraryOptions unit_box(Excitation e = Excitation::kUniform) {
  LibraryOptions o;
  o.excitation = e;
  o.input_box = Box{scalar(-1), scalar(1)};
  return o;
}

std::vector<Vector> random_inputs(Rng& rng, std::size_t N) {
  std::vector<Vector> u;
  for (std::size_t i = 0; i < N; ++i) u.push_back(scalar(uniform(rng, -1, 1)));
  return u;
}

IoWindow state_window(const Vector& x) { return IoWindow{{x}, {}}; }

DdpcConfig lti_config(std::size_t N) {
  DdpcConfig c;
  c.horizon = N;
  c.gamma = 0.95;
  c.Qy = Matrix::Identity(2, 2);
  c.Ru = Matrix::Constant(1, 1, 0.1);
  return c;
}

// Control cost of an input plan under the explicit predictor, evaluated directly.
double plan_cost(const ExplicitPredictor& pred, const IoWindow& w, const DdpcConfig& cfg, const std::vector<Vector>& u) {
  const Vector y = pred.predict(w, u);
  double total = 0.0;
  double g = 1.0;
  for (std::size_t i = 0; i < cfg.horizon; ++i) {
    const Vector yi = i == 0 ? w.y.back() : Vector(y.segment(static_cast<Eigen::Index>(i - 1) * pred.q, pred.q));
    total += g * (yi.dot(cfg.Qy * yi) + u[i].dot(cfg.Ru * u[i]));
    g *= cfg.gamma;
  }
  return total;
}

}  // namespace

TEST(Library, ColumnCountAndSlices) {
  const TrajectoryLibrary lib = collect_library(scalar_sys(), unit_box(), 200, 2, 2, 5, 1);
  EXPECT_EQ(lib.count(), 200 - 5 - 2);
  EXPECT_EQ(lib.height(), (2 + 5 + 1) * 1 + (2 + 5) * 1);
  EXPECT_EQ(lib.columns.rows(), lib.height());
  for (Eigen::Index j = 0; j < lib.count(); ++j) {
    const auto k = static_cast<std::size_t>(j) + 2;
    for (std::ptrdiff_t t = -2; t <= 5; ++t) EXPECT_EQ(lib.columns(lib.y_row(t), j), lib.y[k + t][0]);
    for (std::ptrdiff_t t = -2; t < 5; ++t) EXPECT_EQ(lib.columns(lib.u_row(t), j), lib.u[k + t][0]);
  }
  // noiseless run obeys the dynamics
  for (std::size_t t = 0; t + 1 < lib.y.size(); ++t) EXPECT_NEAR(lib.y[t + 1][0], 0.5 * lib.y[t][0] + lib.u[t][0], 1e-15);
}

TEST(Library, ZeroInputZeroStateGivesZeroColumns) {
  LibraryOptions o;
  o.input_box = Box{scalar(0), scalar(0)};
  const TrajectoryLibrary lib = collect_library(lti2(), o, 100, 1, 1, 3, 2);
  EXPECT_EQ(lib.columns.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Library, PrbsIsPersistentlyExciting) {
  const std::size_t N = 5;
  const TrajectoryLibrary lib = collect_library(lti2(), unit_box(Excitation::kPrbs), 200, 0, 0, N, 3);
  for (const auto& u : lib.u) EXPECT_EQ(std::abs(u[0]), 1.0);
  Matrix Z(lib.past_rows().rows() + lib.future_u_rows().rows(), lib.count());
  Z << lib.past_rows(), lib.future_u_rows();
  Eigen::JacobiSVD<Matrix> svd(Z);
  svd.setThreshold(1e-10);
  EXPECT_EQ(svd.rank(), Z.rows());
  EXPECT_EQ(Z.rows(), 2 + static_cast<Eigen::Index>(N));
}

TEST(Library, TooShortNamesMinimum) {
  const std::size_t need = TrajectoryLibrary::min_length(2, 2, 5, 1, 1);
  EXPECT_EQ(need, 2 + 2 + 10 + 4 * 15u);
  try {
    collect_library(scalar_sys(), unit_box(), need - 1, 2, 2, 5, 1);
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find(std::to_string(need)), std::string::npos);
  }
  EXPECT_NO_THROW(collect_library(scalar_sys(), unit_box(), need, 2, 2, 5, 1));
}

TEST(Library, SameSeedSameData) {
  const TrajectoryLibrary a = collect_library(lti2(0.05, 0.1), unit_box(), 150, 1, 1, 3, 9);
  const TrajectoryLibrary b = collect_library(lti2(0.05, 0.1), unit_box(), 150, 1, 1, 3, 9);
  EXPECT_EQ(a.columns, b.columns);
}

TEST(Library, CsvHeaderNamesLags) {
  const TrajectoryLibrary lib = collect_library(scalar_sys(), unit_box(), 80, 1, 1, 2, 1);
  std::ostringstream os;
  lib.write_csv(os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line.front(), '#');
  std::getline(is, line);
  EXPECT_EQ(line, "y-1_0,y0_0,y1_0,y2_0,u-1_0,u0_0,u1_0");
}

TEST(Implicit, MatchesTrueContinuation) {
  const StochasticLinearSystem sys = lti2();
  const std::size_t N = 5;
  const TrajectoryLibrary lib = collect_library(sys, unit_box(), 200, 0, 0, N, 42);
  const ImplicitPredictor pred(lib);
  Rng rng = make_stream(7, 0);
  for (int k = 0; k < 50; ++k) {
    Vector x = test::vec({uniform(rng, -2, 2), uniform(rng, -2, 2)});
    const auto u = random_inputs(rng, N);
    const ImplicitPrediction out = pred.predict(state_window(x), u);
    for (std::size_t i = 0; i < N; ++i) {
      x = sys.A * x + sys.B * u[i];
      EXPECT_LE((out.y.segment(static_cast<Eigen::Index>(i) * 2, 2) - x).cwiseAbs().maxCoeff(), 1e-8);
    }
    EXPECT_LE(out.kkt_residual, 1e-8);
    EXPECT_LE(out.residual, 1e-8);
  }
}

TEST(Implicit, SingleColumnReturnsItsFuture) {
  TrajectoryLibrary lib = collect_library(scalar_sys(), unit_box(), 80, 1, 1, 2, 5);
  lib.columns = lib.columns.col(3).eval();
  const ImplicitPredictor pred(lib);
  const Vector c = lib.columns.col(0);
  const IoWindow w{{scalar(c[lib.y_row(-1)]), scalar(c[lib.y_row(0)])}, {scalar(c[lib.u_row(-1)])}};
  const ImplicitPrediction out = pred.predict(w, {scalar(c[lib.u_row(0)]), scalar(c[lib.u_row(1)])});
  EXPECT_NEAR(out.y[0], c[lib.y_row(1)], 1e-12);
  EXPECT_NEAR(out.y[1], c[lib.y_row(2)], 1e-12);
  EXPECT_NEAR(out.alpha[0], 1.0, 1e-12);
  // any query that is not a multiple of the column is outside the span
  const IoWindow off{{scalar(c[lib.y_row(-1)] + 1.0), scalar(c[lib.y_row(0)])}, {scalar(c[lib.u_row(-1)])}};
  try {
    pred.predict(off, {scalar(c[lib.u_row(0)]), scalar(c[lib.u_row(1)])});
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_STREQ(e.what(), "query outside behavior span");
  }
}

TEST(Implicit, ZeroQueryPredictsZero) {
  const TrajectoryLibrary lib = collect_library(lti2(), unit_box(), 200, 0, 0, 4, 1);
  const ImplicitPrediction out = ImplicitPredictor(lib).predict(state_window(Vector::Zero(2)), std::vector<Vector>(4, scalar(0)));
  EXPECT_EQ(out.y.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(out.alpha.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Explicit, ScalarRecoversCoefficients) {
  const TrajectoryLibrary lib = collect_library(scalar_sys(), unit_box(), 100, 0, 0, 1, 4);
  const ExplicitPredictor pred = fit_explicit_predictor(lib, 0.0);
  ASSERT_EQ(pred.psi.rows(), 1);
  ASSERT_EQ(pred.psi.cols(), 2);
  EXPECT_NEAR(pred.psi(0, 0), 0.5, 1e-8);
  EXPECT_NEAR(pred.psi(0, 1), 1.0, 1e-8);
  EXPECT_LT(pred.residual_rms, 1e-10);
}

TEST(Explicit, StaleRegressorsAreCollinearWithoutRidge) {
  // y_k = 0.5 y_{k-1} + u_{k-1} exactly, so p = l = 1 regressors are dependent
  const TrajectoryLibrary lib = collect_library(scalar_sys(), unit_box(), 100, 1, 1, 1, 4);
  try {
    fit_explicit_predictor(lib, 0.0);
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("rank"), std::string::npos);
  }
  const ExplicitPredictor pred = fit_explicit_predictor(lib, 1e-10);
  const IoWindow w{{scalar(0.3), scalar(0.4)}, {scalar(0.25)}};  // consistent: 0.4 = 0.15 + 0.25
  EXPECT_NEAR(pred.predict(w, {scalar(-0.7)})[0], 0.5 * 0.4 - 0.7, 1e-6);
}

TEST(Explicit, ZeroOutputsGiveZeroPsi) {
  const TrajectoryLibrary lib = collect_library(scalar_sys(0.0), unit_box(), 100, 1, 1, 3, 4);
  EXPECT_EQ(lib.future_y_rows().cwiseAbs().maxCoeff(), 0.0);
  const ExplicitPredictor pred = fit_explicit_predictor(lib, 1e-3);
  EXPECT_EQ(pred.psi.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Explicit, AgreesWithImplicitOnNoiselessData) {
  const std::size_t N = 5;
  const TrajectoryLibrary lib = collect_library(lti2(), unit_box(), 200, 0, 0, N, 42);
  const ImplicitPredictor imp(lib);
  const ExplicitPredictor exp = fit_explicit_predictor(lib, 0.0);
  EXPECT_EQ(exp.psi.rows(), static_cast<Eigen::Index>(N) * 2);
  EXPECT_EQ(exp.psi.cols(), 2 + static_cast<Eigen::Index>(N));
  Rng rng = make_stream(8, 0);
  for (int k = 0; k < 50; ++k) {
    const IoWindow w = state_window(test::vec({uniform(rng, -2, 2), uniform(rng, -2, 2)}));
    const auto u = random_inputs(rng, N);
    EXPECT_LE((imp.predict(w, u).y - exp.predict(w, u)).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Explicit, CsvHeader) {
  const ExplicitPredictor pred = fit_explicit_predictor(collect_library(scalar_sys(), unit_box(), 100, 0, 0, 2, 4), 0.0);
  std::ostringstream os;
  pred.write_csv(os);
  EXPECT_EQ(os.str().front(), '#');
  EXPECT_NE(os.str().find("\nrow,y0_0,u0_0,u1_0\n"), std::string::npos);
}

TEST(SelfConsistency, IteratedMapHasZeroDeviation) {
  const StochasticLinearSystem sys = lti2();
  Matrix G(2, 3);
  G << sys.A, sys.B;
  const ExplicitPredictor pred = iterate_one_step(G, 0, 0, 6, 2, 1);
  const SelfConsistencyReport rep = self_consistency_check(pred);
  EXPECT_EQ(rep.deviation, 0.0);
  EXPECT_TRUE(rep.pass);
  EXPECT_EQ(rep.one_step, G);
  // second block row is [A^2, AB, B]
  EXPECT_LE((pred.psi.block(2, 0, 2, 2) - sys.A * sys.A).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LE((pred.psi.block(2, 2, 2, 1) - sys.A * sys.B).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(SelfConsistency, PerturbationShowsAsDeviation) {
  Matrix G(1, 4);
  G << 0.3, 0.5, -0.2, 1.0;  // y_{k-1}, y_k, u_{k-1}, u_k
  ExplicitPredictor pred = iterate_one_step(G, 1, 1, 4, 1, 1);
  const double delta = 3e-4;
  pred.psi(2, 1) += delta;
  const SelfConsistencyReport rep = self_consistency_check(pred);
  EXPECT_NEAR(rep.deviation, delta, 1e-15);
  EXPECT_FALSE(rep.pass);
}

TEST(SelfConsistency, NoisyFitFailsStructuredRefitPasses) {
  const TrajectoryLibrary lib = collect_library(lti2(0.05), unit_box(), 400, 0, 0, 5, 42);
  const SelfConsistencyReport raw = self_consistency_check(fit_explicit_predictor(lib, 0.0));
  EXPECT_GT(raw.deviation, 1e-6);
  EXPECT_FALSE(raw.pass);
  const SelfConsistencyReport structured = self_consistency_check(structured_refit(lib, 0.0));
  EXPECT_LE(structured.deviation, 1e-6);
  EXPECT_TRUE(structured.pass);
}

TEST(SelfConsistency, NoiselessFitIsConsistent) {
  const TrajectoryLibrary lib = collect_library(lti2(), unit_box(), 200, 0, 0, 5, 42);
  EXPECT_LE(self_consistency_check(fit_explicit_predictor(lib, 0.0)).deviation, 1e-6);
}

TEST(Control, ExplicitPlanEqualsBatchLq) {
  const StochasticLinearSystem sys = lti2();
  const std::size_t N = 5;
  const ExplicitPredictor pred = fit_explicit_predictor(collect_library(sys, unit_box(), 200, 0, 0, N, 42), 0.0);
  DdpcConfig cfg = lti_config(N);
  const Matrix P = 3.0 * Matrix::Identity(2, 2);
  cfg.terminal_P = P;
  MPCProblem mp{PredictionModel::linear({sys.A, sys.B, Vector::Zero(2)}, ModelProvenance::kTrueDeterministic),
                [](const Vector&, const Vector&) { return 0.0; }};
  mp.horizon = N;
  mp.gamma = cfg.gamma;
  mp.quadratic_cost = QuadraticCost{cfg.Qy, cfg.Ru};
  mp.quadratic_terminal = QuadraticTerminal{P};
  const BatchLqMpc batch(mp);
  Rng rng = make_stream(3, 0);
  for (int k = 0; k < 10; ++k) {
    const Vector x = test::vec({uniform(rng, -2, 2), uniform(rng, -2, 2)});
    const DdpcPlan plan = ddpc_control(pred, state_window(x), cfg);
    const MPCSolution sol = batch.solve(x);
    for (std::size_t i = 0; i < N; ++i) EXPECT_NEAR(plan.inputs[i][0], sol.inputs[i][0], 1e-6);
    EXPECT_NEAR(plan.value, sol.value.value(), 1e-6);
  }
}

TEST(Control, ZeroWindowGivesZeroPlan) {
  const ExplicitPredictor pred = fit_explicit_predictor(collect_library(lti2(), unit_box(), 200, 0, 0, 4, 1), 0.0);
  const DdpcPlan plan = ddpc_control(pred, state_window(Vector::Zero(2)), lti_config(4));
  for (const auto& u : plan.inputs) EXPECT_EQ(u[0], 0.0);
  EXPECT_EQ(plan.value, 0.0);
}

TEST(Control, EmbeddedRidgePathIsMonotone) {
  const TrajectoryLibrary lib = collect_library(lti2(), unit_box(), 200, 0, 0, 4, 1);
  DdpcConfig cfg = lti_config(4);
  cfg.regularizer = Regularizer::kRidge;
  const IoWindow w = state_window(test::vec({1.0, -0.5}));
  std::vector<double> norms;
  for (double lam : {1e-4, 1.0, 1e4}) {
    cfg.lambda = lam;
    const DdpcPlan plan = ddpc_control(lib, w, cfg);
    norms.push_back(plan.alpha.norm());
    // past window reproduced exactly
    EXPECT_LE((lib.past_rows() * plan.alpha - w.stacked()).cwiseAbs().maxCoeff(), 1e-8);
  }
  EXPECT_GT(norms[0], norms[1]);
  EXPECT_GT(norms[1], norms[2]);
  // large lambda: minimum-norm alpha matching the past window
  const Matrix past = lib.past_rows();
  const Vector amin = past.completeOrthogonalDecomposition().solve(w.stacked());
  EXPECT_NEAR(norms[2], amin.norm(), 1e-3 * amin.norm());
}

TEST(Control, EmbeddedSmallRidgeMatchesExplicit) {
  const TrajectoryLibrary lib = collect_library(lti2(), unit_box(), 200, 0, 0, 4, 1);
  DdpcConfig cfg = lti_config(4);
  const IoWindow w = state_window(test::vec({1.0, -0.5}));
  const DdpcPlan exp = ddpc_control(fit_explicit_predictor(lib, 0.0), w, cfg);
  cfg.regularizer = Regularizer::kRidge;
  cfg.lambda = 1e-9;
  const DdpcPlan emb = ddpc_control(lib, w, cfg);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(emb.inputs[i][0], exp.inputs[i][0], 1e-4);
}

TEST(Control, LassoConverges) {
  const TrajectoryLibrary lib = collect_library(lti2(), unit_box(), 120, 0, 0, 3, 1);
  DdpcConfig cfg = lti_config(3);
  cfg.regularizer = Regularizer::kLasso;
  cfg.lambda = 1e-2;
  cfg.rho = 1e2;
  cfg.tol = 1e-6;
  const IoWindow w = state_window(test::vec({0.5, 0.2}));
  const DdpcPlan plan = ddpc_control(lib, w, cfg);
  EXPECT_GT(plan.iterations, 0u);
  EXPECT_LE(plan.iterations, cfg.max_iters);
  for (const auto& u : plan.inputs) EXPECT_TRUE(std::isfinite(u[0]));
  cfg.lambda = 1.0;
  const DdpcPlan sparse = ddpc_control(lib, w, cfg);
  EXPECT_LT(sparse.alpha.lpNorm<1>(), plan.alpha.lpNorm<1>());
  cfg.max_iters = 2;
  cfg.tol = 1e-14;
  EXPECT_THROW(ddpc_control(lib, w, cfg), ConvergenceError);
}

TEST(Control, BoxConstrainedPlanIsOptimal) {
  const std::size_t N = 4;
  const ExplicitPredictor pred = fit_explicit_predictor(collect_library(lti2(), unit_box(), 200, 0, 0, N, 1), 0.0);
  DdpcConfig cfg = lti_config(N);
  cfg.input_box = Box{scalar(-0.2), scalar(0.2)};
  const IoWindow w = state_window(test::vec({1.5, -1.0}));
  const DdpcPlan plan = ddpc_control(pred, w, cfg);
  for (const auto& u : plan.inputs) {
    EXPECT_GE(u[0], -0.2);
    EXPECT_LE(u[0], 0.2);
  }
  const double best = plan_cost(pred, w, cfg, plan.inputs);
  EXPECT_NEAR(best, plan.value, 1e-9);
  Rng rng = make_stream(5, 0);
  for (int k = 0; k < 200; ++k) {
    std::vector<Vector> u;
    for (std::size_t i = 0; i < N; ++i) u.push_back(scalar(uniform(rng, -0.2, 0.2)));
    EXPECT_GE(plan_cost(pred, w, cfg, u), best - 1e-9);
  }
  // coordinate perturbations inside the box cannot improve
  for (std::size_t i = 0; i < N; ++i) {
    for (double d : {-1e-4, 1e-4}) {
      auto u = plan.inputs;
      u[i][0] = std::clamp(u[i][0] + d, -0.2, 0.2);
      EXPECT_GE(plan_cost(pred, w, cfg, u), best - 1e-12);
    }
  }
}

TEST(Control, EmbeddedRejectsBoxAndMissingRegularizer) {
  const TrajectoryLibrary lib = collect_library(lti2(), unit_box(), 120, 0, 0, 3, 1);
  DdpcConfig cfg = lti_config(3);
  const IoWindow w = state_window(test::vec({0.5, 0.2}));
  EXPECT_THROW(ddpc_control(lib, w, cfg), DomainError);
  cfg.regularizer = Regularizer::kRidge;
  cfg.lambda = 1.0;
  cfg.input_box = Box{scalar(-1), scalar(1)};
  EXPECT_THROW(ddpc_control(lib, w, cfg), DomainError);
}

TEST(QPc, PinnedAtPlanEqualsUnpinned) {
  const std::size_t N = 4;
  const ExplicitPredictor pred = fit_explicit_predictor(collect_library(lti2(), unit_box(), 200, 0, 0, N, 1), 0.0);
  const DdpcConfig cfg = lti_config(N);
  const IoStateLayout layout{2, 1, 0, 0};
  const Vector s = test::vec({0.8, -1.1});
  const DdpcPlan plan = ddpc_control(pred, IoWindow::from_state(layout, s), cfg);
  const double at = q_pc(pred, cfg, layout, s, plan.inputs[0]).value();
  EXPECT_NEAR(at, plan.value, 1e-10);
  EXPECT_GT(q_pc(pred, cfg, layout, s, plan.inputs[0] + scalar(1e-3)).value(), at);
  EXPECT_GT(q_pc(pred, cfg, layout, s, plan.inputs[0] - scalar(1e-3)).value(), at);
}

TEST(QPc, OutsideBoxIsInfinite) {
  const ExplicitPredictor pred = fit_explicit_predictor(collect_library(lti2(), unit_box(), 200, 0, 0, 3, 1), 0.0);
  DdpcConfig cfg = lti_config(3);
  cfg.input_box = Box{scalar(-1), scalar(1)};
  const IoStateLayout layout{2, 1, 0, 0};
  EXPECT_EQ(q_pc(pred, cfg, layout, test::vec({0.1, 0.1}), scalar(1.5)), ExtReal::infinity());
  EXPECT_TRUE(q_pc(pred, cfg, layout, test::vec({0.1, 0.1}), scalar(0.5)).finite());
}

TEST(QPc, SelfConsistentPredictorMatchesStateSpaceMpc) {
  // p = l = 1 one-step map, Psi by iteration, against batch MPC on the stacked IO state
  Matrix G(1, 4);
  G << -0.1, 0.7, 0.2, 1.0;  // y_{k-1}, y_k, u_{k-1}, u_k
  const std::size_t N = 5;
  const ExplicitPredictor pred = iterate_one_step(G, 1, 1, N, 1, 1);
  const IoStateLayout layout{1, 1, 1, 1};
  DdpcConfig cfg;
  cfg.horizon = N;
  cfg.gamma = 0.9;
  cfg.Qy = Matrix::Constant(1, 1, 2.0);
  cfg.Ru = Matrix::Constant(1, 1, 0.3);
  const Matrix P = (Matrix(3, 3) << 2, 0.1, 0, 0.1, 1, 0, 0, 0, 0.5).finished();
  cfg.terminal_P = P;

  const Matrix S = layout.output_selector();
  MPCProblem mp{PredictionModel::linear(induced_io_model(G, layout), ModelProvenance::kTrueDeterministic),
                [](const Vector&, const Vector&) { return 0.0; }};
  mp.horizon = N;
  mp.gamma = cfg.gamma;
  mp.quadratic_cost = QuadraticCost{S.transpose() * cfg.Qy * S, cfg.Ru};
  mp.quadratic_terminal = QuadraticTerminal{P};
  const BatchLqMpc batch(mp);

  Rng rng = make_stream(12, 0);
  for (int k = 0; k < 10; ++k) {
    const Vector s = test::vec({uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)});
    const DdpcPlan plan = ddpc_control(pred, IoWindow::from_state(layout, s), cfg);
    const MPCSolution sol = batch.solve(s);
    for (std::size_t i = 0; i < N; ++i) EXPECT_NEAR(plan.inputs[i][0], sol.inputs[i][0], 1e-9);
    EXPECT_NEAR(plan.value, sol.value.value(), 1e-9);
    for (std::size_t i = 0; i < N; ++i) EXPECT_NEAR(plan.outputs[i][0], sol.states[i + 1][0], 1e-9);
    const Vector a = scalar(0.3);
    EXPECT_NEAR(q_pc(pred, cfg, layout, s, a).value(), batch.q(s, a).value(), 1e-9);
  }
}

TEST(InducedModel, ShiftsTheWindow) {
  Matrix G(1, 4);
  G << -0.1, 0.7, 0.2, 1.0;
  const IoStateLayout layout{1, 1, 1, 1};
  const LinearModel lm = induced_io_model(G, layout);
  const Vector x = test::vec({0.4, -0.3, 0.9});  // y_k, y_{k-1}, u_{k-1}
  const Vector u = scalar(-0.6);
  const double y_next = -0.1 * -0.3 + 0.7 * 0.4 + 0.2 * 0.9 + 1.0 * -0.6;
  const Vector next = lm.A * x + lm.B * u;
  EXPECT_NEAR(next[0], y_next, 1e-15);
  EXPECT_EQ(next, layout.shift(x, scalar(next[0]), u));
}
