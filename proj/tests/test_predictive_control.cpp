#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include "pclab/exact_solver.hpp"
#include "pclab/predictive_control.hpp"
#include "test_util.hpp"

using namespace pclab;
using pclab::test::line;
using pclab::test::scalar;

namespace {

TabularMDP det_mdp(std::size_t points = 201) {
  TabularMDP::Spec sp;
  sp.states = line(-2, 2, points);
  sp.actions = line(-2, 2, 81);
  const Box box = sp.states.box();
  sp.step = [box](const Vector& s, const Vector& a, const Vector&) {
    return box.clamp(Vector(0.8 * s + 0.5 * a.array().tanh().matrix()));
  };
  sp.cost = [](const Vector& s, const Vector& a) { return s.squaredNorm() + 0.1 * a.squaredNorm(); };
  sp.gamma = 0.9;
  return TabularMDP(std::move(sp));
}

MPCProblem vstar_problem(const TabularMDP& mdp, const PredictionModel& model, const ValueIterationResult& vi,
                         std::size_t N, double offset = 0.0) {
  MPCProblem p{model, [&mdp](const Vector& s, const Vector& a) { return mdp.base_cost(s, a); }};
  p.terminal_cost = vi.value.as_function();
  p.horizon = N;
  p.gamma = mdp.gamma();
  p.stage_offset = offset;
  return p;
}

// a matches b when equal or tied under q to 1e-9
bool same_or_tie(const QTable& q, std::size_t i, std::size_t a, std::size_t b) {
  return a == b || std::abs(q.at(i, a) - q.at(i, b)) <= 1e-9;
}

TransitionData linear_data(std::size_t n, double sigma, std::uint64_t seed) {
  TransitionData d{Matrix(1, n), Matrix(1, n), Matrix(1, n)};
  Rng rng = make_stream(seed, 0);
  std::normal_distribution<double> noise(0.0, sigma > 0 ? sigma : 1.0);
  for (std::size_t t = 0; t < n; ++t) {
    const auto c = static_cast<Eigen::Index>(t);
    d.s(0, c) = uniform(rng, -2, 2);
    d.a(0, c) = uniform(rng, -1, 1);
    d.next(0, c) = 0.5 * d.s(0, c) + d.a(0, c) + (sigma > 0 ? noise(rng) : 0.0);
  }
  return d;
}

}  // namespace

TEST(FitModel, NoiselessRecoversCoefficients) {
  const PredictionModel m = fit_expected_value_model(linear_data(100, 0.0, 1), Basis::kLinear);
  ASSERT_TRUE(m.fit().has_value());
  const Matrix& c = m.fit()->coefficients;
  ASSERT_EQ(m.fit()->basis, (std::vector<std::string>{"1", "s0", "a0"}));
  EXPECT_NEAR(c(0, 0), 0.0, 1e-8);
  EXPECT_NEAR(c(0, 1), 0.5, 1e-8);
  EXPECT_NEAR(c(0, 2), 1.0, 1e-8);
  EXPECT_LT(m.fit()->residual_rms, 1e-10);
  EXPECT_EQ(m.provenance(), ModelProvenance::kExpectedValueRegressed);
  ASSERT_TRUE(m.linear_form().has_value());
  EXPECT_NEAR(m(scalar(1), scalar(1))[0], 1.5, 1e-8);
}

TEST(FitModel, NoisyWithinThreeStandardErrors) {
  const PredictionModel m = fit_expected_value_model(linear_data(10000, 0.1, 2), Basis::kLinear);
  const Matrix& c = m.fit()->coefficients;
  const Matrix& se = m.fit()->standard_errors;
  EXPECT_LE(std::abs(c(0, 1) - 0.5), 3 * se(0, 1));
  EXPECT_LE(std::abs(c(0, 2) - 1.0), 3 * se(0, 2));
  EXPECT_LE(std::abs(c(0, 0)), 3 * se(0, 0));
  EXPECT_NEAR(m.fit()->residual_rms, 0.1, 0.01);
}

TEST(FitModel, ZeroDataGivesZeroModel) {
  TransitionData d{Matrix::Zero(1, 50), Matrix::Zero(1, 50), Matrix::Zero(1, 50)};
  const PredictionModel m = fit_expected_value_model(d, Basis::kLinear);
  EXPECT_EQ(m(scalar(1.3), scalar(-0.4))[0], 0.0);
  EXPECT_EQ(m.fit()->coefficients.cwiseAbs().maxCoeff(), 0.0);
}

TEST(FitModel, RankDeficientNamesDirections) {
  TransitionData d = linear_data(100, 0.0, 3);
  d.a = d.s;
  try {
    fit_expected_value_model(d, Basis::kLinear);
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("rank-deficient"), std::string::npos);
    EXPECT_NE(msg.find("s0"), std::string::npos);
    EXPECT_NE(msg.find("a0"), std::string::npos);
  }
}

TEST(FitModel, TooFewSamples) { EXPECT_THROW(fit_expected_value_model(linear_data(29, 0.0, 4), Basis::kLinear), DomainError); }

TEST(FitModel, QuadraticBasisRecoversProducts) {
  TransitionData d = linear_data(400, 0.0, 5);
  for (Eigen::Index c = 0; c < d.size(); ++c) d.next(0, c) += 0.25 * d.s(0, c) * d.a(0, c);
  const PredictionModel m = fit_expected_value_model(d, Basis::kPolynomial2);
  EXPECT_NEAR(m(scalar(1.0), scalar(0.5))[0], 0.5 + 0.5 + 0.125, 1e-8);
}

TEST(FitModel, RecoversExpectedValueOfMdp) {
  test::ScalarLqr lq;
  lq.clamp = false;
  const PredictionModel m = fit_expected_value_model(sample_transitions(lq.mdp(), 20000, 6), Basis::kLinear);
  const auto& lin = *m.linear_form();
  const Matrix& se = m.fit()->standard_errors;
  EXPECT_LE(std::abs(lin.A(0, 0) - 0.9), 3 * se(0, 1));
  EXPECT_LE(std::abs(lin.B(0, 0) - 1.0), 3 * se(0, 2));
}

TEST(Models, ExpectedValueOfSymmetricNoiseIsMeanStep) {
  test::ScalarLqr lq;
  const TabularMDP mdp = lq.mdp();
  const PredictionModel f = expected_value_model(mdp);
  EXPECT_EQ(f.provenance(), ModelProvenance::kExpectedValueAnalytic);
  for (double s : {-1.0, 0.0, 0.7}) EXPECT_NEAR(f(scalar(s), scalar(0.2))[0], 0.9 * s + 0.2, 1e-14);
}

TEST(Models, PerturbedAddsBiasAndClamps) {
  const PredictionModel f = PredictionModel::linear({Matrix::Ones(1, 1), Matrix::Ones(1, 1), Vector::Zero(1)},
                                                    ModelProvenance::kTrueDeterministic, Box{scalar(-1), scalar(1)});
  const PredictionModel g = f.perturbed(scalar(0.5));
  EXPECT_EQ(g.provenance(), ModelProvenance::kPerturbed);
  EXPECT_DOUBLE_EQ(g(scalar(0.1), scalar(0.1))[0], 0.7);
  EXPECT_EQ(g(scalar(0.9), scalar(0.9))[0], 1.0);
}

TEST(SolveMpc, OneStepWithVstarTerminalEqualsVstar) {
  const TabularMDP mdp = det_mdp();
  const ValueIterationResult vi = value_iteration(mdp);
  const GridDpMpc mpc(vstar_problem(mdp, true_model(mdp), vi, 1), mdp.states(), mdp.actions());
  for (std::size_t i = 0; i < mdp.states().size(); i += 7) {
    const MPCSolution sol = mpc.solve(mdp.states().node(i));
    ASSERT_TRUE(sol.feasible);
    EXPECT_NEAR(sol.value.value(), vi.value.at(i), 1e-8);
  }
  // off-grid: within the interpolation error of V*
  const MPCSolution off = mpc.solve(scalar(0.1234));
  const double h = mdp.states().axis(0).spacing();
  EXPECT_NEAR(off.value.value(), vi.value(scalar(0.1234)), 2.0 * h * h);
}

TEST(SolveMpc, InfeasibleEverywhereIsInfinite) {
  const TabularMDP mdp = det_mdp(21);
  MPCProblem p{true_model(mdp), [](const Vector& s, const Vector&) { return s.squaredNorm(); }};
  p.constraint = [](const Vector&, const Vector&) { return Vector::Ones(1); };
  p.horizon = 3;
  const GridDpMpc mpc(p, mdp.states(), mdp.actions());
  const MPCSolution sol = mpc.solve(scalar(0.5));
  EXPECT_FALSE(sol.feasible);
  EXPECT_EQ(sol.value, ExtReal::infinity());
  EXPECT_FALSE(mpc_policy(std::make_shared<GridDpMpc>(mpc)).try_action(scalar(0.5)).has_value());
  EXPECT_THROW(mpc_policy(std::make_shared<GridDpMpc>(mpc))(scalar(0.5)), InfeasibleError);
}

TEST(SolveMpc, TerminalSetExcludingEverythingIsInfeasible) {
  const TabularMDP mdp = det_mdp(21);
  MPCProblem p{true_model(mdp), [](const Vector& s, const Vector&) { return s.squaredNorm(); }};
  p.terminal_set = Box{scalar(5), scalar(6)};
  p.horizon = 2;
  const GridDpMpc mpc(p, mdp.states(), mdp.actions());
  EXPECT_FALSE(mpc.solve(scalar(0.0)).feasible);
}

TEST(SolveMpc, StatesFollowModelRecursion) {
  const TabularMDP mdp = det_mdp();
  const ValueIterationResult vi = value_iteration(mdp);
  const PredictionModel f = true_model(mdp);
  const GridDpMpc mpc(vstar_problem(mdp, f, vi, 4), mdp.states(), mdp.actions());
  const MPCSolution sol = mpc.solve(scalar(1.3));
  ASSERT_EQ(sol.inputs.size(), 4u);
  ASSERT_EQ(sol.states.size(), 5u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(sol.states[i + 1], f(sol.states[i], sol.inputs[i]));
}

TEST(SolveMpc, BatchAndGridAgreeWithinActionResolution) {
  const double a = 0.9, b = 1.0, q = 1.0, r = 0.1, g = 0.9, pt = 2.0;
  const std::size_t N = 3;
  const Grid states = line(-2, 2, 801);
  const Grid actions = line(-3, 3, 101);
  const PredictionModel f = PredictionModel::linear({Matrix::Constant(1, 1, a), Matrix::Constant(1, 1, b), Vector::Zero(1)},
                                                    ModelProvenance::kTrueDeterministic, states.box());
  MPCProblem p{f, [=](const Vector& s, const Vector& u) { return q * s.squaredNorm() + r * u.squaredNorm(); }};
  p.terminal_cost = [=](const Vector& s) { return pt * s.squaredNorm(); };
  p.horizon = N;
  p.gamma = g;
  p.quadratic_cost = QuadraticCost{Matrix::Constant(1, 1, q), Matrix::Constant(1, 1, r)};
  p.quadratic_terminal = QuadraticTerminal{Matrix::Constant(1, 1, pt)};
  const BatchLqMpc batch(p);
  const GridDpMpc grid(p, states, actions);

  // Hessian of the cost in U, assembled independently
  Matrix H = Matrix::Zero(N, N);
  for (std::size_t i = 0; i < N; ++i) H(i, i) += std::pow(g, i) * r;
  for (std::size_t k = 1; k <= N; ++k) {
    const double w = std::pow(g, k) * (k == N ? pt : q);
    Vector row = Vector::Zero(N);
    for (std::size_t j = 0; j < k; ++j) row[j] = std::pow(a, k - 1 - j) * b;
    H += w * row * row.transpose();
  }
  const double lmax = Eigen::SelfAdjointEigenSolver<Matrix>(H).eigenvalues().maxCoeff();
  const double ha = actions.axis(0).spacing();
  const double hs = states.axis(0).spacing();
  const double tol = N * lmax * (ha / 2) * (ha / 2) + N * std::max(q, pt) * hs * hs / 4;
  for (double s : {-1.0, -0.3, 0.0, 0.45, 1.2}) {
    const double vb = batch.solve(scalar(s)).value.value();
    const double vg = grid.solve(scalar(s)).value.value();
    EXPECT_GE(vg, vb - N * std::max(q, pt) * hs * hs / 4);
    EXPECT_LE(std::abs(vg - vb), tol) << "s=" << s;
  }
}

TEST(SolveMpc, BatchRejectsNonlinearModel) {
  const TabularMDP mdp = det_mdp(21);
  MPCProblem p{true_model(mdp), [](const Vector& s, const Vector&) { return s.squaredNorm(); }};
  p.quadratic_cost = QuadraticCost{Matrix::Ones(1, 1), Matrix::Ones(1, 1)};
  EXPECT_THROW(BatchLqMpc{p}, DomainError);
}

TEST(SolveMpc, BatchMatchesUnrolledRiccatiGain) {
  // N-step LQ with terminal P = Riccati P reproduces the infinite-horizon gain
  test::ScalarLqr lq;
  lq.sigma = 0.0;
  const RiccatiSolution ric = riccati_solve(lq.system(), lq.gamma);
  const PredictionModel f = PredictionModel::linear({lq.system().A, lq.system().B, Vector::Zero(1)},
                                                    ModelProvenance::kTrueDeterministic);
  MPCProblem p{f, [](const Vector&, const Vector&) { return 0.0; }};
  p.horizon = 4;
  p.gamma = lq.gamma;
  p.quadratic_cost = QuadraticCost{lq.system().Qc, lq.system().Rc};
  p.quadratic_terminal = QuadraticTerminal{ric.P};
  const BatchLqMpc batch(p);
  for (double s : {-1.5, 0.3, 2.0}) {
    EXPECT_NEAR(batch.solve(scalar(s)).inputs[0][0], -ric.K(0, 0) * s, 1e-9);
    EXPECT_NEAR(batch.solve(scalar(s)).value.value(), ric.P(0, 0) * s * s, 1e-9);
  }
}

TEST(QMpc, PinnedAtPolicyEqualsValue) {
  const TabularMDP mdp = det_mdp();
  const ValueIterationResult vi = value_iteration(mdp);
  const GridDpMpc mpc(vstar_problem(mdp, true_model(mdp), vi, 3), mdp.states(), mdp.actions());
  for (double s : {-1.7, -0.2, 0.0, 0.9}) {
    const MPCSolution sol = mpc.solve(scalar(s));
    EXPECT_EQ(mpc.q(scalar(s), sol.inputs[0]), sol.value);
  }
}

TEST(QMpc, InfeasibleFirstActionIsInfinite) {
  const TabularMDP mdp = det_mdp(41);
  MPCProblem p{true_model(mdp), [](const Vector& s, const Vector&) { return s.squaredNorm(); }};
  p.constraint = [](const Vector&, const Vector& a) { return Vector::Constant(1, a[0] - 1.0); };
  p.horizon = 2;
  const GridDpMpc mpc(p, mdp.states(), mdp.actions());
  EXPECT_EQ(mpc.q(scalar(0.2), scalar(1.5)), ExtReal::infinity());
  EXPECT_TRUE(mpc.q(scalar(0.2), scalar(0.5)).finite());
}

TEST(QMpc, BatchPinnedMatchesUnpinnedAtOptimum) {
  const PredictionModel f = PredictionModel::linear({Matrix::Constant(1, 1, 0.9), Matrix::Ones(1, 1), Vector::Zero(1)},
                                                    ModelProvenance::kTrueDeterministic);
  MPCProblem p{f, [](const Vector&, const Vector&) { return 0.0; }};
  p.horizon = 5;
  p.quadratic_cost = QuadraticCost{Matrix::Ones(1, 1), Matrix::Constant(1, 1, 0.1)};
  const BatchLqMpc batch(p);
  const MPCSolution sol = batch.solve(scalar(0.8));
  EXPECT_NEAR(batch.q(scalar(0.8), sol.inputs[0]).value(), sol.value.value(), 1e-12);
  EXPECT_GT(batch.q(scalar(0.8), sol.inputs[0] + scalar(0.1)).value(), sol.value.value());
}

TEST(MpcPolicyTest, DeterministicMatchesOptimalPolicyAtEveryNode) {
  const TabularMDP mdp = det_mdp();
  const ValueIterationResult vi = value_iteration(mdp);
  const GridDpMpc mpc(vstar_problem(mdp, true_model(mdp), vi, 5), mdp.states(), mdp.actions());
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < mdp.states().size(); ++i) {
    const auto j = mpc.argmin(mdp.states().node(i));
    ASSERT_TRUE(j.has_value());
    if (!same_or_tie(vi.q, i, *j, vi.policy.action_index[i])) ++mismatches;
  }
  EXPECT_EQ(mismatches, 0u);
}

TEST(MpcPolicyTest, OneStepEqualsBellmanArgmin) {
  const TabularMDP mdp = det_mdp();
  const ValueIterationResult vi = value_iteration(mdp);
  const GridDpMpc mpc(vstar_problem(mdp, true_model(mdp), vi, 1), mdp.states(), mdp.actions());
  const ValueFn v = vi.value.as_function();
  for (std::size_t i = 0; i < mdp.states().size(); i += 3) {
    const Vector s = mdp.states().node(i);
    std::size_t best = 0;
    double bq = kInf;
    for (std::size_t j = 0; j < mdp.actions().size(); ++j) {
      const double qj = bellman_q(mdp, v, s, mdp.actions().node(j));
      if (qj < bq) {
        bq = qj;
        best = j;
      }
    }
    const std::size_t got = *mpc.argmin(s);
    EXPECT_TRUE(got == best || std::abs(bellman_q(mdp, v, s, mdp.actions().node(got)) - bq) <= 1e-12) << i;
  }
}

TEST(MpcPolicyTest, BiasedModelChangesPolicy) {
  test::ScalarLqr lq;
  lq.sigma = 0.0;
  const TabularMDP mdp = lq.mdp();
  const ValueIterationResult vi = value_iteration(mdp);
  const GridDpMpc mpc(vstar_problem(mdp, true_model(mdp).perturbed(scalar(0.5)), vi, 5), mdp.states(),
                      mdp.actions());
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < mdp.states().size(); ++i) {
    if (!same_or_tie(vi.q, i, *mpc.argmin(mdp.states().node(i)), vi.policy.action_index[i])) ++mismatches;
  }
  EXPECT_GE(mismatches, 1u);
}

TEST(MpcProperties, BellmanByConstruction) {
  const TabularMDP mdp = det_mdp();
  const ValueIterationResult vi = value_iteration(mdp);
  const GridDpMpc mpc(vstar_problem(mdp, true_model(mdp), vi, 4), mdp.states(), mdp.actions());
  for (double s : {-1.9, -0.55, 0.0, 0.333, 1.8}) {
    double best = kInf;
    std::size_t arg = 0;
    for (std::size_t j = 0; j < mdp.actions().size(); ++j) {
      const double qj = mpc.q(scalar(s), mdp.actions().node(j)).value();
      if (qj < best) {
        best = qj;
        arg = j;
      }
    }
    EXPECT_EQ(best, mpc.solve(scalar(s)).value.value());
    EXPECT_EQ(arg, *mpc.argmin(scalar(s)));
  }
}

TEST(MpcProperties, CostToGoTablesSatisfyRecursion) {
  const TabularMDP mdp = det_mdp(101);
  const ValueIterationResult vi = value_iteration(mdp);
  const std::size_t N = 4;
  const MPCProblem p = vstar_problem(mdp, true_model(mdp), vi, N);
  const GridDpMpc mpc(p, mdp.states(), mdp.actions());
  for (std::size_t k = 0; k < mdp.states().size(); ++k) EXPECT_EQ(mpc.cost_to_go(N).at(k), vi.value.at(k));
  for (std::size_t i = 1; i < N; ++i) {
    const ValueTable& next = mpc.cost_to_go(i + 1);
    const ValueTable& cur = mpc.cost_to_go(i);
    for (std::size_t k = 0; k < cur.values.size(); ++k) {
      const Vector s = mdp.states().node(k);
      double best = kInf;
      for (std::size_t j = 0; j < mdp.actions().size(); ++j) {
        const Vector a = mdp.actions().node(j);
        best = std::min(best, p.extended_stage_cost(s, a) + p.gamma * next(p.model(s, a)));
      }
      EXPECT_NEAR(cur.at(k), best, 1e-12 * (1 + best));
    }
  }
}

TEST(MpcProperties, IndependentOfHorizonWithVstarTerminal) {
  const TabularMDP mdp = det_mdp(101);
  const ValueIterationResult vi = value_iteration(mdp);
  const GridDpMpc m1(vstar_problem(mdp, true_model(mdp), vi, 1), mdp.states(), mdp.actions());
  for (std::size_t N : {3, 6}) {
    const GridDpMpc mN(vstar_problem(mdp, true_model(mdp), vi, N), mdp.states(), mdp.actions());
    for (std::size_t k = 0; k < mdp.states().size(); ++k) {
      EXPECT_NEAR(mN.value_table().at(k), m1.value_table().at(k), 1e-8);
    }
  }
}

TEST(MpcProperties, ConstantStageOffsetKeepsArgmin) {
  const TabularMDP mdp = det_mdp(101);
  const ValueIterationResult vi = value_iteration(mdp);
  const GridDpMpc base(vstar_problem(mdp, true_model(mdp), vi, 3), mdp.states(), mdp.actions());
  const GridDpMpc shifted(vstar_problem(mdp, true_model(mdp), vi, 3, 3.7), mdp.states(), mdp.actions());
  const double lift = 3.7 * (1 - std::pow(0.9, 3)) / (1 - 0.9);
  for (std::size_t k = 0; k < mdp.states().size(); ++k) {
    const Vector s = mdp.states().node(k);
    const std::size_t a = *base.argmin(s);
    const std::size_t b = *shifted.argmin(s);
    EXPECT_TRUE(a == b || std::abs(base.q(s, mdp.actions().node(a)).value() -
                                   base.q(s, mdp.actions().node(b)).value()) <= 1e-9);
    EXPECT_NEAR(shifted.value_table().at(k) - base.value_table().at(k), lift, 1e-9);
  }
}

TEST(IoState, BuildShiftAndSelect) {
  IoStateLayout L{2, 1, 1, 2};
  EXPECT_EQ(L.dim(), 6);
  const std::vector<Vector> ys = {test::vec({1, 2}), test::vec({3, 4})};
  const std::vector<Vector> us = {scalar(5), scalar(6)};
  const Vector x = L.build(ys, us);
  EXPECT_EQ(x, test::vec({1, 2, 3, 4, 5, 6}));
  const Vector x2 = L.shift(x, test::vec({7, 8}), scalar(9));
  EXPECT_EQ(x2, test::vec({7, 8, 1, 2, 9, 5}));
  EXPECT_EQ(L.output(x2), test::vec({7, 8}));
  EXPECT_EQ(L.output_selector() * x2, test::vec({7, 8}));
  EXPECT_THROW(L.build(std::vector<Vector>{ys[0]}, us), DomainError);
}

TEST(IoState, NoInputLags) {
  IoStateLayout L{1, 1, 0, 0};
  EXPECT_EQ(L.dim(), 1);
  EXPECT_EQ(L.shift(scalar(1), scalar(2), scalar(3)), scalar(2));
}

TEST(MpcSolutionCsv, CommentHeader) {
  const TabularMDP mdp = det_mdp(41);
  const ValueIterationResult vi = value_iteration(mdp);
  const GridDpMpc mpc(vstar_problem(mdp, true_model(mdp), vi, 2), mdp.states(), mdp.actions());
  std::ostringstream os;
  mpc.solve(scalar(0.5)).write_csv(os);
  EXPECT_EQ(os.str().front(), '#');
  EXPECT_NE(os.str().find("\ni,x0,u0\n"), std::string::npos);
}
