#include <gtest/gtest.h>

#include <omp.h>

#include "pclab/exact_solver.hpp"
#include "pclab/kernels.hpp"
#include "test_util.hpp"

using namespace pclab;
using pclab::test::scalar;

namespace {

struct Threads {
  explicit Threads(int n) : saved(omp_get_max_threads()) { omp_set_num_threads(n); }
  ~Threads() { omp_set_num_threads(saved); }
  int saved;
};

}  // namespace

TEST(Kernels, SweepSerialAndOmpBitIdentical) {
  Threads t(4);
  test::ScalarLqr lq;
  const TabularMDP m = lq.mdp();
  const kernels::BellmanOperator op = kernels::build_operator(m);
  const std::size_t n = op.n_states;
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = std::sin(0.37 * static_cast<double>(i)) + 2.0;
  v[n / 3] = kInf;
  std::vector<double> a(n), b(n), qa(n * op.n_actions), qb(n * op.n_actions);
  std::vector<std::uint32_t> ia(n), ib(n);
  kernels::bellman_sweep_serial(op, m.gamma(), v, a, ia, qa);
  kernels::bellman_sweep_omp(op, m.gamma(), v, b, ib, qb);
  EXPECT_EQ(a, b);
  EXPECT_EQ(ia, ib);
  EXPECT_EQ(qa, qb);
}

TEST(Kernels, SweepMatchesDirectBackup) {
  test::ScalarLqr lq;
  lq.s_points = 41;
  lq.a_points = 21;
  const TabularMDP m = lq.mdp();
  const kernels::BellmanOperator op = kernels::build_operator(m);
  std::vector<double> v(op.n_states);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = m.states().node(i).squaredNorm();
  std::vector<double> next(v.size()), q(v.size() * op.n_actions);
  std::vector<std::uint32_t> arg(v.size());
  kernels::bellman_sweep_serial(op, m.gamma(), v, next, arg, q);
  const ValueTable vt{m.states(), v};
  for (std::size_t i = 0; i < op.n_states; i += 5) {
    for (std::size_t j = 0; j < op.n_actions; j += 4) {
      const double direct = bellman_q(m, vt.as_function(), m.states().node(i), m.actions().node(j));
      EXPECT_NEAR(q[op.pair(i, j)], direct, 1e-12);
    }
  }
}

TEST(Kernels, ReturnsSerialAndOmpBitIdentical) {
  Threads t(4);
  const TabularMDP m = test::ScalarLqr{}.mdp();
  auto pi = [](const Vector& s) { return Vector(-0.5 * s); };
  const auto a = kernels::discounted_returns_serial(m, pi, scalar(1), 257, 150, 99);
  const auto b = kernels::discounted_returns_omp(m, pi, scalar(1), 257, 150, 99);
  EXPECT_EQ(a, b);
}

TEST(Kernels, ReturnsOmpPropagatesErrors) {
  Threads t(4);
  const TabularMDP m = test::ScalarLqr{}.mdp();
  auto bad = [](const Vector&) { return scalar(100); };
  EXPECT_THROW(kernels::discounted_returns_omp(m, bad, scalar(1), 64, 10, 1), DomainError);
}

TEST(Kernels, ValueIterationSerialAndParallelBitIdentical) {
  Threads t(4);
  const TabularMDP m = test::ScalarLqr{}.mdp();
  ValueIterationOptions serial;
  serial.parallel = false;
  ValueIterationOptions par;
  par.parallel = true;
  const ValueIterationResult a = value_iteration(m, serial);
  const ValueIterationResult b = value_iteration(m, par);
  EXPECT_EQ(a.value.values, b.value.values);
  EXPECT_EQ(a.q.values, b.q.values);
  EXPECT_EQ(a.policy.action_index, b.policy.action_index);
  EXPECT_EQ(a.iterations, b.iterations);
}
