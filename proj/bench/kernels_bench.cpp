// Serial reference vs OpenMP for the Bellman sweep and the rollout kernel.
#include <benchmark/benchmark.h>

#include <cmath>

#include "pclab/kernels.hpp"

using namespace pclab;

namespace {

TabularMDP scalar_lqr(std::size_t points) {
  TabularMDP::Spec sp;
  sp.states = Grid({Axis(-2.0, 2.0, points)});
  sp.actions = Grid({Axis(-2.0, 2.0, points)});
  sp.noise.push_back(TruncatedNormal::symmetric(0.1, 4.0));
  const Box box = sp.states.box();
  sp.step = [box](const Vector& s, const Vector& u, const Vector& w) {
    Vector next = 0.9 * s + u;
    next[0] += w[0];
    return box.clamp(next);
  };
  sp.cost = [](const Vector& s, const Vector& u) { return s.squaredNorm() + 0.1 * u.squaredNorm(); };
  sp.gamma = 0.9;
  return TabularMDP(std::move(sp));
}

template <bool Omp>
void BM_Sweep(benchmark::State& state) {
  const TabularMDP m = scalar_lqr(static_cast<std::size_t>(state.range(0)));
  const kernels::BellmanOperator op = kernels::build_operator(m);
  std::vector<double> v(op.n_states), next(op.n_states);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::cos(0.01 * static_cast<double>(i));
  std::vector<std::uint32_t> arg(op.n_states);
  for (auto _ : state) {
    if constexpr (Omp) kernels::bellman_sweep_omp(op, m.gamma(), v, next, arg, {});
    else kernels::bellman_sweep_serial(op, m.gamma(), v, next, arg, {});
    benchmark::DoNotOptimize(next.data());
  }
  state.counters["pairs"] = static_cast<double>(op.n_states * op.n_actions);
  state.counters["threads"] = Omp ? kernels::max_threads() : 1;
}

template <bool Omp>
void BM_Returns(benchmark::State& state) {
  const TabularMDP m = scalar_lqr(201);
  auto pi = [](const Vector& s) { return Vector(-0.5 * s); };
  const auto n = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    auto r = Omp ? kernels::discounted_returns_omp(m, pi, Vector::Ones(1), n, 200, 42)
                 : kernels::discounted_returns_serial(m, pi, Vector::Ones(1), n, 200, 42);
    benchmark::DoNotOptimize(r.data());
  }
  state.counters["threads"] = Omp ? kernels::max_threads() : 1;
}

}  // namespace

BENCHMARK(BM_Sweep<false>)->Name("sweep/serial")->Arg(101)->Arg(201)->Arg(401)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Sweep<true>)->Name("sweep/omp")->Arg(101)->Arg(201)->Arg(401)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Returns<false>)->Name("returns/serial")->Arg(1000)->Arg(4000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Returns<true>)->Name("returns/omp")->Arg(1000)->Arg(4000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
