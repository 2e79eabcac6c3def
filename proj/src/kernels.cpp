#include "pclab/kernels.hpp"

#include <algorithm>
#include <exception>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pclab::kernels {

namespace {

// Stencils of one pair, merged by node index so duplicate corners collapse.
void append_pair(const Grid& states, const std::vector<Outcome>& next, std::vector<Stencil>& scratch,
                 std::vector<std::uint32_t>& index, std::vector<double>& weight) {
  scratch.clear();
  for (const auto& o : next) {
    const std::size_t start = scratch.size();
    states.stencil(o.next, scratch);
    for (std::size_t k = start; k < scratch.size(); ++k) scratch[k].weight *= o.prob;
  }
  std::sort(scratch.begin(), scratch.end(), [](const Stencil& a, const Stencil& b) { return a.index < b.index; });
  std::size_t k = 0;
  while (k < scratch.size()) {
    std::size_t idx = scratch[k].index;
    double w = 0.0;
    for (; k < scratch.size() && scratch[k].index == idx; ++k) w += scratch[k].weight;
    if (w > 0.0) {
      index.push_back(static_cast<std::uint32_t>(idx));
      weight.push_back(w);
    }
  }
}

inline double backup(const BellmanOperator& op, std::size_t p, double gamma, std::span<const double> v) {
  const double stage = op.stage[p];
  if (stage == kInf) return kInf;
  double acc = 0.0;
  for (std::size_t k = op.offsets[p]; k < op.offsets[p + 1]; ++k) {
    const double x = v[op.index[k]];
    if (x == kInf) return kInf;
    acc += op.weight[k] * x;
  }
  return stage + gamma * acc;
}

inline void sweep_state(const BellmanOperator& op, std::size_t i, double gamma, std::span<const double> v,
                        std::span<double> v_next, std::span<std::uint32_t> argmin, std::span<double> q) {
  double best = kInf;
  std::uint32_t best_j = 0;
  for (std::size_t j = 0; j < op.n_actions; ++j) {
    const std::size_t p = op.pair(i, j);
    const double qij = backup(op, p, gamma, v);
    if (!q.empty()) q[p] = qij;
    if (qij < best) {
      best = qij;
      best_j = static_cast<std::uint32_t>(j);
    }
  }
  v_next[i] = best;
  argmin[i] = best_j;
}

}  // namespace

BellmanOperator build_operator(const Grid& states, const Grid& actions, const PairFn& pair_fn) {
  if (states.size() > std::numeric_limits<std::uint32_t>::max()) throw DomainError("state grid too large");
  BellmanOperator op;
  op.n_states = states.size();
  op.n_actions = actions.size();
  const std::size_t pairs = op.n_states * op.n_actions;
  op.stage.resize(pairs);
  op.offsets.assign(pairs + 1, 0);

  std::vector<Vector> action_nodes(op.n_actions);
  for (std::size_t j = 0; j < op.n_actions; ++j) action_nodes[j] = actions.node(j);

  std::vector<Stencil> scratch;
  std::vector<Outcome> next;
  for (std::size_t i = 0; i < op.n_states; ++i) {
    const Vector s = states.node(i);
    for (std::size_t j = 0; j < op.n_actions; ++j) {
      const std::size_t p = op.pair(i, j);
      next.clear();
      double stage = 0.0;
      pair_fn(s, action_nodes[j], stage, next);
      op.stage[p] = stage;
      if (stage != kInf) append_pair(states, next, scratch, op.index, op.weight);
      op.offsets[p + 1] = op.index.size();
    }
  }
  return op;
}

BellmanOperator build_operator(const TabularMDP& mdp) {
  return build_operator(mdp.states(), mdp.actions(),
                        [&mdp](const Vector& s, const Vector& a, double& stage, std::vector<Outcome>& next) {
                          stage = mdp.stage_cost_unchecked(s, a);
                          if (stage != kInf) next = mdp.successors(s, a);
                        });
}

void bellman_sweep_serial(const BellmanOperator& op, double gamma, std::span<const double> v,
                          std::span<double> v_next, std::span<std::uint32_t> argmin, std::span<double> q) {
  for (std::size_t i = 0; i < op.n_states; ++i) sweep_state(op, i, gamma, v, v_next, argmin, q);
}

void bellman_sweep_omp(const BellmanOperator& op, double gamma, std::span<const double> v,
                       std::span<double> v_next, std::span<std::uint32_t> argmin, std::span<double> q) {
  const auto n = static_cast<std::int64_t>(op.n_states);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) sweep_state(op, static_cast<std::size_t>(i), gamma, v, v_next, argmin, q);
}

double discounted_return(const TabularMDP& mdp, const Policy& policy, const Vector& s0, std::size_t horizon,
                         Rng& rng) {
  Vector s = s0;
  double total = 0.0;
  double discount = 1.0;
  const Box abox = mdp.actions().box();
  for (std::size_t k = 0; k < horizon; ++k) {
    const Vector a = policy(s);
    if (!abox.contains(a, 1e-12)) throw DomainError("policy returned an action outside the action box");
    const double c = mdp.stage_cost_unchecked(s, a);
    if (c == kInf) return kInf;
    total += discount * c;
    discount *= mdp.gamma();
    s = mdp.sample_next(s, a, rng);
    if (!mdp.bounds().contains(s, 1e-12)) throw DomainError("sampled state left the bounding box");
  }
  return total;
}

std::vector<double> discounted_returns_serial(const TabularMDP& mdp, const Policy& policy, const Vector& s0,
                                              std::size_t n, std::size_t horizon, std::uint64_t seed) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_stream(seed, i);
    out[i] = discounted_return(mdp, policy, s0, horizon, rng);
  }
  return out;
}

std::vector<double> discounted_returns_omp(const TabularMDP& mdp, const Policy& policy, const Vector& s0,
                                           std::size_t n, std::size_t horizon, std::uint64_t seed) {
  std::vector<double> out(n);
  std::exception_ptr error;
  const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::int64_t i = 0; i < count; ++i) {
    try {
      Rng rng = make_stream(seed, static_cast<std::uint64_t>(i));
      out[static_cast<std::size_t>(i)] = discounted_return(mdp, policy, s0, horizon, rng);
    } catch (...) {
#pragma omp critical(pclab_returns_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return out;
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace pclab::kernels
