#include "pclab/exact_solver.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "pclab/kernels.hpp"

namespace pclab {

namespace {

void write_node(std::ostream& os, const Vector& x) {
  for (Eigen::Index i = 0; i < x.size(); ++i) os << (i ? "," : "") << x[i];
}

void write_axis_header(std::ostream& os, const char* prefix, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) os << (i ? "," : "") << prefix << i;
}

Grid joint_grid(const Grid& s, const Grid& a) {
  std::vector<Axis> axes = s.axes();
  axes.insert(axes.end(), a.axes().begin(), a.axes().end());
  return Grid(std::move(axes));
}

}  // namespace

ValueFn ValueTable::as_function() const {
  return [this](const Vector& s) { return (*this)(s); };
}

void ValueTable::write_csv(std::ostream& os) const {
  os << "# s<i>: grid node coordinates; value: table value (inf = infeasible)\n";
  write_axis_header(os, "s", grid.dim());
  os << ",value\n";
  os.precision(17);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    write_node(os, grid.node(i));
    os << ',' << values[i] << '\n';
  }
}

double QTable::operator()(const Vector& s, const Vector& a) const {
  // Row-major layout of (state, action) matches the joint grid's flat index.
  const Grid joint = joint_grid(states, actions);
  Vector x(s.size() + a.size());
  x << s, a;
  return joint.interpolate(values, x);
}

double QTable::row_min(std::size_t state) const {
  const auto begin = values.begin() + static_cast<std::ptrdiff_t>(state * actions.size());
  return *std::min_element(begin, begin + static_cast<std::ptrdiff_t>(actions.size()));
}

void QTable::write_csv(std::ostream& os) const {
  os << "# s<i>: state node; a<i>: action node; q: action value (inf = infeasible)\n";
  write_axis_header(os, "s", states.dim());
  os << ',';
  write_axis_header(os, "a", actions.dim());
  os << ",q\n";
  os.precision(17);
  for (std::size_t i = 0; i < states.size(); ++i) {
    const Vector s = states.node(i);
    for (std::size_t j = 0; j < actions.size(); ++j) {
      write_node(os, s);
      os << ',';
      write_node(os, actions.node(j));
      os << ',' << at(i, j) << '\n';
    }
  }
}

Vector PolicyTable::operator()(const Vector& s) const {
  thread_local std::vector<Stencil> st;
  st.clear();
  states.stencil(s, st);
  Vector a = Vector::Zero(static_cast<Eigen::Index>(actions.dim()));
  for (const auto& e : st) a += e.weight * actions.node(action_index[e.index]);
  return a;
}

Policy PolicyTable::as_policy() const {
  return [this](const Vector& s) { return (*this)(s); };
}

void PolicyTable::write_csv(std::ostream& os) const {
  os << "# s<i>: state node; a<i>: greedy action at that node; index: action-grid index\n";
  write_axis_header(os, "s", states.dim());
  os << ',';
  write_axis_header(os, "a", actions.dim());
  os << ",index\n";
  os.precision(17);
  for (std::size_t i = 0; i < states.size(); ++i) {
    write_node(os, states.node(i));
    os << ',';
    write_node(os, action_at(i));
    os << ',' << action_index[i] << '\n';
  }
}

ValueIterationResult value_iteration(const TabularMDP& mdp, const ValueIterationOptions& opts) {
  const auto op = kernels::build_operator(mdp);
  const std::size_t n = op.n_states;
  std::vector<double> v(n, 0.0);
  std::vector<double> next(n);
  std::vector<std::uint32_t> argmin(n);
  ValueIterationResult res;
  auto sweep = opts.parallel ? kernels::bellman_sweep_omp : kernels::bellman_sweep_serial;

  double residual = kInf;
  while (true) {
    if (res.iterations >= opts.max_iters) {
      throw ConvergenceError("value iteration did not converge in " + std::to_string(opts.max_iters) + " sweeps",
                             residual);
    }
    sweep(op, mdp.gamma(), v, next, argmin, {});
    ++res.iterations;
    residual = 0.0;
    bool any_finite = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (next[i] != kInf && v[i] != kInf) {
        residual = std::max(residual, std::abs(next[i] - v[i]));
        any_finite = true;
      }
    }
    v.swap(next);
    if (!any_finite && std::all_of(v.begin(), v.end(), [](double x) { return x == kInf; })) {
      throw InfeasibleError("infeasible MDP: every state has infinite value");
    }
    res.residuals.push_back(residual);
    if (residual <= opts.tol) break;
  }

  // Final sweep that also records Q so V = rowmin(Q) holds exactly.
  std::vector<double> q(n * op.n_actions);
  sweep(op, mdp.gamma(), v, next, argmin, q);
  res.value = ValueTable{mdp.states(), std::move(next)};
  res.q = QTable{mdp.states(), mdp.actions(), std::move(q)};
  res.policy = PolicyTable{mdp.states(), mdp.actions(), std::move(argmin)};
  return res;
}

double bellman_q(const TabularMDP& mdp, const ValueFn& v, const Vector& s, const Vector& a) {
  const double stage = mdp.stage_cost_unchecked(s, a);
  if (stage == kInf) return kInf;
  double acc = 0.0;
  for (const auto& o : mdp.successors(s, a)) {
    const double x = v(o.next);
    if (x == kInf) return kInf;
    acc += o.prob * x;
  }
  return stage + mdp.gamma() * acc;
}

ExtReal advantage(const QTable& q, const ValueTable& v, const Vector& s, const Vector& a) {
  const double qv = q(s, a);
  if (qv == kInf) return ExtReal::infinity();
  return ExtReal(qv - v(s));
}

RiccatiSolution riccati_solve(const StochasticLinearSystem& sys, double gamma, double tol, std::size_t max_iters) {
  sys.validate();
  if (!(gamma > 0.0 && gamma < 1.0)) throw DomainError("discount must lie strictly inside (0, 1)");
  const Matrix& A = sys.A;
  const Matrix& B = sys.B;
  RiccatiSolution sol;
  Matrix P = sys.Qc;
  double residual = kInf;
  for (std::size_t it = 0; it < max_iters; ++it) {
    const Matrix S = sys.Rc + gamma * B.transpose() * P * B;
    const Matrix BtPA = B.transpose() * P * A;
    Matrix next = sys.Qc + gamma * A.transpose() * P * A - gamma * gamma * BtPA.transpose() * S.ldlt().solve(BtPA);
    next = 0.5 * (next + next.transpose());
    if (!next.allFinite() || next.norm() > 1e14) {
      throw ConvergenceError("Riccati recursion diverged; (A, B) may not be stabilizable", residual);
    }
    residual = (next - P).lpNorm<Eigen::Infinity>();
    P = std::move(next);
    sol.iterations = it + 1;
    if (residual <= tol * std::max(1.0, P.lpNorm<Eigen::Infinity>())) break;
  }
  if (!(residual <= tol * std::max(1.0, P.lpNorm<Eigen::Infinity>()))) {
    throw ConvergenceError("Riccati recursion did not converge", residual);
  }
  const Matrix S = sys.Rc + gamma * B.transpose() * P * B;
  sol.P = P;
  sol.K = gamma * S.ldlt().solve(B.transpose() * P * A);
  sol.v0 = gamma * (P * sys.effective_noise_covariance()).trace() / (1.0 - gamma);
  sol.residual = residual;
  return sol;
}

}  // namespace pclab
