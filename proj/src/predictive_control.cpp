#include "pclab/predictive_control.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

namespace pclab {

std::string to_string(ModelProvenance p) {
  switch (p) {
    case ModelProvenance::kTrueDeterministic: return "true-deterministic";
    case ModelProvenance::kExpectedValueAnalytic: return "expected-value-analytic";
    case ModelProvenance::kExpectedValueRegressed: return "expected-value-regressed";
    case ModelProvenance::kPerturbed: return "perturbed";
  }
  return "unknown";
}

PredictionModel::PredictionModel(Fn f, ModelProvenance provenance, std::optional<Box> clamp_box)
    : f_(std::move(f)), provenance_(provenance), clamp_(std::move(clamp_box)) {
  if (!f_) throw DomainError("prediction model needs a function");
}

PredictionModel PredictionModel::linear(LinearModel lm, ModelProvenance provenance, std::optional<Box> clamp_box) {
  const Eigen::Index n = lm.A.rows();
  if (lm.A.cols() != n || lm.B.rows() != n) throw DomainError("linear model: A must be n x n and B n x m");
  if (lm.d.size() == 0) lm.d = Vector::Zero(n);
  if (lm.d.size() != n) throw DomainError("linear model: offset has wrong size");
  PredictionModel m(
      [A = lm.A, B = lm.B, d = lm.d](const Vector& s, const Vector& a) -> Vector { return A * s + B * a + d; },
      provenance, std::move(clamp_box));
  m.linear_ = std::move(lm);
  return m;
}

Vector PredictionModel::operator()(const Vector& s, const Vector& a) const {
  Vector x = f_(s, a);
  return clamp_ ? clamp_->clamp(x) : x;
}

PredictionModel PredictionModel::perturbed(const Vector& bias) const {
  PredictionModel m([f = f_, bias](const Vector& s, const Vector& a) -> Vector { return f(s, a) + bias; },
                    ModelProvenance::kPerturbed, clamp_);
  if (linear_) {
    LinearModel lm = *linear_;
    lm.d += bias;
    m.linear_ = std::move(lm);
  }
  return m;
}

PredictionModel true_model(const TabularMDP& mdp) {
  if (!mdp.deterministic()) throw DomainError("true_model needs a deterministic MDP");
  return PredictionModel([&mdp](const Vector& s, const Vector& a) { return mdp.expected_next(s, a); },
                         ModelProvenance::kTrueDeterministic, mdp.bounds());
}

PredictionModel expected_value_model(const TabularMDP& mdp) {
  return PredictionModel([&mdp](const Vector& s, const Vector& a) { return mdp.expected_next(s, a); },
                         ModelProvenance::kExpectedValueAnalytic, mdp.bounds());
}

namespace {

struct BasisSpec {
  std::vector<std::string> names;
  Eigen::Index n = 0;
  Eigen::Index m = 0;
  bool quadratic = false;

  Eigen::Index size() const { return static_cast<Eigen::Index>(names.size()); }

  Vector eval(const Vector& s, const Vector& a) const {
    Vector z(n + m);
    z << s, a;
    Vector phi(size());
    Eigen::Index k = 0;
    phi[k++] = 1.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) phi[k++] = z[i];
    if (quadratic) {
      for (Eigen::Index i = 0; i < z.size(); ++i) {
        for (Eigen::Index j = i; j < z.size(); ++j) phi[k++] = z[i] * z[j];
      }
    }
    return phi;
  }
};

BasisSpec make_basis(Eigen::Index n, Eigen::Index m, Basis basis) {
  BasisSpec b{{"1"}, n, m, basis == Basis::kPolynomial2};
  std::vector<std::string> z;
  for (Eigen::Index i = 0; i < n; ++i) z.push_back("s" + std::to_string(i));
  for (Eigen::Index i = 0; i < m; ++i) z.push_back("a" + std::to_string(i));
  b.names.insert(b.names.end(), z.begin(), z.end());
  if (b.quadratic) {
    for (std::size_t i = 0; i < z.size(); ++i) {
      for (std::size_t j = i; j < z.size(); ++j) b.names.push_back(z[i] + "*" + z[j]);
    }
  }
  return b;
}

}  // namespace

PredictionModel fit_expected_value_model(const TransitionData& data, Basis basis, std::optional<Box> clamp_box) {
  const Eigen::Index n = data.s.rows();
  const Eigen::Index m = data.a.rows();
  const Eigen::Index samples = data.size();
  if (data.a.cols() != samples || data.next.cols() != samples || data.next.rows() != n) {
    throw DomainError("transition data: s, a and next must have matching columns");
  }
  const BasisSpec spec = make_basis(n, m, basis);
  const Eigen::Index k = spec.size();
  if (samples < 10 * k) {
    throw DomainError("need at least " + std::to_string(10 * k) + " transitions for " + std::to_string(k) +
                      " regressors, got " + std::to_string(samples));
  }

  RegressionFit fit;
  fit.basis = spec.names;
  fit.samples = static_cast<std::size_t>(samples);
  fit.coefficients = Matrix::Zero(n, k);
  fit.standard_errors = Matrix::Zero(n, k);

  if (data.next.cwiseAbs().maxCoeff() == 0.0) {
    PredictionModel zero(
        [n](const Vector&, const Vector&) -> Vector { return Vector::Zero(n); },
        ModelProvenance::kExpectedValueRegressed, std::move(clamp_box));
    if (basis == Basis::kLinear) {
      zero = PredictionModel::linear({Matrix::Zero(n, n), Matrix::Zero(n, m), Vector::Zero(n)},
                                     ModelProvenance::kExpectedValueRegressed, zero.clamp_box());
    }
    zero.attach_fit(std::move(fit));
    return zero;
  }

  Matrix X(samples, k);
  for (Eigen::Index t = 0; t < samples; ++t) {
    X.row(t) = spec.eval(data.s.col(t), data.a.col(t)).transpose();
  }
  // Column scaling so the rank test does not depend on units.
  const Vector scale = X.colwise().norm().transpose().cwiseMax(1e-300);
  const Matrix Xs = X * scale.cwiseInverse().asDiagonal();
  Eigen::JacobiSVD<Matrix> svd(Xs, Eigen::ComputeThinV);
  const Vector sv = svd.singularValues();
  const double thresh = 1e-10 * sv[0];
  if (sv[k - 1] <= thresh) {
    std::ostringstream msg;
    msg << "rank-deficient regressors; null directions:";
    for (Eigen::Index c = 0; c < k; ++c) {
      if (sv[c] > thresh) continue;
      const Vector v = svd.matrixV().col(c);
      msg << " [";
      bool first = true;
      for (Eigen::Index j = 0; j < k; ++j) {
        if (std::abs(v[j]) < 1e-6) continue;
        msg << (first ? "" : " ") << spec.names[static_cast<std::size_t>(j)] << ":" << v[j] / scale[j];
        first = false;
      }
      msg << "]";
    }
    throw DomainError(msg.str());
  }

  const Eigen::ColPivHouseholderQR<Matrix> qr(X);
  const Matrix Y = data.next.transpose();
  const Matrix beta = qr.solve(Y);  // k x n
  const Matrix resid = Y - X * beta;
  const Matrix XtXinv = (X.transpose() * X).inverse();
  const double dof = static_cast<double>(std::max<Eigen::Index>(samples - k, 1));
  for (Eigen::Index r = 0; r < n; ++r) {
    const double s2 = resid.col(r).squaredNorm() / dof;
    fit.standard_errors.row(r) = (s2 * XtXinv.diagonal()).cwiseSqrt().transpose();
  }
  fit.coefficients = beta.transpose();
  fit.residual_rms = std::sqrt(resid.squaredNorm() / static_cast<double>(resid.size()));

  std::optional<PredictionModel> model;
  if (basis == Basis::kLinear) {
    LinearModel lm{fit.coefficients.middleCols(1, n), fit.coefficients.middleCols(1 + n, m),
                   fit.coefficients.col(0)};
    model = PredictionModel::linear(std::move(lm), ModelProvenance::kExpectedValueRegressed, std::move(clamp_box));
  } else {
    model = PredictionModel([spec, C = fit.coefficients](const Vector& s, const Vector& a) -> Vector {
      return C * spec.eval(s, a);
    }, ModelProvenance::kExpectedValueRegressed, std::move(clamp_box));
  }
  model->attach_fit(std::move(fit));
  return *model;
}

TransitionData sample_transitions(const TabularMDP& mdp, std::size_t n, std::uint64_t seed) {
  const Box sb = mdp.states().box();
  const Box ab = mdp.actions().box();
  TransitionData d{Matrix(sb.dim(), static_cast<Eigen::Index>(n)), Matrix(ab.dim(), static_cast<Eigen::Index>(n)),
                   Matrix(sb.dim(), static_cast<Eigen::Index>(n))};
  Rng rng = make_stream(seed, 0);
  for (std::size_t t = 0; t < n; ++t) {
    const auto c = static_cast<Eigen::Index>(t);
    for (Eigen::Index i = 0; i < sb.dim(); ++i) d.s(i, c) = uniform(rng, sb.lo[i], sb.hi[i]);
    for (Eigen::Index i = 0; i < ab.dim(); ++i) d.a(i, c) = uniform(rng, ab.lo[i], ab.hi[i]);
    d.next.col(c) = mdp.sample_next(d.s.col(c), d.a.col(c), rng);
  }
  return d;
}

double MPCProblem::extended_stage_cost(const Vector& s, const Vector& a) const {
  if (constraint) {
    const Vector h = constraint(s, a);
    if ((h.array() > 0.0).any()) return kInf;
  }
  return stage_cost(s, a) + stage_offset;
}

void MPCSolution::write_csv(std::ostream& os) const {
  os << "# predicted open-loop trajectory; value " << value.value() << (feasible ? "" : " (infeasible)") << '\n';
  const Eigen::Index n = states.empty() ? 0 : states.front().size();
  const Eigen::Index m = inputs.empty() ? 0 : inputs.front().size();
  os << "i";
  for (Eigen::Index k = 0; k < n; ++k) os << ",x" << k;
  for (Eigen::Index k = 0; k < m; ++k) os << ",u" << k;
  os << '\n';
  os.precision(17);
  for (std::size_t i = 0; i < states.size(); ++i) {
    os << i;
    for (Eigen::Index k = 0; k < n; ++k) os << ',' << states[i][k];
    for (Eigen::Index k = 0; k < m; ++k) {
      os << ',';
      if (i < inputs.size()) os << inputs[i][k];
    }
    os << '\n';
  }
}

std::optional<Vector> MpcBackend::first_input(const Vector& s) const {
  MPCSolution sol = solve(s);
  if (!sol.feasible) return std::nullopt;
  return sol.inputs.front();
}

// ---- grid dynamic programming -------------------------------------------

GridDpMpc::GridDpMpc(MPCProblem problem, Grid states, Grid actions, bool parallel)
    : problem_(std::move(problem)), states_(std::move(states)), actions_(std::move(actions)) {
  const std::size_t N = problem_.horizon;
  if (N == 0) throw DomainError("MPC horizon must be at least 1");
  if (!(problem_.gamma > 0.0 && problem_.gamma <= 1.0)) throw DomainError("discount must lie in (0, 1]");
  if (!problem_.stage_cost) throw DomainError("MPC problem needs a stage cost");

  for (std::size_t j = 0; j < actions_.size(); ++j) action_nodes_.push_back(actions_.node(j));

  const auto op = kernels::build_operator(
      states_, actions_, [this](const Vector& s, const Vector& a, double& stage, std::vector<Outcome>& next) {
        stage = problem_.extended_stage_cost(s, a);
        if (stage != kInf) next.push_back({problem_.model(s, a), 1.0});
      });
  auto sweep = parallel ? &kernels::bellman_sweep_omp : &kernels::bellman_sweep_serial;

  const std::size_t n = states_.size();
  std::vector<double> terminal(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vector x = states_.node(i);
    if (problem_.terminal_set && !problem_.terminal_set->contains(x, 1e-12)) {
      terminal[i] = kInf;
    } else {
      terminal[i] = problem_.terminal_cost ? problem_.terminal_cost(x) : 0.0;
    }
  }
  tables_.resize(N);
  tables_[N - 1] = ValueTable{states_, std::move(terminal)};
  std::vector<std::uint32_t> argmin(n);
  for (std::size_t i = N - 1; i >= 1; --i) {
    std::vector<double> v(n);
    sweep(op, problem_.gamma, tables_[i].values, v, argmin, {});
    tables_[i - 1] = ValueTable{states_, std::move(v)};
  }
  std::vector<double> v0(n);
  sweep(op, problem_.gamma, tables_[0].values, v0, argmin, {});
  value0_ = ValueTable{states_, std::move(v0)};
  policy0_ = PolicyTable{states_, actions_, std::move(argmin)};
}

std::size_t GridDpMpc::argmin_stage(const Vector& x, std::size_t stage, double& best) const {
  best = kInf;
  std::size_t best_j = 0;
  const ValueTable& next = tables_[stage];
  for (std::size_t j = 0; j < action_nodes_.size(); ++j) {
    const double l = problem_.extended_stage_cost(x, action_nodes_[j]);
    if (l == kInf) continue;
    const double v = next(problem_.model(x, action_nodes_[j]));
    if (v == kInf) continue;
    const double qj = l + problem_.gamma * v;
    if (qj < best) {
      best = qj;
      best_j = j;
    }
  }
  return best_j;
}

ExtReal GridDpMpc::q(const Vector& s, const Vector& a) const {
  if (!states_.box().contains(s, 1e-9)) throw DomainError("MPC state outside the state grid");
  const double l = problem_.extended_stage_cost(s, a);
  if (l == kInf) return ExtReal::infinity();
  const double v = tables_[0](problem_.model(s, a));
  if (v == kInf) return ExtReal::infinity();
  return l + problem_.gamma * v;
}

std::optional<std::size_t> GridDpMpc::argmin(const Vector& s) const {
  if (!states_.box().contains(s, 1e-9)) throw DomainError("MPC state outside the state grid");
  double best = kInf;
  const std::size_t j = argmin_stage(s, 0, best);
  if (best == kInf) return std::nullopt;
  return j;
}

std::optional<Vector> GridDpMpc::first_input(const Vector& s) const {
  const auto j = argmin(s);
  if (!j) return std::nullopt;
  return action_nodes_[*j];
}

MPCSolution GridDpMpc::solve(const Vector& s) const {
  if (!states_.box().contains(s, 1e-9)) throw DomainError("MPC state outside the state grid");
  MPCSolution sol;
  Vector x = s;
  sol.states.push_back(x);
  for (std::size_t i = 0; i < problem_.horizon; ++i) {
    double best = kInf;
    const std::size_t j = argmin_stage(x, i, best);
    if (best == kInf) {
      if (i == 0) return MPCSolution{};
      break;  // interpolation may lose feasibility along the path; keep what we have
    }
    if (i == 0) sol.value = best;
    sol.inputs.push_back(action_nodes_[j]);
    x = problem_.model(x, action_nodes_[j]);
    sol.states.push_back(x);
  }
  sol.feasible = true;
  return sol;
}

// ---- batch linear-quadratic ---------------------------------------------

BatchLqMpc::BatchLqMpc(MPCProblem problem) : problem_(std::move(problem)) {
  const auto& lin = problem_.model.linear_form();
  if (!lin) throw DomainError("batch LQ backend needs a linear prediction model");
  if (!problem_.quadratic_cost) throw DomainError("batch LQ backend needs a quadratic stage cost");
  if (problem_.constraint || problem_.terminal_set) {
    throw DomainError("batch LQ backend does not handle constraints or terminal sets");
  }
  if (problem_.terminal_cost && !problem_.quadratic_terminal) {
    throw DomainError("batch LQ backend needs a quadratic terminal cost");
  }
  if (problem_.horizon == 0) throw DomainError("MPC horizon must be at least 1");
  const Matrix& A = lin->A;
  const Matrix& B = lin->B;
  const Vector& d = lin->d;
  n_ = A.rows();
  m_ = B.cols();
  const Matrix& Q = problem_.quadratic_cost->Q;
  const Matrix& R = problem_.quadratic_cost->R;
  const Matrix P = problem_.quadratic_terminal ? problem_.quadratic_terminal->P : Matrix::Zero(n_, n_);
  if (Q.rows() != n_ || R.rows() != m_ || P.rows() != n_) throw DomainError("batch LQ: cost dimensions");

  const auto N = static_cast<Eigen::Index>(problem_.horizon);
  const double g = problem_.gamma;
  hessian_ = Matrix::Zero(N * m_, N * m_);
  linear_ = Matrix::Zero(N * m_, n_);
  affine_ = Vector::Zero(N * m_);

  // x_i = Phi s + Gam U + delta, advanced one step at a time.
  Matrix Phi = Matrix::Identity(n_, n_);
  Matrix Gam = Matrix::Zero(n_, N * m_);
  Vector delta = Vector::Zero(n_);
  double w = 1.0;
  for (Eigen::Index i = 0; i < N; ++i) {
    hessian_.block(i * m_, i * m_, m_, m_) += w * R;
    Phi = A * Phi;
    Gam = A * Gam;
    Gam.middleCols(i * m_, m_) += B;
    delta = A * delta + d;
    w *= g;
    const Matrix& M = (i + 1 == N) ? P : Q;
    hessian_ += w * Gam.transpose() * M * Gam;
    linear_ += w * Gam.transpose() * M * Phi;
    affine_ += w * Gam.transpose() * M * delta;
  }
  hessian_ = 0.5 * (hessian_ + hessian_.transpose());
  if (hessian_.llt().info() != Eigen::Success) throw DomainError("batch LQ: Hessian not positive definite");
}

double BatchLqMpc::cost(const Vector& s, const Vector& u) const {
  const auto& lin = *problem_.model.linear_form();
  const Matrix& Q = problem_.quadratic_cost->Q;
  const Matrix& R = problem_.quadratic_cost->R;
  Vector x = s;
  double total = 0.0;
  double w = 1.0;
  for (std::size_t i = 0; i < problem_.horizon; ++i) {
    const Vector ui = u.segment(static_cast<Eigen::Index>(i) * m_, m_);
    total += w * (x.dot(Q * x) + ui.dot(R * ui) + problem_.stage_offset);
    x = lin.A * x + lin.B * ui + lin.d;
    w *= problem_.gamma;
  }
  if (problem_.quadratic_terminal) {
    total += w * (x.dot(problem_.quadratic_terminal->P * x) + problem_.quadratic_terminal->offset);
  }
  return total;
}

Vector BatchLqMpc::optimal_inputs(const Vector& s, std::optional<Vector> first) const {
  if (s.size() != n_) throw DomainError("batch LQ: state has wrong size");
  const Vector g = linear_ * s + affine_;
  if (!first) return hessian_.llt().solve(-g);
  if (first->size() != m_) throw DomainError("batch LQ: action has wrong size");
  const Eigen::Index rest = hessian_.rows() - m_;
  Vector u(hessian_.rows());
  u.head(m_) = *first;
  if (rest > 0) {
    const Matrix Hrr = hessian_.bottomRightCorner(rest, rest);
    const Vector rhs = -(g.tail(rest) + hessian_.bottomLeftCorner(rest, m_) * *first);
    u.tail(rest) = Hrr.llt().solve(rhs);
  }
  return u;
}

MPCSolution BatchLqMpc::solve(const Vector& s) const {
  const Vector u = optimal_inputs(s, std::nullopt);
  const auto& lin = *problem_.model.linear_form();
  MPCSolution sol;
  sol.value = cost(s, u);
  sol.feasible = true;
  Vector x = s;
  sol.states.push_back(x);
  for (std::size_t i = 0; i < problem_.horizon; ++i) {
    const Vector ui = u.segment(static_cast<Eigen::Index>(i) * m_, m_);
    sol.inputs.push_back(ui);
    x = lin.A * x + lin.B * ui + lin.d;
    sol.states.push_back(x);
  }
  return sol;
}

ExtReal BatchLqMpc::q(const Vector& s, const Vector& a) const { return cost(s, optimal_inputs(s, a)); }

// ---- policy ---------------------------------------------------------------

Vector MpcPolicy::operator()(const Vector& s) const {
  auto u = backend_->first_input(s);
  if (!u) throw InfeasibleError("MPC problem infeasible at the given state");
  return *u;
}

std::optional<Vector> MpcPolicy::try_action(const Vector& s) const { return backend_->first_input(s); }

Policy MpcPolicy::as_policy() const {
  return [self = *this](const Vector& s) { return self(s); };
}

MpcPolicy mpc_policy(std::shared_ptr<const MpcBackend> backend) { return MpcPolicy(std::move(backend)); }

// ---- input-output state -------------------------------------------------

Vector IoStateLayout::build(std::span<const Vector> ys, std::span<const Vector> us) const {
  if (ys.size() != p + 1 || us.size() != l) throw DomainError("IO state: expected p + 1 outputs and l inputs");
  Vector x(dim());
  Eigen::Index k = 0;
  for (const auto& y : ys) {
    if (y.size() != q) throw DomainError("IO state: output has wrong size");
    x.segment(k, q) = y;
    k += q;
  }
  for (const auto& u : us) {
    if (u.size() != m) throw DomainError("IO state: input has wrong size");
    x.segment(k, m) = u;
    k += m;
  }
  return x;
}

Vector IoStateLayout::shift(const Vector& x, const Vector& y_next, const Vector& u) const {
  if (x.size() != dim()) throw DomainError("IO state has wrong size");
  Vector out(dim());
  const auto pq = static_cast<Eigen::Index>(p) * q;
  const auto ym = static_cast<Eigen::Index>(p + 1) * q;
  out.head(q) = y_next;
  out.segment(q, pq) = x.head(pq);
  if (l > 0) {
    const auto lm = static_cast<Eigen::Index>(l - 1) * m;
    out.segment(ym, m) = u;
    out.segment(ym + m, lm) = x.segment(ym, lm);
  }
  return out;
}

Matrix IoStateLayout::output_selector() const {
  Matrix S = Matrix::Zero(q, dim());
  S.leftCols(q).setIdentity();
  return S;
}

}  // namespace pclab
