#include "pclab/mdp.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "pclab/kernels.hpp"

namespace pclab {

namespace {

constexpr double kBoxSlack = 1e-12;

PerformanceEstimate summarize(const std::vector<double>& xs) {
  PerformanceEstimate est;
  est.n = xs.size();
  double mean = 0.0;
  double m2 = 0.0;
  std::size_t k = 0;
  for (double x : xs) {
    if (x == kInf) {
      est.mean = kInf;
      est.half_width = kInf;
      return est;
    }
    ++k;
    const double d = x - mean;
    mean += d / static_cast<double>(k);
    m2 += d * (x - mean);
  }
  est.mean = mean;
  const double var = xs.size() > 1 ? m2 / static_cast<double>(xs.size() - 1) : 0.0;
  est.half_width = 1.959963984540054 * std::sqrt(var / static_cast<double>(xs.size()));
  return est;
}

void check_horizon(const TabularMDP& mdp, std::size_t horizon) {
  const double tail = std::pow(mdp.gamma(), static_cast<double>(horizon)) * mdp.cost_bound();
  if (tail >= 1e-6) {
    throw DomainError("horizon " + std::to_string(horizon) + " leaves a discounted tail of " + std::to_string(tail) +
                      " (needs < 1e-6; see truncation_horizon)");
  }
}

}  // namespace

TabularMDP::TabularMDP(Spec spec) : spec_(std::move(spec)) {
  if (!(spec_.gamma > 0.0 && spec_.gamma < 1.0)) throw DomainError("discount must lie strictly inside (0, 1)");
  if (spec_.states.size() == 0 || spec_.actions.size() == 0) throw DomainError("MDP needs state and action grids");
  if (!spec_.step && !spec_.kernel) throw DomainError("MDP needs a step function or an exact kernel");
  if (!spec_.cost) throw DomainError("MDP needs a stage cost");
  bounds_ = spec_.bounds.value_or(spec_.states.box());

  // Tensor product of the per-dimension rules.
  noise_rule_.emplace_back(Vector::Zero(static_cast<Eigen::Index>(spec_.noise.size())), 1.0);
  for (std::size_t d = 0; d < spec_.noise.size(); ++d) {
    const auto rule = spec_.noise[d].quadrature(spec_.quadrature_points);
    std::vector<std::pair<Vector, double>> expanded;
    expanded.reserve(noise_rule_.size() * rule.size());
    for (const auto& [w, p] : noise_rule_) {
      for (const auto& [x, q] : rule) {
        Vector wn = w;
        wn[static_cast<Eigen::Index>(d)] = x;
        expanded.emplace_back(std::move(wn), p * q);
      }
    }
    noise_rule_ = std::move(expanded);
  }
}

bool TabularMDP::deterministic() const {
  if (spec_.kernel) return false;
  return std::all_of(spec_.noise.begin(), spec_.noise.end(), [](const auto& n) { return n.degenerate(); });
}

double TabularMDP::stage_cost_unchecked(const Vector& s, const Vector& a) const {
  if (spec_.constraint) {
    const Vector h = spec_.constraint(s, a);
    if ((h.array() > 0.0).any()) return kInf;
  }
  return spec_.cost(s, a);
}

ExtReal TabularMDP::stage_cost(const Vector& s, const Vector& a) const {
  if (!bounds_.contains(s, kBoxSlack)) throw DomainError("state outside the MDP box");
  if (!spec_.actions.box().contains(a, kBoxSlack)) throw DomainError("action outside the action box");
  return ExtReal(stage_cost_unchecked(s, a));
}

std::vector<Outcome> TabularMDP::successors(const Vector& s, const Vector& a) const {
  if (spec_.kernel) {
    auto out = spec_.kernel(s, a);
    double total = 0.0;
    for (const auto& o : out) {
      if (o.prob < 0.0) throw DomainError("kernel returned a negative probability");
      total += o.prob;
    }
    if (std::abs(total - 1.0) > 1e-12) throw DomainError("kernel probabilities do not sum to 1");
    return out;
  }
  std::vector<Outcome> out;
  out.reserve(noise_rule_.size());
  for (const auto& [w, p] : noise_rule_) out.push_back({spec_.step(s, a, w), p});
  return out;
}

Vector TabularMDP::expected_next(const Vector& s, const Vector& a) const {
  const auto next = successors(s, a);
  Vector mean = Vector::Zero(next.front().next.size());
  for (const auto& o : next) mean += o.prob * o.next;
  return mean;
}

Vector TabularMDP::sample_next(const Vector& s, const Vector& a, Rng& rng) const {
  if (spec_.kernel) {
    const auto out = successors(s, a);
    const double u = uniform01(rng);
    double acc = 0.0;
    for (const auto& o : out) {
      acc += o.prob;
      if (u < acc) return o.next;
    }
    return out.back().next;
  }
  Vector w(static_cast<Eigen::Index>(spec_.noise.size()));
  for (std::size_t d = 0; d < spec_.noise.size(); ++d) w[static_cast<Eigen::Index>(d)] = spec_.noise[d].sample(rng);
  return spec_.step(s, a, w);
}

double TabularMDP::cost_bound() const {
  double bound = 0.0;
  std::vector<Vector> actions(spec_.actions.size());
  for (std::size_t j = 0; j < actions.size(); ++j) actions[j] = spec_.actions.node(j);
  for (std::size_t i = 0; i < spec_.states.size(); ++i) {
    const Vector s = spec_.states.node(i);
    for (const auto& a : actions) {
      const double c = stage_cost_unchecked(s, a);
      if (c != kInf) bound = std::max(bound, std::abs(c));
    }
  }
  return bound;
}

void StochasticLinearSystem::validate() const {
  const auto nn = A.rows();
  if (A.cols() != nn || B.rows() != nn || C.cols() != nn) throw DomainError("inconsistent A/B/C dimensions");
  if (W.rows() != nn || W.cols() != nn) throw DomainError("W must be n x n");
  if (Qc.rows() != nn || Qc.cols() != nn) throw DomainError("Qc must be n x n");
  if (Rc.rows() != B.cols() || Rc.cols() != B.cols()) throw DomainError("Rc must be m x m");
  if (!W.isApprox(W.transpose(), 1e-12) && W.norm() > 0) throw DomainError("W must be symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> ew(W);
  if (W.norm() > 0 && ew.eigenvalues().minCoeff() < -1e-12 * W.norm()) throw DomainError("W must be PSD");
  Eigen::SelfAdjointEigenSolver<Matrix> eq(Qc);
  if (eq.eigenvalues().minCoeff() < -1e-12 * std::max(1.0, Qc.norm())) throw DomainError("Qc must be PSD");
  Eigen::LLT<Matrix> lr(Rc);
  if (lr.info() != Eigen::Success) throw DomainError("Rc must be positive definite");
  if (!(truncation > 0.0) || !std::isfinite(truncation)) throw DomainError("truncation must be finite and positive");
  if (measurement_sigma < 0.0) throw DomainError("measurement sigma must be non-negative");
}

Matrix StochasticLinearSystem::noise_factor() const {
  // Eigen-based factor works for singular PSD W as well.
  Eigen::SelfAdjointEigenSolver<Matrix> es(W);
  Vector ev = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * ev.cwiseSqrt().asDiagonal();
}

Matrix StochasticLinearSystem::effective_noise_covariance() const {
  const auto z = TruncatedNormal::symmetric(1.0, truncation);
  return z.variance() * W;
}

Vector StochasticLinearSystem::sample_process_noise(Rng& rng) const {
  const auto z = TruncatedNormal::symmetric(1.0, truncation);
  Vector draw(n());
  for (Eigen::Index i = 0; i < n(); ++i) draw[i] = z.sample(rng);
  return noise_factor() * draw;
}

Vector StochasticLinearSystem::sample_measurement_noise(Rng& rng) const {
  Vector v = Vector::Zero(q());
  if (measurement_sigma == 0.0) return v;
  const auto z = TruncatedNormal::symmetric(measurement_sigma, truncation);
  for (Eigen::Index i = 0; i < q(); ++i) v[i] = z.sample(rng);
  return v;
}

void Trajectory::write_csv(std::ostream& os) const {
  const auto ns = states.empty() ? 0 : states.front().size();
  const auto na = actions.empty() ? 0 : actions.front().size();
  os << "# k: step index; s<i>: state component; a<i>: action component; cost: realized stage cost\n";
  os << "k";
  for (Eigen::Index i = 0; i < ns; ++i) os << ",s" << i;
  for (Eigen::Index i = 0; i < na; ++i) os << ",a" << i;
  os << ",cost\n";
  os.precision(17);
  for (std::size_t k = 0; k < states.size(); ++k) {
    os << k;
    for (Eigen::Index i = 0; i < ns; ++i) os << ',' << states[k][i];
    if (k < actions.size()) {
      for (Eigen::Index i = 0; i < na; ++i) os << ',' << actions[k][i];
      os << ',' << costs[k];
    } else {
      for (Eigen::Index i = 0; i < na; ++i) os << ',';
      os << ',';
    }
    os << '\n';
  }
}

Vector SteadyStateReport::histogram_mean(const Grid& grid) const {
  Vector mean = Vector::Zero(static_cast<Eigen::Index>(grid.dim()));
  for (std::size_t c = 0; c < histogram.size(); ++c) {
    if (histogram[c] > 0.0) mean += histogram[c] * grid.cell_center(c);
  }
  return mean;
}

Matrix SteadyStateReport::histogram_covariance(const Grid& grid) const {
  const Vector mean = histogram_mean(grid);
  Matrix cov = Matrix::Zero(mean.size(), mean.size());
  for (std::size_t c = 0; c < histogram.size(); ++c) {
    if (histogram[c] > 0.0) {
      const Vector d = grid.cell_center(c) - mean;
      cov += histogram[c] * d * d.transpose();
    }
  }
  return cov;
}

std::size_t truncation_horizon(const TabularMDP& mdp, double tol) {
  const double bound = mdp.cost_bound();
  if (bound <= tol) return 1;
  return static_cast<std::size_t>(std::ceil(std::log(tol / bound) / std::log(mdp.gamma()))) + 1;
}

Trajectory rollout(const TabularMDP& mdp, const Policy& policy, const Vector& s0, std::size_t horizon,
                   std::uint64_t seed) {
  if (horizon < 1) throw DomainError("rollout horizon must be at least 1");
  if (!mdp.bounds().contains(s0, kBoxSlack)) throw DomainError("initial state outside the MDP box");
  Trajectory t;
  t.seed = seed;
  t.states.reserve(horizon + 1);
  t.states.push_back(s0);
  Rng rng = make_stream(seed, 0);
  const Box abox = mdp.actions().box();
  for (std::size_t k = 0; k < horizon; ++k) {
    const Vector& s = t.states.back();
    Vector a = policy(s);
    if (!abox.contains(a, kBoxSlack)) throw DomainError("policy returned an action outside the action box");
    t.costs.push_back(mdp.stage_cost_unchecked(s, a));
    Vector next = mdp.sample_next(s, a, rng);
    if (!mdp.bounds().contains(next, kBoxSlack)) throw DomainError("sampled state left the bounding box");
    t.actions.push_back(std::move(a));
    t.states.push_back(std::move(next));
  }
  return t;
}

PerformanceEstimate estimate_performance(const TabularMDP& mdp, const Policy& policy, const Vector& s0,
                                         std::size_t n_rollouts, std::size_t horizon, std::uint64_t seed) {
  if (n_rollouts < 2) throw DomainError("estimate_performance needs at least 2 rollouts");
  check_horizon(mdp, horizon);
  return summarize(kernels::discounted_returns_omp(mdp, policy, s0, n_rollouts, horizon, seed));
}

PerformanceEstimate estimate_performance_gap(const TabularMDP& mdp, const Policy& a, const Policy& b,
                                             const Vector& s0, std::size_t n_rollouts, std::size_t horizon,
                                             std::uint64_t seed) {
  if (n_rollouts < 2) throw DomainError("estimate_performance_gap needs at least 2 rollouts");
  check_horizon(mdp, horizon);
  const auto ja = kernels::discounted_returns_omp(mdp, a, s0, n_rollouts, horizon, seed);
  const auto jb = kernels::discounted_returns_omp(mdp, b, s0, n_rollouts, horizon, seed);
  std::vector<double> diff(n_rollouts);
  for (std::size_t i = 0; i < n_rollouts; ++i) {
    if (ja[i] == kInf || jb[i] == kInf) throw DomainError("infinite return in a paired performance estimate");
    diff[i] = ja[i] - jb[i];
  }
  return summarize(diff);
}

SteadyStateReport estimate_steady_state(const TabularMDP& mdp, const Policy& policy, double r,
                                        std::size_t burn_in, std::size_t n_samples, std::uint64_t seed,
                                        std::optional<Vector> s0) {
  if (r < 0.0) throw DomainError("perturbation radius must be non-negative");
  const Grid& grid = mdp.states();
  SteadyStateReport rep;
  rep.perturbation_radius = r;
  rep.histogram.assign(grid.cell_count(), 0.0);
  Vector s = s0.value_or(0.5 * (mdp.bounds().lo + mdp.bounds().hi));
  rep.support_box = Box{s, s};
  Rng rng = make_stream(seed, 0);
  const Box abox = mdp.actions().box();
  bool first = true;
  rep.samples.reserve(n_samples);
  for (std::size_t k = 0; k < burn_in + n_samples; ++k) {
    Vector a = abox.clamp(uniform_in_ball(rng, policy(s), r));
    s = mdp.sample_next(s, a, rng);
    if (!mdp.bounds().contains(s, kBoxSlack)) {
      rep.diverged = true;
      break;
    }
    if (k < burn_in) continue;
    rep.histogram[grid.cell_of(s)] += 1.0;
    rep.samples.push_back(s);
    if (first) {
      rep.support_box = Box{s, s};
      first = false;
    } else {
      rep.support_box.lo = rep.support_box.lo.cwiseMin(s);
      rep.support_box.hi = rep.support_box.hi.cwiseMax(s);
    }
  }
  const double total = static_cast<double>(rep.samples.size());
  if (total > 0.0) {
    for (auto& h : rep.histogram) h /= total;
  }
  return rep;
}

}  // namespace pclab
