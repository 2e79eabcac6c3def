#include "pclab/analyzer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <memory>
#include <numeric>
#include <ostream>

#include "pclab/kernels.hpp"

namespace pclab {

namespace {

// Multi-indices alpha in N^d with |alpha| = k.
void multi_indices(std::size_t d, int k, std::vector<int>& cur, std::vector<std::vector<int>>& out) {
  if (cur.size() + 1 == d) {
    cur.push_back(k);
    out.push_back(cur);
    cur.pop_back();
    return;
  }
  for (int i = k; i >= 0; --i) {
    cur.push_back(i);
    multi_indices(d, k - i, cur, out);
    cur.pop_back();
  }
}

std::vector<std::vector<int>> multi_indices(std::size_t d, int k) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur;
  if (d > 0) multi_indices(d, k, cur, out);
  return out;
}

double factorial(const std::vector<int>& alpha) {
  double f = 1.0;
  for (int k : alpha) {
    for (int i = 2; i <= k; ++i) f *= i;
  }
  return f;
}

struct Tap {
  int offset;
  double weight;
};

const std::vector<Tap>& stencil(int order) {
  static const std::vector<Tap> s[5] = {
      {{0, 1.0}},
      {{-1, -0.5}, {1, 0.5}},
      {{-1, 1.0}, {0, -2.0}, {1, 1.0}},
      {{-2, -0.5}, {-1, 1.0}, {1, -1.0}, {2, 0.5}},
      {{-2, 1.0}, {-1, -4.0}, {0, 6.0}, {1, -4.0}, {2, 1.0}},
  };
  if (order < 0 || order > 4) throw DomainError("finite differences support orders 0..4");
  return s[order];
}

double fd_raw(const ValueFn& f, const Vector& x, const std::vector<int>& alpha, double h) {
  const std::size_t d = alpha.size();
  std::vector<std::size_t> pos(d, 0);
  double acc = 0.0;
  Vector y(x.size());
  while (true) {
    double w = 1.0;
    y = x;
    for (std::size_t k = 0; k < d; ++k) {
      const Tap& t = stencil(alpha[k])[pos[k]];
      w *= t.weight;
      y[static_cast<Eigen::Index>(k)] += t.offset * h;
    }
    acc += w * f(y);
    std::size_t k = 0;
    for (; k < d; ++k) {
      if (++pos[k] < stencil(alpha[k]).size()) break;
      pos[k] = 0;
    }
    if (k == d) break;
  }
  int order = 0;
  for (int a : alpha) order += a;
  return acc / std::pow(h, order);
}

double chebyshev_t(int k, double t) {
  double t0 = 1.0;
  double t1 = t;
  if (k == 0) return t0;
  for (int i = 1; i < k; ++i) {
    const double t2 = 2.0 * t * t1 - t0;
    t0 = t1;
    t1 = t2;
  }
  return t1;
}

void chebyshev_row(const Box& region, int degree, const Vector& x, Vector& row) {
  const auto d = static_cast<std::size_t>(region.dim());
  const auto per = static_cast<std::size_t>(degree + 1);
  std::vector<std::vector<double>> T(d, std::vector<double>(per));
  for (std::size_t k = 0; k < d; ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    const double t = (2.0 * x[i] - region.lo[i] - region.hi[i]) / (region.hi[i] - region.lo[i]);
    for (std::size_t p = 0; p < per; ++p) T[k][p] = chebyshev_t(static_cast<int>(p), t);
  }
  const Eigen::Index n = row.size();
  for (Eigen::Index c = 0; c < n; ++c) {
    std::size_t rem = static_cast<std::size_t>(c);
    double v = 1.0;
    for (std::size_t k = d; k-- > 0;) {
      v *= T[k][rem % per];
      rem /= per;
    }
    row[c] = v;
  }
}

Box hull_of(const std::vector<Vector>& pts) {
  Box b{pts.front(), pts.front()};
  for (const auto& p : pts) {
    b.lo = b.lo.cwiseMin(p);
    b.hi = b.hi.cwiseMax(p);
  }
  return b;
}

// Points of a uniform lattice with `per` nodes per axis over b.
std::vector<Vector> lattice(const Box& b, std::size_t per) {
  const auto d = static_cast<std::size_t>(b.dim());
  std::vector<Axis> axes;
  for (std::size_t k = 0; k < d; ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    const double hi = b.hi[i] > b.lo[i] ? b.hi[i] : b.lo[i] + 1e-12;
    axes.emplace_back(b.lo[i], hi, per);
  }
  const Grid g(std::move(axes));
  std::vector<Vector> out;
  out.reserve(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) out.push_back(g.node(i));
  return out;
}

double taylor_term(const ValueFn& v, const Vector& x, int order, double h) {
  double acc = 0.0;
  for (const auto& alpha : multi_indices(static_cast<std::size_t>(x.size()), order)) {
    acc += std::abs(fd_partial(v, x, alpha, h)) / factorial(alpha);
  }
  return acc;
}

nlohmann::json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

// Non-finite numbers are not valid JSON; write them as strings.
nlohmann::json num_json(double x) {
  if (std::isfinite(x)) return x;
  if (std::isnan(x)) return "nan";
  return x > 0 ? "inf" : "-inf";
}

void write_vec(std::ostream& os, const Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) os << ',' << v[i];
}

template <class Fn>
void parallel_for(std::size_t n, bool parallel, Fn&& fn) {
  std::exception_ptr error;
  const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(dynamic, 4) if (parallel)
  for (std::int64_t i = 0; i < count; ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(pclab_analyzer_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

double argmin_of(const std::vector<double>& q, std::size_t& idx) {
  double best = kInf;
  idx = 0;
  for (std::size_t j = 0; j < q.size(); ++j) {
    if (q[j] < best) {
      best = q[j];
      idx = j;
    }
  }
  return best;
}

MPCProblem theorem1_problem(const TabularMDP& mdp, const PredictionModel& model, const ValueIterationResult& vi,
                            std::size_t horizon, double stage_offset) {
  MPCProblem p{model, [&mdp](const Vector& s, const Vector& a) { return mdp.stage_cost_unchecked(s, a); }, {},
               vi.value.as_function()};
  p.horizon = horizon;
  p.gamma = mdp.gamma();
  p.stage_offset = stage_offset;
  return p;
}

}  // namespace

// ---- smooth proxies and derivatives --------------------------------------

ChebyshevProxy::ChebyshevProxy(const ValueFn& v, Box region, int degree, int samples_per_axis)
    : region_(std::move(region)), degree_(degree) {
  if (degree < 0 || degree > 30) throw DomainError("proxy degree must lie in 0..30");
  if (((region_.hi - region_.lo).array() <= 0.0).any()) throw DomainError("proxy region must have positive width");
  const auto d = static_cast<std::size_t>(region_.dim());
  const auto per = static_cast<std::size_t>(samples_per_axis > 0 ? samples_per_axis : std::max(41, 3 * (degree + 1)));
  if (per < static_cast<std::size_t>(degree + 1)) throw DomainError("proxy needs more samples than coefficients");
  const auto pts = lattice(region_, per);
  Eigen::Index n_coef = 1;
  for (std::size_t k = 0; k < d; ++k) n_coef *= degree + 1;
  Matrix X(static_cast<Eigen::Index>(pts.size()), n_coef);
  Vector y(static_cast<Eigen::Index>(pts.size()));
  Vector row(n_coef);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double val = v(pts[i]);
    if (!std::isfinite(val)) throw DomainError("proxy fit: value function is not finite on the region");
    chebyshev_row(region_, degree, pts[i], row);
    X.row(static_cast<Eigen::Index>(i)) = row.transpose();
    y[static_cast<Eigen::Index>(i)] = val;
  }
  coef_ = X.colPivHouseholderQr().solve(y);
  fit_rms_ = std::sqrt((X * coef_ - y).squaredNorm() / static_cast<double>(y.size()));
}

double ChebyshevProxy::operator()(const Vector& x) const {
  Vector row(coef_.size());
  chebyshev_row(region_, degree_, x, row);
  return row.dot(coef_);
}

ValueFn ChebyshevProxy::as_function() const {
  return [p = std::make_shared<ChebyshevProxy>(*this)](const Vector& x) { return (*p)(x); };
}

ValueFn quadratic_value(const RiccatiSolution& sol) {
  return [P = sol.P, v0 = sol.v0](const Vector& s) { return s.dot(P * s) + v0; };
}

double fd_partial(const ValueFn& f, const Vector& x, const std::vector<int>& alpha, double h) {
  if (alpha.size() != static_cast<std::size_t>(x.size())) throw DomainError("multi-index dimension mismatch");
  if (!(h > 0.0)) throw DomainError("finite-difference step must be positive");
  const double dh = fd_raw(f, x, alpha, h);
  const double d2h = fd_raw(f, x, alpha, 2.0 * h);
  return (4.0 * dh - d2h) / 3.0;
}

Matrix fd_hessian(const ValueFn& f, const Vector& x, double h) {
  const Eigen::Index n = x.size();
  Matrix H(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) {
      std::vector<int> alpha(static_cast<std::size_t>(n), 0);
      alpha[static_cast<std::size_t>(i)] += 1;
      alpha[static_cast<std::size_t>(j)] += 1;
      H(i, j) = H(j, i) = fd_partial(f, x, alpha, h);
    }
  }
  return H;
}

// ---- delta -----------------------------------------------------------------

double compute_delta(const TabularMDP& mdp, const PredictionModel& model, const ValueFn& vstar, const Vector& s,
                     const Vector& a) {
  const Vector f = model(s, a);
  if (!mdp.states().box().contains(f, 1e-9)) throw DomainError("model prediction outside the state box");
  double e = 0.0;
  for (const auto& o : mdp.successors(s, a)) {
    const double v = vstar(o.next);
    if (!std::isfinite(v)) throw DomainError("V* is infinite on the reachable set");
    e += o.prob * v;
  }
  const double vf = vstar(f);
  if (!std::isfinite(vf)) throw DomainError("V* is infinite at the model prediction");
  return e - vf;
}

ProbeSet draw_probes(const TabularMDP& mdp, const Policy& pistar, const ProbeOptions& opts) {
  if (opts.n_probes == 0) throw DomainError("need at least one probe");
  ProbeSet out;
  out.r = opts.r;
  out.steady = estimate_steady_state(mdp, pistar, opts.r, opts.burn_in, opts.chain_length, opts.seed, opts.s0);
  if (out.steady.diverged) throw DomainError("closed loop left the bounding box; no attraction set estimate");
  const auto& samples = out.steady.samples;
  if (samples.empty()) throw DomainError("steady-state chain produced no samples");
  Rng rng = make_stream(opts.seed, 1);
  const Box abox = mdp.actions().box();
  const double stride = static_cast<double>(samples.size()) / static_cast<double>(opts.n_probes);
  for (std::size_t i = 0; i < opts.n_probes; ++i) {
    const auto k = std::min(samples.size() - 1, static_cast<std::size_t>(std::floor(i * stride)));
    const Vector& s = samples[k];
    out.states.push_back(s);
    out.actions.push_back(abox.clamp(uniform_in_ball(rng, pistar(s), opts.r)));
  }
  return out;
}

double GapReport::relative_spread() const {
  if (v0_hat == 0.0) return spread == 0.0 ? 0.0 : kInf;
  return spread / std::abs(v0_hat);
}

double GapReport::max_abs_remainder() const {
  double m = 0.0;
  for (const auto& p : probes) m = std::max(m, std::abs(p.remainder));
  return m;
}

nlohmann::json GapReport::to_json() const {
  nlohmann::json j;
  j["v0_hat"] = v0_hat;
  j["spread"] = spread;
  j["relative_spread"] = num_json(relative_spread());
  j["cv"] = num_json(cv);
  j["taylor_constant"] = c;
  j["smooth"] = smooth;
  j["max_abs_remainder"] = max_abs_remainder();
  j["n_probes"] = probes.size();
  if (hull.dim() > 0) j["hull"] = {{"lo", vec_json(hull.lo)}, {"hi", vec_json(hull.hi)}};
  if (global) {
    j["global"] = {{"mean", global->mean}, {"spread", global->spread}, {"cv", num_json(global->cv)},
                   {"count", global->count}};
  }
  return j;
}

void GapReport::write_csv(std::ostream& os) const {
  os << "# one row per probe (s, a): delta = E[V*(s+)] - V*(f(s,a)); quad = 0.5 Tr(Sigma Hess V*); "
        "remainder = delta - quad; third/fourth = bound terms; mu_k = E||s+ - f||_inf^k\n";
  const std::size_t ds = probes.empty() ? 0 : static_cast<std::size_t>(probes[0].s.size());
  const std::size_t da = probes.empty() ? 0 : static_cast<std::size_t>(probes[0].a.size());
  os << "probe";
  for (std::size_t i = 0; i < ds; ++i) os << ",s" << i;
  for (std::size_t i = 0; i < da; ++i) os << ",a" << i;
  os << ",delta,quad,remainder,third,fourth,bound,mu2,mu3,mu4\n";
  os.precision(17);
  for (std::size_t k = 0; k < probes.size(); ++k) {
    const auto& p = probes[k];
    os << k;
    write_vec(os, p.s);
    write_vec(os, p.a);
    os << ',' << p.delta << ',' << p.quadratic_term << ',' << p.remainder << ',' << p.third_order << ','
       << p.fourth_order << ',' << p.bound() << ',' << p.mu2 << ',' << p.mu3 << ',' << p.mu4 << '\n';
  }
}

GlobalDelta global_delta(const TabularMDP& mdp, const PredictionModel& model, const ValueFn& vstar) {
  const Grid& S = mdp.states();
  const Grid& A = mdp.actions();
  const Box box = S.box();
  auto inside = [&box](const Vector& x) {
    return ((x.array() > box.lo.array()) && (x.array() < box.hi.array())).all();
  };
  std::vector<double> deltas(S.size() * A.size(), std::nan(""));
  parallel_for(S.size(), true, [&](std::size_t i) {
    const Vector s = S.node(i);
    for (std::size_t j = 0; j < A.size(); ++j) {
      const Vector a = A.node(j);
      if (mdp.stage_cost_unchecked(s, a) == kInf) continue;
      const Vector f = model(s, a);
      if (!inside(f)) continue;
      const auto succ = mdp.successors(s, a);
      if (!std::all_of(succ.begin(), succ.end(), [&](const Outcome& o) { return inside(o.next); })) continue;
      double e = 0.0;
      for (const auto& o : succ) e += o.prob * vstar(o.next);
      const double d = e - vstar(f);
      if (std::isfinite(d)) deltas[i * A.size() + j] = d;
    }
  });
  GlobalDelta g;
  double sum = 0.0;
  for (double d : deltas) {
    if (std::isnan(d)) continue;
    sum += d;
    ++g.count;
  }
  if (g.count == 0) return g;
  g.mean = sum / static_cast<double>(g.count);
  double ss = 0.0;
  for (double d : deltas) {
    if (std::isnan(d)) continue;
    g.spread = std::max(g.spread, std::abs(d - g.mean));
    ss += (d - g.mean) * (d - g.mean);
  }
  const double sd = std::sqrt(ss / static_cast<double>(g.count));
  g.cv = g.mean == 0.0 ? (sd == 0.0 ? 0.0 : kInf) : sd / std::abs(g.mean);
  return g;
}

GapReport delta_constancy_report(const TabularMDP& mdp, const PredictionModel& model, const ValueFn& vstar,
                                 const ProbeSet& probes, const DeltaOptions& opts) {
  const std::size_t n = probes.states.size();
  if (probes.actions.size() != n) throw DomainError("probe states and actions differ in count");
  double h = opts.fd_step;
  if (h <= 0.0) {
    h = kInf;
    for (const auto& ax : mdp.states().axes()) h = std::min(h, ax.spacing());
  }

  std::vector<std::optional<GapProbe>> rows(n);
  std::vector<std::vector<Vector>> hull_pts(n);
  parallel_for(n, true, [&](std::size_t k) {
    const Vector& s = probes.states[k];
    const Vector& a = probes.actions[k];
    GapProbe p{s, a};
    try {
      p.delta = compute_delta(mdp, model, vstar, s, a);
    } catch (const DomainError&) {
      return;
    }
    const Vector f = model(s, a);
    const auto succ = mdp.successors(s, a);
    Matrix sigma = Matrix::Zero(f.size(), f.size());
    for (const auto& o : succ) {
      const Vector dlt = o.next - f;
      const double nrm = dlt.lpNorm<Eigen::Infinity>();
      sigma += o.prob * dlt * dlt.transpose();
      p.mu2 += o.prob * nrm * nrm;
      p.mu3 += o.prob * nrm * nrm * nrm;
      p.mu4 += o.prob * nrm * nrm * nrm * nrm;
      hull_pts[k].push_back(o.next);
    }
    hull_pts[k].push_back(f);
    p.quadratic_term = 0.5 * (sigma * fd_hessian(vstar, f, h)).trace();
    p.remainder = p.delta - p.quadratic_term;
    if (opts.smooth) p.third_order = taylor_term(vstar, f, 3, h) * p.mu3;
    rows[k] = std::move(p);
  });

  GapReport rep;
  std::vector<Vector> pts;
  for (std::size_t k = 0; k < n; ++k) {
    if (!rows[k]) continue;
    rep.probes.push_back(std::move(*rows[k]));
    pts.insert(pts.end(), hull_pts[k].begin(), hull_pts[k].end());
  }
  if (rep.probes.size() < 10) {
    throw DomainError("only " + std::to_string(rep.probes.size()) + " usable probes; at least 10 required");
  }

  double sum = 0.0;
  for (const auto& p : rep.probes) sum += p.delta;
  rep.v0_hat = sum / static_cast<double>(rep.probes.size());
  double ss = 0.0;
  for (const auto& p : rep.probes) {
    rep.spread = std::max(rep.spread, std::abs(p.delta - rep.v0_hat));
    ss += (p.delta - rep.v0_hat) * (p.delta - rep.v0_hat);
  }
  const double sd = std::sqrt(ss / static_cast<double>(rep.probes.size()));
  rep.cv = rep.v0_hat == 0.0 ? (sd == 0.0 ? 0.0 : kInf) : sd / std::abs(rep.v0_hat);
  rep.hull = hull_of(pts);

  rep.smooth = opts.smooth;
  if (rep.smooth) {
    const auto d = static_cast<std::size_t>(rep.hull.dim());
    const std::size_t per = opts.hull_points ? opts.hull_points : (d == 1 ? 201 : d == 2 ? 41 : 9);
    const auto lat = lattice(rep.hull, per);
    std::vector<double> c4(lat.size());
    parallel_for(lat.size(), true, [&](std::size_t i) { c4[i] = taylor_term(vstar, lat[i], 4, h); });
    rep.c = *std::max_element(c4.begin(), c4.end());
    if (!std::isfinite(rep.c)) rep.smooth = false;
    for (auto& p : rep.probes) {
      p.fourth_order = rep.c * p.mu4;
      if (!std::isfinite(p.third_order)) rep.smooth = false;
    }
  }
  if (opts.global) rep.global = global_delta(mdp, model, vstar);
  return rep;
}

GapReport delta_constancy_report(const TabularMDP& mdp, const PredictionModel& model, const ValueFn& vstar,
                                 const Policy& pistar, double r, std::size_t n_probes, std::uint64_t seed,
                                 const DeltaOptions& opts) {
  ProbeOptions po;
  po.r = r;
  po.n_probes = n_probes;
  po.seed = seed;
  return delta_constancy_report(mdp, model, vstar, draw_probes(mdp, pistar, po), opts);
}

bool Lemma1Result::all_pass() const { return applicable && failures() == 0; }

std::size_t Lemma1Result::failures() const {
  return static_cast<std::size_t>(std::count(pass.begin(), pass.end(), false));
}

Lemma1Result lemma1_check(const GapReport& report) {
  Lemma1Result res;
  res.applicable = report.smooth;
  if (!res.applicable) return res;
  for (const auto& p : report.probes) {
    // Roundoff of the expectation and the finite differences.
    const double slack = 1e-12 * (1.0 + std::abs(p.delta));
    const double margin = p.bound() - std::abs(p.remainder);
    res.margin.push_back(margin);
    res.pass.push_back(margin >= -slack);
  }
  return res;
}

// ---- grid error bound --------------------------------------------------------

double grid_error_bound(const TabularMDP& mdp, const ValueIterationResult& vi, std::size_t horizon) {
  const Grid& S = vi.value.grid;
  const Grid& A = vi.q.actions;
  const std::size_t nA = A.size();
  const Box box = S.box();
  // Pairs whose successors all stay strictly inside the box; elsewhere the
  // clamp puts kinks into V and Q that no probe ever sees.
  std::vector<char> inner(S.size() * nA, 0);
  parallel_for(S.size(), true, [&](std::size_t i) {
    const Vector s = S.node(i);
    for (std::size_t j = 0; j < nA; ++j) {
      if (!std::isfinite(vi.q.at(i, j))) continue;
      bool ok = true;
      for (const auto& o : mdp.successors(s, A.node(j))) {
        if (!((o.next.array() > box.lo.array()) && (o.next.array() < box.hi.array())).all()) {
          ok = false;
          break;
        }
      }
      inner[i * nA + j] = ok;
    }
  });
  auto greedy_inner = [&](std::size_t i) { return inner[i * nA + vi.policy.action_index[i]] != 0; };

  double eps = 0.0;
  for (std::size_t k = 0; k < S.dim(); ++k) {
    const double h = S.axis(k).spacing();
    const std::size_t st = S.stride(k);
    double m = 0.0;
    for (std::size_t i = 0; i < S.size(); ++i) {
      const std::size_t c = S.unflatten(i)[k];
      if (c == 0 || c + 1 == S.axis(k).size()) continue;
      if (!greedy_inner(i - st) || !greedy_inner(i) || !greedy_inner(i + st)) continue;
      const double a = vi.value.values[i - st];
      const double b = vi.value.values[i];
      const double d = vi.value.values[i + st];
      m = std::max(m, std::abs(a - 2.0 * b + d) / (h * h));
    }
    eps += h * h / 8.0 * m;
  }
  for (std::size_t k = 0; k < A.dim(); ++k) {
    const double h = A.axis(k).spacing();
    const std::size_t st = A.stride(k);
    double m = 0.0;
    for (std::size_t i = 0; i < S.size(); ++i) {
      for (std::size_t j = 0; j < nA; ++j) {
        const std::size_t c = A.unflatten(j)[k];
        if (c == 0 || c + 1 == A.axis(k).size()) continue;
        if (!inner[i * nA + j - st] || !inner[i * nA + j] || !inner[i * nA + j + st]) continue;
        m = std::max(m, std::abs(vi.q.at(i, j - st) - 2.0 * vi.q.at(i, j) + vi.q.at(i, j + st)) / (h * h));
      }
    }
    eps += h * h / 8.0 * m;
  }
  const double g = mdp.gamma();
  return eps * (1.0 - std::pow(g, static_cast<double>(horizon + 1))) / (1.0 - g);
}

// ---- Q_mpc against Q* ------------------------------------------------------

nlohmann::json OptimalityVerdict::to_json() const {
  nlohmann::json j;
  j["q0_hat"] = q0_hat;
  j["max_offset_residual"] = max_offset_residual;
  j["max_exact_residual"] = max_exact_residual;
  j["tie_tolerance"] = tie_tolerance;
  j["argmin_mismatch_rate"] = argmin_mismatch_rate;
  j["mismatches"] = mismatches;
  j["probe_states"] = probes.size();
  j["local_pairs"] = local_pairs;
  if (policy_gap) {
    j["policy_gap"] = {{"mean", num_json(policy_gap->mean)},
                       {"half_width", num_json(policy_gap->half_width)},
                       {"lower", num_json(policy_gap->lower())},
                       {"upper", num_json(policy_gap->upper())},
                       {"n", policy_gap->n}};
  }
  return j;
}

void OptimalityVerdict::write_csv(std::ostream& os) const {
  os << "# one row per probe state: mpc/star = argmin indices on the action grid; suboptimality = "
        "Q*(s,a_mpc) - min Q*(s,.); residual = max local |Q_mpc + q0 - Q*|\n";
  const std::size_t ds = probes.empty() ? 0 : static_cast<std::size_t>(probes[0].s.size());
  os << "probe";
  for (std::size_t i = 0; i < ds; ++i) os << ",s" << i;
  os << ",mpc_index,star_index,suboptimality,residual,mismatch\n";
  os.precision(17);
  for (std::size_t k = 0; k < probes.size(); ++k) {
    const auto& p = probes[k];
    os << k;
    write_vec(os, p.s);
    os << ',' << p.mpc_index << ',' << p.star_index << ',' << p.suboptimality << ',' << p.max_residual << ','
       << (p.mismatch ? 1 : 0) << '\n';
  }
}

OptimalityVerdict theorem1_check(const TabularMDP& mdp, const PredictionModel& model, const ValueIterationResult& vi,
                                 std::size_t horizon, const std::vector<Vector>& probe_states,
                                 const Theorem1Options& opts) {
  if (probe_states.empty()) throw DomainError("theorem1_check needs probe states");
  auto mpc = std::make_shared<GridDpMpc>(theorem1_problem(mdp, model, vi, horizon, opts.stage_offset),
                                         mdp.states(), mdp.actions(), opts.parallel);
  const ValueFn vstar = vi.value.as_function();
  const Grid& A = mdp.actions();
  std::vector<Vector> acts(A.size());
  for (std::size_t j = 0; j < A.size(); ++j) acts[j] = A.node(j);

  struct Row {
    std::vector<double> diff;  // Q* - Q_mpc on local actions
    std::vector<double> qs_local;
    std::vector<double> qm_local;
    VerdictProbe probe;
  };
  std::vector<Row> rows(probe_states.size());
  parallel_for(probe_states.size(), opts.parallel, [&](std::size_t k) {
    const Vector& s = probe_states[k];
    std::vector<double> qs(acts.size());
    std::vector<double> qm(acts.size());
    for (std::size_t j = 0; j < acts.size(); ++j) {
      qs[j] = bellman_q(mdp, vstar, s, acts[j]);
      qm[j] = mpc->q(s, acts[j]).value();
    }
    Row& r = rows[k];
    r.probe.s = s;
    const double best_star = argmin_of(qs, r.probe.star_index);
    argmin_of(qm, r.probe.mpc_index);
    r.probe.suboptimality = qs[r.probe.mpc_index] - best_star;
    r.probe.mismatch = !(r.probe.suboptimality <= opts.tie_tolerance);
    const Vector& astar = acts[r.probe.star_index];
    for (std::size_t j = 0; j < acts.size(); ++j) {
      if ((acts[j] - astar).norm() > opts.r + 1e-12) continue;
      if (!std::isfinite(qs[j]) || !std::isfinite(qm[j])) continue;
      r.diff.push_back(qs[j] - qm[j]);
      r.qs_local.push_back(qs[j]);
      r.qm_local.push_back(qm[j]);
    }
  });

  OptimalityVerdict v;
  v.tie_tolerance = opts.tie_tolerance;
  double sum = 0.0;
  for (const auto& r : rows) {
    for (double d : r.diff) sum += d;
    v.local_pairs += r.diff.size();
  }
  if (v.local_pairs == 0) throw InfeasibleError("no finite (s, a) pairs near pi* on the probe states");
  v.q0_hat = sum / static_cast<double>(v.local_pairs);
  for (auto& r : rows) {
    for (std::size_t i = 0; i < r.diff.size(); ++i) {
      const double res = std::abs(r.qm_local[i] + v.q0_hat - r.qs_local[i]);
      r.probe.max_residual = std::max(r.probe.max_residual, res);
      v.max_exact_residual = std::max(v.max_exact_residual, std::abs(r.diff[i]));
    }
    v.max_offset_residual = std::max(v.max_offset_residual, r.probe.max_residual);
    if (r.probe.mismatch) ++v.mismatches;
    v.probes.push_back(std::move(r.probe));
  }
  v.argmin_mismatch_rate = static_cast<double>(v.mismatches) / static_cast<double>(v.probes.size());

  if (opts.rollouts > 0) {
    if (!opts.s0) throw DomainError("closed-loop gap needs an initial state");
    const std::size_t H = opts.horizon ? opts.horizon : truncation_horizon(mdp);
    auto table = std::make_shared<PolicyTable>(mpc->policy_table());
    const Policy pi_mpc = [table](const Vector& s) { return (*table)(s); };
    v.policy_gap = estimate_performance_gap(mdp, pi_mpc, vi.policy.as_policy(), *opts.s0, opts.rollouts, H, opts.seed);
  }
  return v;
}

TelescopingResult telescoping_identity_check(const TabularMDP& mdp, const PredictionModel& model,
                                             const ValueIterationResult& vi, std::size_t horizon, double v0,
                                             const std::vector<Vector>& probe_states, double r, bool parallel) {
  const double g = mdp.gamma();
  const GridDpMpc mpc(theorem1_problem(mdp, model, vi, horizon, g * v0), mdp.states(), mdp.actions(), parallel);
  const ValueFn vstar = vi.value.as_function();
  const Grid& A = mdp.actions();
  std::vector<Vector> acts(A.size());
  for (std::size_t j = 0; j < A.size(); ++j) acts[j] = A.node(j);

  std::vector<double> res(probe_states.size(), 0.0);
  std::vector<double> adv(probe_states.size(), 0.0);
  std::vector<std::size_t> pairs(probe_states.size(), 0);
  parallel_for(probe_states.size(), parallel, [&](std::size_t k) {
    const Vector& s = probe_states[k];
    std::vector<double> qs(acts.size());
    for (std::size_t j = 0; j < acts.size(); ++j) qs[j] = bellman_q(mdp, vstar, s, acts[j]);
    std::size_t js = 0;
    const double best = argmin_of(qs, js);
    adv[k] = std::abs(best - vstar(s));
    for (std::size_t j = 0; j < acts.size(); ++j) {
      if ((acts[j] - acts[js]).norm() > r + 1e-12 || !std::isfinite(qs[j])) continue;
      const double qh = mpc.q(s, acts[j]).value();
      if (!std::isfinite(qh)) continue;
      res[k] = std::max(res[k], std::abs(qh - qs[j]));
      ++pairs[k];
    }
  });
  TelescopingResult out;
  out.residual = *std::max_element(res.begin(), res.end());
  out.min_advantage = *std::max_element(adv.begin(), adv.end());
  out.pairs = std::accumulate(pairs.begin(), pairs.end(), std::size_t{0});
  out.discount_sum = g * (1.0 - std::pow(g, static_cast<double>(horizon))) / (1.0 - g);
  return out;
}

}  // namespace pclab
