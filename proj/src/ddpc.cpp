#include "pclab/ddpc.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace pclab {

std::string to_string(Excitation e) { return e == Excitation::kPrbs ? "prbs" : "uniform"; }

Eigen::Index TrajectoryLibrary::column_height(std::size_t p, std::size_t l, std::size_t N, Eigen::Index q,
                                              Eigen::Index m) {
  return static_cast<Eigen::Index>(p + N + 1) * q + static_cast<Eigen::Index>(l + N) * m;
}

std::size_t TrajectoryLibrary::min_length(std::size_t p, std::size_t l, std::size_t N, Eigen::Index q,
                                          Eigen::Index m) {
  return p + l + 2 * N + 4 * static_cast<std::size_t>(column_height(p, l, N, q, m));
}

Eigen::Index TrajectoryLibrary::y_row(std::ptrdiff_t lag) const {
  return static_cast<Eigen::Index>(lag + static_cast<std::ptrdiff_t>(p)) * q;
}

Eigen::Index TrajectoryLibrary::u_row(std::ptrdiff_t lag) const {
  return static_cast<Eigen::Index>(p + N + 1) * q + static_cast<Eigen::Index>(lag + static_cast<std::ptrdiff_t>(l)) * m;
}

Matrix TrajectoryLibrary::past_rows() const {
  const auto ny = static_cast<Eigen::Index>(p + 1) * q;
  const auto nu = static_cast<Eigen::Index>(l) * m;
  Matrix out(ny + nu, count());
  out.topRows(ny) = columns.topRows(ny);
  if (nu > 0) out.bottomRows(nu) = columns.middleRows(u_row(-static_cast<std::ptrdiff_t>(l)), nu);
  return out;
}

Matrix TrajectoryLibrary::future_u_rows() const {
  return columns.middleRows(u_row(0), static_cast<Eigen::Index>(N) * m);
}

Matrix TrajectoryLibrary::future_y_rows() const {
  return columns.middleRows(y_row(1), static_cast<Eigen::Index>(N) * q);
}

void TrajectoryLibrary::write_csv(std::ostream& os) const {
  os << "# one line per library column; y<lag>_<i> / u<lag>_<i> = component i at lag relative to k; seed " << seed
     << ", excitation " << to_string(excitation) << '\n';
  bool first = true;
  auto sep = [&]() -> std::ostream& {
    if (!first) os << ',';
    first = false;
    return os;
  };
  for (std::ptrdiff_t t = -static_cast<std::ptrdiff_t>(p); t <= static_cast<std::ptrdiff_t>(N); ++t) {
    for (Eigen::Index i = 0; i < q; ++i) sep() << "y" << t << '_' << i;
  }
  for (std::ptrdiff_t t = -static_cast<std::ptrdiff_t>(l); t < static_cast<std::ptrdiff_t>(N); ++t) {
    for (Eigen::Index i = 0; i < m; ++i) sep() << "u" << t << '_' << i;
  }
  os << '\n';
  os.precision(17);
  for (Eigen::Index j = 0; j < count(); ++j) {
    for (Eigen::Index r = 0; r < columns.rows(); ++r) os << (r ? "," : "") << columns(r, j);
    os << '\n';
  }
}

namespace {

// Maximal-length 16-bit Fibonacci LFSR, taps 16 14 13 11.
class Lfsr16 {
 public:
  explicit Lfsr16(std::uint64_t seed) : state_(static_cast<std::uint16_t>(seed ^ (seed >> 16) ^ (seed >> 32))) {
    if (state_ == 0) state_ = 0xACE1u;
  }
  bool next() {
    const unsigned bit = ((state_ >> 0) ^ (state_ >> 2) ^ (state_ >> 3) ^ (state_ >> 5)) & 1u;
    state_ = static_cast<std::uint16_t>((state_ >> 1) | (bit << 15));
    return bit != 0;
  }

 private:
  std::uint16_t state_;
};

Vector stack(const std::vector<Vector>& parts, Eigen::Index block) {
  Vector out(static_cast<Eigen::Index>(parts.size()) * block);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].size() != block) throw DomainError("signal block has wrong size");
    out.segment(static_cast<Eigen::Index>(i) * block, block) = parts[i];
  }
  return out;
}

// Ridge or plain least squares X = argmin ||Y - X Z||^2 + lambda ||X||^2.
Matrix ridge_fit(const Matrix& Z, const Matrix& Y, double lambda, const char* what) {
  if (lambda < 0.0) throw DomainError("ridge weight must be non-negative");
  if (lambda == 0.0) {
    Eigen::ColPivHouseholderQR<Matrix> qr(Z.transpose());
    qr.setThreshold(1e-10);
    if (qr.rank() < Z.rows()) {
      throw DomainError(std::string(what) + ": regressor matrix has rank " + std::to_string(qr.rank()) + " < " +
                        std::to_string(Z.rows()) + "; use ridge > 0 or a richer library");
    }
    return qr.solve(Y.transpose()).transpose();
  }
  const Matrix G = Z * Z.transpose() + lambda * Matrix::Identity(Z.rows(), Z.rows());
  return G.ldlt().solve(Z * Y.transpose()).transpose();
}

struct Affine {
  Vector a;
  Matrix B;
};

struct Quadratic {
  Matrix H;
  Vector g;
  double c = 0.0;

  explicit Quadratic(Eigen::Index n) : H(Matrix::Zero(n, n)), g(Vector::Zero(n)) {}
  void add(const Affine& z, const Matrix& M, double w) {
    const Matrix MB = M * z.B;
    H += w * z.B.transpose() * MB;
    g += w * MB.transpose() * z.a;
    c += w * z.a.dot(M * z.a);
  }
  double eval(const Vector& v) const { return v.dot(H * v) + 2.0 * g.dot(v) + c; }
};

// Signals y_t (t = -p..N) and u_t (t = -l..N-1) as affine functions of the decision vector.
struct AffineTrajectory {
  std::size_t p = 0;
  std::size_t l = 0;
  std::vector<Affine> y;
  std::vector<Affine> u;

  const Affine& Y(std::ptrdiff_t t) const { return y[static_cast<std::size_t>(t + static_cast<std::ptrdiff_t>(p))]; }
  const Affine& U(std::ptrdiff_t t) const { return u[static_cast<std::size_t>(t + static_cast<std::ptrdiff_t>(l))]; }
};

Affine constant(const Vector& a, Eigen::Index nv) { return {a, Matrix::Zero(a.size(), nv)}; }

Quadratic control_cost(const AffineTrajectory& tr, const DdpcConfig& cfg, Eigen::Index nv) {
  const auto N = static_cast<std::ptrdiff_t>(cfg.horizon);
  Quadratic qd(nv);
  double w = 1.0;
  for (std::ptrdiff_t i = 0; i < N; ++i) {
    qd.add(tr.Y(i), cfg.Qy, w);
    qd.add(tr.U(i), cfg.Ru, w);
    w *= cfg.gamma;
  }
  if (cfg.terminal_P) {
    // x_N = [y_N, .., y_{N-p}, u_{N-1}, .., u_{N-l}]
    std::vector<const Affine*> parts;
    for (std::size_t j = 0; j <= tr.p; ++j) parts.push_back(&tr.Y(N - static_cast<std::ptrdiff_t>(j)));
    for (std::size_t j = 1; j <= tr.l; ++j) parts.push_back(&tr.U(N - static_cast<std::ptrdiff_t>(j)));
    Eigen::Index rows = 0;
    for (const auto* a : parts) rows += a->a.size();
    Affine x{Vector(rows), Matrix(rows, nv)};
    Eigen::Index r = 0;
    for (const auto* a : parts) {
      x.a.segment(r, a->a.size()) = a->a;
      x.B.middleRows(r, a->a.size()) = a->B;
      r += a->a.size();
    }
    if (cfg.terminal_P->rows() != rows) throw DomainError("terminal weight does not match the stacked IO state");
    qd.add(x, *cfg.terminal_P, w);
  }
  return qd;
}

void check_config(const DdpcConfig& cfg, Eigen::Index q, Eigen::Index m, std::size_t N) {
  if (cfg.horizon != N) throw DomainError("DDPC horizon differs from the predictor horizon");
  if (cfg.Qy.rows() != q || cfg.Qy.cols() != q) throw DomainError("output weight must be q x q");
  if (cfg.Ru.rows() != m || cfg.Ru.cols() != m) throw DomainError("input weight must be m x m");
  if (!(cfg.gamma > 0.0 && cfg.gamma <= 1.0)) throw DomainError("discount must lie in (0, 1]");
}

double largest_eigenvalue(const Matrix& M) {
  Vector v = Vector::Ones(M.rows()).normalized();
  double lam = 0.0;
  for (int it = 0; it < 500; ++it) {
    Vector w = M * v;
    const double nw = w.norm();
    if (nw == 0.0) return 0.0;
    const double next = v.dot(w);
    v = w / nw;
    if (std::abs(next - lam) <= 1e-10 * std::abs(next)) {
      lam = next;
      break;
    }
    lam = next;
  }
  return lam;
}

// Accelerated projected gradient for v'Hv + 2g'v over lo <= v <= hi.
Vector box_qp(const Quadratic& qd, const Vector& lo, const Vector& hi, double tol, std::size_t max_iters,
              std::size_t& iters) {
  const double L = 2.0 * qd.H.selfadjointView<Eigen::Upper>().eigenvalues().maxCoeff();
  auto proj = [&](const Vector& v) { return v.cwiseMax(lo).cwiseMin(hi); };
  Vector x = proj(Vector::Zero(qd.g.size()));
  if (L <= 0.0) {
    iters = 0;
    return x;
  }
  Vector yv = x;
  double t = 1.0;
  double fx = qd.eval(x);
  for (iters = 1; iters <= max_iters; ++iters) {
    const Vector grad = 2.0 * (qd.H * yv + qd.g);
    const Vector next = proj(yv - grad / L);
    const double fn = qd.eval(next);
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    if (fn > fx) {
      // restart momentum
      yv = x;
      t = 1.0;
      continue;
    }
    yv = next + ((t - 1.0) / t_next) * (next - x);
    x = next;
    fx = fn;
    t = t_next;
    const Vector gx = 2.0 * (qd.H * x + qd.g);
    const double stat = (x - proj(x - gx)).lpNorm<Eigen::Infinity>();
    if (stat <= tol) return x;
  }
  const Vector gx = 2.0 * (qd.H * x + qd.g);
  throw ConvergenceError("projected gradient hit the iteration cap", (x - proj(x - gx)).lpNorm<Eigen::Infinity>());
}

Vector soft_threshold(const Vector& v, double k) {
  return v.unaryExpr([k](double x) { return x > k ? x - k : (x < -k ? x + k : 0.0); });
}

}  // namespace

TrajectoryLibrary collect_library(const StochasticLinearSystem& sys, const LibraryOptions& opts, std::size_t length,
                                  std::size_t p, std::size_t l, std::size_t N, std::uint64_t seed) {
  sys.validate();
  if (N == 0) throw DomainError("library horizon must be at least 1");
  const Eigen::Index q = sys.q();
  const Eigen::Index m = sys.m();
  const std::size_t need = TrajectoryLibrary::min_length(p, l, N, q, m);
  if (length < need) {
    throw DomainError("library run too short: need at least " + std::to_string(need) + " samples, got " +
                      std::to_string(length));
  }
  if (opts.input_box.dim() != m) throw DomainError("input box must have one entry per input");

  TrajectoryLibrary lib;
  lib.p = p;
  lib.l = l;
  lib.N = N;
  lib.q = q;
  lib.m = m;
  lib.seed = seed;
  lib.excitation = opts.excitation;

  Rng excite = make_stream(seed, 0);
  Rng noise = make_stream(seed, 1);
  Lfsr16 lfsr(seed);
  const Matrix Lw = sys.noise_factor();
  const bool process_noise = Lw.cwiseAbs().maxCoeff() > 0.0;
  const TruncatedNormal z = TruncatedNormal::symmetric(1.0, sys.truncation);
  const TruncatedNormal v = TruncatedNormal::symmetric(sys.measurement_sigma, sys.truncation);

  Vector x = opts.x0 ? *opts.x0 : Vector::Zero(sys.n());
  if (x.size() != sys.n()) throw DomainError("initial state has wrong size");
  for (std::size_t t = 0; t < length; ++t) {
    Vector u(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      if (opts.excitation == Excitation::kPrbs) {
        u[i] = lfsr.next() ? opts.input_box.hi[i] : opts.input_box.lo[i];
      } else {
        u[i] = uniform(excite, opts.input_box.lo[i], opts.input_box.hi[i]);
      }
    }
    Vector y = sys.C * x;
    if (sys.measurement_sigma > 0.0) {
      for (Eigen::Index i = 0; i < q; ++i) y[i] += v.sample(noise);
    }
    lib.y.push_back(y);
    lib.u.push_back(u);
    Vector w = Vector::Zero(sys.n());
    if (process_noise) {
      Vector zz(Lw.cols());
      for (Eigen::Index i = 0; i < zz.size(); ++i) zz[i] = z.sample(noise);
      w = Lw * zz;
    }
    x = sys.A * x + sys.B * u + w;
  }

  const std::size_t j0 = std::max(p, l);
  const std::size_t count = length - N - j0;
  lib.columns.resize(lib.height(), static_cast<Eigen::Index>(count));
  for (std::size_t c = 0; c < count; ++c) {
    const std::size_t j = j0 + c;
    Eigen::Index r = 0;
    for (std::size_t t = j - p; t <= j + N; ++t, r += q) lib.columns.col(static_cast<Eigen::Index>(c)).segment(r, q) = lib.y[t];
    for (std::size_t t = j - l; t < j + N; ++t, r += m) lib.columns.col(static_cast<Eigen::Index>(c)).segment(r, m) = lib.u[t];
  }
  return lib;
}

Vector IoWindow::stacked() const {
  const Eigen::Index q = y.empty() ? 0 : y.front().size();
  const Eigen::Index m = u.empty() ? 0 : u.front().size();
  Vector out(static_cast<Eigen::Index>(y.size()) * q + static_cast<Eigen::Index>(u.size()) * m);
  if (!y.empty()) out.head(static_cast<Eigen::Index>(y.size()) * q) = stack(y, q);
  if (!u.empty()) out.tail(static_cast<Eigen::Index>(u.size()) * m) = stack(u, m);
  return out;
}

IoWindow IoWindow::from_state(const IoStateLayout& layout, const Vector& x) {
  if (x.size() != layout.dim()) throw DomainError("IO state has wrong size");
  IoWindow w;
  for (std::size_t j = layout.p + 1; j-- > 0;) w.y.push_back(x.segment(static_cast<Eigen::Index>(j) * layout.q, layout.q));
  const auto base = static_cast<Eigen::Index>(layout.p + 1) * layout.q;
  for (std::size_t j = layout.l; j-- > 0;) w.u.push_back(x.segment(base + static_cast<Eigen::Index>(j) * layout.m, layout.m));
  return w;
}

// ---- implicit predictor ----------------------------------------------------

ImplicitPredictor::ImplicitPredictor(const TrajectoryLibrary& lib, double consistency_tol)
    : N_(lib.N), q_(lib.q), tol_(consistency_tol) {
  const Matrix past = lib.past_rows();
  const Matrix fu = lib.future_u_rows();
  known_.resize(past.rows() + fu.rows(), lib.count());
  known_ << past, fu;
  unknown_ = lib.future_y_rows();
  cod_.setThreshold(1e-10);
  cod_.compute(known_);
  row_projector_ = cod_.pseudoInverse() * known_;
}

ImplicitPrediction ImplicitPredictor::predict(const IoWindow& recent, const std::vector<Vector>& future_u) const {
  if (future_u.size() != N_) throw DomainError("future input plan must have N entries");
  const Vector past = recent.stacked();
  const Eigen::Index m = future_u.front().size();
  Vector b(past.size() + static_cast<Eigen::Index>(N_) * m);
  b << past, stack(future_u, m);
  if (b.size() != known_.rows()) throw DomainError("query window does not match the library layout");
  ImplicitPrediction out;
  out.alpha = cod_.solve(b);
  out.residual = (known_ * out.alpha - b).norm() / (1.0 + b.norm());
  if (out.residual > tol_) throw DomainError("query outside behavior span");
  out.kkt_residual = (out.alpha - row_projector_ * out.alpha).norm() / (1.0 + out.alpha.norm());
  out.y = unknown_ * out.alpha;
  return out;
}

// ---- explicit predictor ----------------------------------------------------

Vector ExplicitPredictor::regressor(const IoWindow& recent, const std::vector<Vector>& future_u) const {
  if (recent.y.size() != p + 1 || recent.u.size() != l) throw DomainError("window must hold p + 1 outputs and l inputs");
  if (future_u.size() != N) throw DomainError("future input plan must have N entries");
  Vector z(regressor_dim());
  z << recent.stacked(), stack(future_u, m);
  return z;
}

Vector ExplicitPredictor::predict(const IoWindow& recent, const std::vector<Vector>& future_u) const {
  return psi * regressor(recent, future_u);
}

void ExplicitPredictor::write_csv(std::ostream& os) const {
  os << "# Psi: row = predicted output component (step, index); columns = regressor entries by signal and lag\n";
  os << "row";
  for (std::ptrdiff_t t = -static_cast<std::ptrdiff_t>(p); t <= 0; ++t) {
    for (Eigen::Index i = 0; i < q; ++i) os << ",y" << t << '_' << i;
  }
  for (std::ptrdiff_t t = -static_cast<std::ptrdiff_t>(l); t < static_cast<std::ptrdiff_t>(N); ++t) {
    for (Eigen::Index i = 0; i < m; ++i) os << ",u" << t << '_' << i;
  }
  os << '\n';
  os.precision(17);
  for (Eigen::Index r = 0; r < psi.rows(); ++r) {
    os << 'y' << (r / q + 1) << '_' << (r % q);
    for (Eigen::Index c = 0; c < psi.cols(); ++c) os << ',' << psi(r, c);
    os << '\n';
  }
}

ExplicitPredictor fit_explicit_predictor(const TrajectoryLibrary& lib, double lambda) {
  ExplicitPredictor pred;
  pred.p = lib.p;
  pred.l = lib.l;
  pred.N = lib.N;
  pred.q = lib.q;
  pred.m = lib.m;
  const Matrix past = lib.past_rows();
  const Matrix fu = lib.future_u_rows();
  Matrix Z(past.rows() + fu.rows(), lib.count());
  Z << past, fu;
  const Matrix Y = lib.future_y_rows();
  pred.psi = ridge_fit(Z, Y, lambda, "explicit predictor");
  const Matrix R = Y - pred.psi * Z;
  pred.residual_rms = R.size() ? std::sqrt(R.squaredNorm() / static_cast<double>(R.size())) : 0.0;
  return pred;
}

ExplicitPredictor iterate_one_step(const Matrix& G, std::size_t p, std::size_t l, std::size_t N, Eigen::Index q,
                                   Eigen::Index m) {
  ExplicitPredictor pred;
  pred.p = p;
  pred.l = l;
  pred.N = N;
  pred.q = q;
  pred.m = m;
  const Eigen::Index r = pred.regressor_dim();
  const Eigen::Index ny = static_cast<Eigen::Index>(p + 1) * q;
  if (G.rows() != q || G.cols() != ny + static_cast<Eigen::Index>(l + 1) * m) {
    throw DomainError("one-step block must be q x ((p + 1) q + (l + 1) m)");
  }
  // Ys[t + p] and Us[t + l]: rows of y_t / u_t as linear functions of the regressor.
  std::vector<Matrix> Ys(p + N + 1, Matrix::Zero(q, r));
  std::vector<Matrix> Us(l + N, Matrix::Zero(m, r));
  for (std::size_t t = 0; t <= p; ++t) Ys[t].middleCols(static_cast<Eigen::Index>(t) * q, q).setIdentity();
  for (std::size_t t = 0; t < l + N; ++t) Us[t].middleCols(ny + static_cast<Eigen::Index>(t) * m, m).setIdentity();
  pred.psi.resize(static_cast<Eigen::Index>(N) * q, r);
  for (std::size_t i = 1; i <= N; ++i) {
    Matrix y = Matrix::Zero(q, r);
    // window y_{i-1-p} .. y_{i-1}, u_{i-1-l} .. u_{i-1}
    for (std::size_t k = 0; k <= p; ++k) y += G.middleCols(static_cast<Eigen::Index>(k) * q, q) * Ys[i - 1 + k];
    for (std::size_t k = 0; k <= l; ++k) y += G.middleCols(ny + static_cast<Eigen::Index>(k) * m, m) * Us[i - 1 + k];
    Ys[p + i] = y;
    pred.psi.middleRows(static_cast<Eigen::Index>(i - 1) * q, q) = y;
  }
  return pred;
}

Matrix one_step_block(const ExplicitPredictor& pred) {
  return pred.psi.topLeftCorner(pred.q, pred.past_dim() + pred.m);
}

ExplicitPredictor structured_refit(const TrajectoryLibrary& lib, double lambda) {
  const std::size_t p = lib.p;
  const std::size_t l = lib.l;
  const Eigen::Index q = lib.q;
  const Eigen::Index m = lib.m;
  const Eigen::Index dim = static_cast<Eigen::Index>(p + 1) * q + static_cast<Eigen::Index>(l + 1) * m;
  Matrix Z;
  Matrix Y;
  if (!lib.y.empty()) {
    // Every one-step window of the recorded run, once.
    const std::size_t t0 = std::max(p, l);
    const std::size_t n = lib.y.size() - 1 - t0;
    Z.resize(dim, static_cast<Eigen::Index>(n));
    Y.resize(q, static_cast<Eigen::Index>(n));
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t t = t0 + c;
      Eigen::Index r = 0;
      for (std::size_t s = t - p; s <= t; ++s, r += q) Z.col(static_cast<Eigen::Index>(c)).segment(r, q) = lib.y[s];
      for (std::size_t s = t - l; s <= t; ++s, r += m) Z.col(static_cast<Eigen::Index>(c)).segment(r, m) = lib.u[s];
      Y.col(static_cast<Eigen::Index>(c)) = lib.y[t + 1];
    }
  } else {
    // Columns only: pool the N shifted windows of each column.
    const Eigen::Index n = lib.count() * static_cast<Eigen::Index>(lib.N);
    Z.resize(dim, n);
    Y.resize(q, n);
    Eigen::Index c = 0;
    for (Eigen::Index j = 0; j < lib.count(); ++j) {
      for (std::size_t i = 1; i <= lib.N; ++i, ++c) {
        Eigen::Index r = 0;
        const auto ii = static_cast<std::ptrdiff_t>(i);
        for (std::ptrdiff_t s = ii - 1 - static_cast<std::ptrdiff_t>(p); s <= ii - 1; ++s, r += q) {
          Z.col(c).segment(r, q) = lib.columns.col(j).segment(lib.y_row(s), q);
        }
        for (std::ptrdiff_t s = ii - 1 - static_cast<std::ptrdiff_t>(l); s <= ii - 1; ++s, r += m) {
          Z.col(c).segment(r, m) = lib.columns.col(j).segment(lib.u_row(s), m);
        }
        Y.col(c) = lib.columns.col(j).segment(lib.y_row(ii), q);
      }
    }
  }
  const Matrix G = ridge_fit(Z, Y, lambda, "one-step predictor");
  ExplicitPredictor pred = iterate_one_step(G, p, l, lib.N, q, m);
  const Matrix past = lib.past_rows();
  const Matrix fu = lib.future_u_rows();
  Matrix Zf(past.rows() + fu.rows(), lib.count());
  Zf << past, fu;
  const Matrix R = lib.future_y_rows() - pred.psi * Zf;
  pred.residual_rms = R.size() ? std::sqrt(R.squaredNorm() / static_cast<double>(R.size())) : 0.0;
  return pred;
}

LinearModel induced_io_model(const Matrix& G, const IoStateLayout& layout) {
  const Eigen::Index q = layout.q;
  const Eigen::Index m = layout.m;
  const std::size_t p = layout.p;
  const std::size_t l = layout.l;
  const Eigen::Index n = layout.dim();
  const Eigen::Index ny = static_cast<Eigen::Index>(p + 1) * q;
  if (G.rows() != q || G.cols() != ny + static_cast<Eigen::Index>(l + 1) * m) {
    throw DomainError("one-step block does not match the IO layout");
  }
  LinearModel lm{Matrix::Zero(n, n), Matrix::Zero(n, m), Vector::Zero(n)};
  for (std::size_t r = 0; r <= p; ++r) {
    lm.A.block(0, static_cast<Eigen::Index>(p - r) * q, q, q) += G.middleCols(static_cast<Eigen::Index>(r) * q, q);
  }
  for (std::size_t r = 0; r < l; ++r) {
    lm.A.block(0, ny + static_cast<Eigen::Index>(l - r - 1) * m, q, m) += G.middleCols(ny + static_cast<Eigen::Index>(r) * m, m);
  }
  lm.B.topRows(q) = G.rightCols(m);
  for (std::size_t j = 0; j < p; ++j) {
    lm.A.block(static_cast<Eigen::Index>(j + 1) * q, static_cast<Eigen::Index>(j) * q, q, q).setIdentity();
  }
  if (l > 0) {
    lm.B.middleRows(ny, m).setIdentity();
    for (std::size_t j = 1; j < l; ++j) {
      lm.A.block(ny + static_cast<Eigen::Index>(j) * m, ny + static_cast<Eigen::Index>(j - 1) * m, m, m).setIdentity();
    }
  }
  return lm;
}

SelfConsistencyReport self_consistency_check(const ExplicitPredictor& pred, double tol) {
  SelfConsistencyReport rep;
  rep.tolerance = tol;
  rep.one_step = one_step_block(pred);
  rep.iterated_psi = iterate_one_step(rep.one_step, pred.p, pred.l, pred.N, pred.q, pred.m).psi;
  rep.deviation = (pred.psi - rep.iterated_psi).cwiseAbs().maxCoeff();
  rep.pass = rep.deviation <= tol;
  return rep;
}

// ---- control ----------------------------------------------------------------

DdpcPlan ddpc_control(const ExplicitPredictor& pred, const IoWindow& recent, const DdpcConfig& cfg,
                      std::optional<Vector> first) {
  check_config(cfg, pred.q, pred.m, pred.N);
  const Eigen::Index m = pred.m;
  const auto N = static_cast<Eigen::Index>(pred.N);
  if (first && first->size() != m) throw DomainError("pinned input has wrong size");
  const Eigen::Index nv = (N - (first ? 1 : 0)) * m;

  // U = U0 + S v
  Vector U0 = Vector::Zero(N * m);
  Matrix S = Matrix::Zero(N * m, nv);
  if (first) U0.head(m) = *first;
  S.bottomRows(nv).setIdentity();

  std::vector<Vector> zero_u(pred.N, Vector::Zero(m));
  const Vector zp = pred.regressor(recent, zero_u).head(pred.past_dim());
  const Matrix Psi_p = pred.psi.leftCols(pred.past_dim());
  const Matrix Psi_u = pred.psi.rightCols(N * m);

  AffineTrajectory tr;
  tr.p = pred.p;
  tr.l = pred.l;
  for (const auto& y : recent.y) tr.y.push_back(constant(y, nv));
  const Vector yf0 = Psi_p * zp + Psi_u * U0;
  const Matrix yfB = Psi_u * S;
  for (Eigen::Index i = 0; i < N; ++i) {
    tr.y.push_back({yf0.segment(i * pred.q, pred.q), yfB.middleRows(i * pred.q, pred.q)});
  }
  for (const auto& u : recent.u) tr.u.push_back(constant(u, nv));
  for (Eigen::Index i = 0; i < N; ++i) tr.u.push_back({U0.segment(i * m, m), S.middleRows(i * m, m)});

  const Quadratic qd = control_cost(tr, cfg, nv);
  DdpcPlan plan;
  Vector v;
  if (nv == 0) {
    v = Vector::Zero(0);
  } else if (cfg.input_box) {
    const Box& box = *cfg.input_box;
    Vector lo(nv);
    Vector hi(nv);
    for (Eigen::Index i = 0; i < nv / m; ++i) {
      lo.segment(i * m, m) = box.lo;
      hi.segment(i * m, m) = box.hi;
    }
    v = box_qp(qd, lo, hi, cfg.tol, cfg.max_iters, plan.iterations);
  } else {
    const Eigen::LDLT<Matrix> ldlt(qd.H);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || (ldlt.vectorD().array() <= 0.0).any()) {
      throw DomainError("DDPC cost is not strictly convex in the inputs");
    }
    v = ldlt.solve(-qd.g);
  }
  plan.value = qd.eval(v);
  const Vector U = U0 + S * v;
  const Vector Y = Psi_p * zp + Psi_u * U;
  for (Eigen::Index i = 0; i < N; ++i) {
    plan.inputs.push_back(U.segment(i * m, m));
    plan.outputs.push_back(Y.segment(i * pred.q, pred.q));
  }
  return plan;
}

DdpcPlan ddpc_control(const TrajectoryLibrary& lib, const IoWindow& recent, const DdpcConfig& cfg,
                      std::optional<Vector> first) {
  check_config(cfg, lib.q, lib.m, lib.N);
  if (cfg.regularizer == Regularizer::kNone) throw DomainError("embedded DDPC needs a ridge or lasso regularizer");
  if (cfg.input_box) throw DomainError("embedded DDPC does not support input boxes; use the explicit predictor");
  if (!(cfg.lambda > 0.0)) throw DomainError("embedded DDPC needs a positive regularization weight");
  const Eigen::Index M = lib.count();
  const Eigen::Index m = lib.m;
  const Eigen::Index q = lib.q;
  const auto N = static_cast<std::ptrdiff_t>(lib.N);
  if (recent.y.size() != lib.p + 1 || recent.u.size() != lib.l) throw DomainError("window must hold p + 1 outputs and l inputs");

  // Equality constraints E alpha = e: past window, plus the pinned first input.
  const Matrix past = lib.past_rows();
  const Eigen::Index ne = past.rows() + (first ? m : 0);
  Matrix E(ne, M);
  Vector e(ne);
  E.topRows(past.rows()) = past;
  e.head(past.rows()) = recent.stacked();
  if (first) {
    E.bottomRows(m) = lib.columns.middleRows(lib.u_row(0), m);
    e.tail(m) = *first;
  }

  AffineTrajectory tr;
  tr.p = lib.p;
  tr.l = lib.l;
  for (const auto& y : recent.y) tr.y.push_back(constant(y, M));
  for (std::ptrdiff_t i = 1; i <= N; ++i) tr.y.push_back({Vector::Zero(q), lib.columns.middleRows(lib.y_row(i), q)});
  for (const auto& u : recent.u) tr.u.push_back(constant(u, M));
  for (std::ptrdiff_t i = 0; i < N; ++i) tr.u.push_back({Vector::Zero(m), lib.columns.middleRows(lib.u_row(i), m)});
  Quadratic qd = control_cost(tr, cfg, M);

  DdpcPlan plan;
  if (cfg.regularizer == Regularizer::kRidge) {
    qd.H += cfg.lambda * Matrix::Identity(M, M);
    // alpha = alpha0 + Z beta over the solution set of E alpha = e.
    Eigen::JacobiSVD<Matrix> svd(E, Eigen::ComputeThinU | Eigen::ComputeFullV);
    svd.setThreshold(1e-10);
    const Vector alpha0 = svd.solve(e);
    const double res = (E * alpha0 - e).norm() / (1.0 + e.norm());
    if (res > 1e-8) throw DomainError("query outside behavior span");
    const Eigen::Index rank = svd.rank();
    const Matrix Z = svd.matrixV().rightCols(M - rank);
    const Matrix Hb = Z.transpose() * qd.H * Z;
    const Vector gb = Z.transpose() * (qd.H * alpha0 + qd.g);
    const Vector beta = Hb.ldlt().solve(-gb);
    plan.alpha = alpha0 + Z * beta;
    plan.value = qd.eval(plan.alpha);
  } else {
    // Lasso: soft past-window penalty, FISTA with restart.
    const Matrix Hs = qd.H + cfg.rho * E.transpose() * E;
    const Vector gs = qd.g - cfg.rho * E.transpose() * e;
    const double L = 2.0 * largest_eigenvalue(Hs) * 1.01;
    if (!(L > 0.0)) throw DomainError("lasso DDPC: degenerate objective");
    auto obj = [&](const Vector& a) { return a.dot(Hs * a) + 2.0 * gs.dot(a) + cfg.lambda * a.lpNorm<1>(); };
    Vector x = Vector::Zero(M);
    Vector yv = x;
    double t = 1.0;
    double fx = obj(x);
    double stat = kInf;
    bool done = false;
    for (plan.iterations = 1; plan.iterations <= cfg.max_iters; ++plan.iterations) {
      const Vector next = soft_threshold(yv - 2.0 * (Hs * yv + gs) / L, cfg.lambda / L);
      const double fn = obj(next);
      stat = L * (next - yv).lpNorm<Eigen::Infinity>();
      // plain steps (t == 1) always descend up to round-off; restart only after momentum
      if (fn > fx && t > 1.0) {
        yv = x;
        t = 1.0;
        continue;
      }
      const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      yv = next + ((t - 1.0) / t_next) * (next - x);
      x = next;
      fx = fn;
      t = t_next;
      if (stat <= cfg.tol) {
        done = true;
        break;
      }
    }
    if (!done) throw ConvergenceError("lasso DDPC hit the iteration cap", stat);
    plan.alpha = x;
    plan.value = qd.eval(x) + cfg.lambda * x.lpNorm<1>();
  }
  for (std::ptrdiff_t i = 0; i < N; ++i) {
    plan.inputs.push_back(lib.columns.middleRows(lib.u_row(i), m) * plan.alpha);
    plan.outputs.push_back(lib.columns.middleRows(lib.y_row(i + 1), q) * plan.alpha);
  }
  return plan;
}

ExtReal q_pc(const ExplicitPredictor& pred, const DdpcConfig& cfg, const IoStateLayout& layout, const Vector& s,
             const Vector& a) {
  if (layout.p != pred.p || layout.l != pred.l || layout.q != pred.q || layout.m != pred.m) {
    throw DomainError("IO layout does not match the predictor");
  }
  if (cfg.input_box && !cfg.input_box->contains(a)) return ExtReal::infinity();
  return ddpc_control(pred, IoWindow::from_state(layout, s), cfg, a).value;
}

}  // namespace pclab
