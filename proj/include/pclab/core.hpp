#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace pclab {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Raised when an input lies outside the domain an operation is defined on.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised when an optimization or control problem has no feasible point.
class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by iterative solvers that hit their iteration cap. Carries the
/// last residual so callers can decide whether it is close enough.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : std::runtime_error(what + " (last residual " + std::to_string(residual) + ")"),
        residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Extended real used for costs. +inf encodes constraint violation and is
/// saturating: anything added to it stays +inf, and scaling by a
/// non-negative factor keeps it +inf (0 * inf is inf, not NaN).
class ExtReal {
 public:
  constexpr ExtReal() = default;
  constexpr ExtReal(double v) : v_(v) {}  // NOLINT(google-explicit-constructor)

  static constexpr ExtReal infinity() { return ExtReal(kInf); }

  constexpr bool finite() const { return v_ != kInf; }
  constexpr double value() const { return v_; }
  constexpr explicit operator double() const { return v_; }

  friend constexpr ExtReal operator+(ExtReal a, ExtReal b) {
    if (!a.finite() || !b.finite()) return infinity();
    return ExtReal(a.v_ + b.v_);
  }
  friend constexpr ExtReal operator*(double k, ExtReal a) {
    if (!a.finite()) return infinity();
    return ExtReal(k * a.v_);
  }
  friend constexpr ExtReal operator*(ExtReal a, double k) { return k * a; }
  ExtReal& operator+=(ExtReal o) { return *this = *this + o; }

  friend constexpr bool operator==(ExtReal a, ExtReal b) { return a.v_ == b.v_; }
  friend constexpr auto operator<=>(ExtReal a, ExtReal b) { return a.v_ <=> b.v_; }

 private:
  double v_ = 0.0;
};

/// Saturating addition on raw doubles, for inner loops that avoid the wrapper.
inline double sat_add(double a, double b) { return (a == kInf || b == kInf) ? kInf : a + b; }

/// Axis-aligned box [lo, hi] in R^n.
struct Box {
  Vector lo;
  Vector hi;

  Eigen::Index dim() const { return lo.size(); }
  bool contains(const Vector& x, double slack = 0.0) const {
    if (x.size() != lo.size()) return false;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (!(x[i] >= lo[i] - slack && x[i] <= hi[i] + slack)) return false;
    }
    return true;
  }
  Vector clamp(const Vector& x) const { return x.cwiseMax(lo).cwiseMin(hi); }
  Vector width() const { return hi - lo; }
};

}  // namespace pclab
