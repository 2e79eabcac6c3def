#pragma once

#include <cmath>
#include <vector>

#include "pclab/grid.hpp"
#include "pclab/mdp.hpp"

namespace pclab::test {

inline Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

inline Vector scalar(double x) { return Vector::Constant(1, x); }

inline Grid line(double lo, double hi, std::size_t points) { return Grid({Axis(lo, hi, points)}); }

struct ScalarLqr {
  double a = 0.9;
  double b = 1.0;
  double q = 1.0;
  double r = 0.1;
  double gamma = 0.9;
  double sigma = 0.1;
  double truncation = 4.0;
  double s_max = 2.0;
  std::size_t s_points = 201;
  double a_max = 3.0;
  std::size_t a_points = 121;
  // noise scales with s when set: s+ = a s + b u + s w
  bool multiplicative = false;
  bool clamp = true;

  StochasticLinearSystem system() const {
    StochasticLinearSystem sys;
    sys.A = Matrix::Constant(1, 1, a);
    sys.B = Matrix::Constant(1, 1, b);
    sys.C = Matrix::Identity(1, 1);
    sys.W = Matrix::Constant(1, 1, sigma * sigma);
    sys.Qc = Matrix::Constant(1, 1, q);
    sys.Rc = Matrix::Constant(1, 1, r);
    sys.truncation = truncation;
    return sys;
  }

  TabularMDP mdp() const {
    TabularMDP::Spec sp;
    sp.states = line(-s_max, s_max, s_points);
    sp.actions = line(-a_max, a_max, a_points);
    if (sigma > 0.0) sp.noise.push_back(TruncatedNormal::symmetric(sigma, truncation));
    const Box box = sp.states.box();
    sp.step = [*this, box](const Vector& s, const Vector& u, const Vector& w) {
      Vector next = a * s + b * u;
      if (w.size() > 0) next[0] += multiplicative ? s[0] * w[0] : w[0];
      return clamp ? box.clamp(next) : next;
    };
    sp.cost = [q = q, r = r](const Vector& s, const Vector& u) { return q * s.squaredNorm() + r * u.squaredNorm(); };
    sp.gamma = gamma;
    return TabularMDP(std::move(sp));
  }
};

}  // namespace pclab::test
