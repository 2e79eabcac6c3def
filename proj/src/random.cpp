#include "pclab/random.hpp"

#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/gauss.hpp>

#include <algorithm>
#include <cmath>

namespace pclab {

namespace {

template <unsigned N>
std::vector<std::pair<double, double>> expand_gauss() {
  using Rule = boost::math::quadrature::gauss<double, N>;
  const auto& x = Rule::abscissa();
  const auto& w = Rule::weights();
  std::vector<std::pair<double, double>> out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] == 0.0) {
      out.emplace_back(0.0, w[i]);
    } else {
      out.emplace_back(-x[i], w[i]);
      out.emplace_back(x[i], w[i]);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }
double std_normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI); }

}  // namespace

Vector uniform_in_ball(Rng& rng, const Vector& center, double r) {
  const Eigen::Index d = center.size();
  if (r <= 0.0 || d == 0) return center;
  if (d == 1) {
    Vector out = center;
    out[0] += uniform(rng, -r, r);
    return out;
  }
  // Gaussian direction (Box–Muller on our own uniforms) and radius r * U^(1/d).
  Vector dir(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    const double u1 = std::max(uniform01(rng), 1e-300);
    const double u2 = uniform01(rng);
    dir[i] = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }
  const double n = dir.norm();
  if (n == 0.0) return center;
  const double rad = r * std::pow(uniform01(rng), 1.0 / static_cast<double>(d));
  return center + dir * (rad / n);
}

std::vector<std::pair<double, double>> gauss_legendre(int points) {
  switch (points) {
    case 15:
      return expand_gauss<15>();
    case 20:
      return expand_gauss<20>();
    case 30:
      return expand_gauss<30>();
    default:
      throw DomainError("Gauss-Legendre rule supports 15, 20 or 30 points, got " + std::to_string(points));
  }
}

TruncatedNormal::TruncatedNormal(double sigma, double lo, double hi) : sigma_(sigma), lo_(lo), hi_(hi) {
  if (sigma < 0.0) throw DomainError("noise sigma must be non-negative");
  if (sigma == 0.0) {
    if (lo > 0.0 || hi < 0.0) throw DomainError("point-mass noise needs 0 inside the box");
    lo_ = hi_ = 0.0;
    return;
  }
  if (!(hi > lo)) throw DomainError("truncation box must have hi > lo");
  const double a = lo / sigma;
  const double b = hi / sigma;
  cdf_lo_ = std_normal_cdf(a);
  cdf_hi_ = std_normal_cdf(b);
  const double z = cdf_hi_ - cdf_lo_;
  if (!(z > 0.0)) throw DomainError("truncation box carries no probability mass");
  const double pa = std_normal_pdf(a);
  const double pb = std_normal_pdf(b);
  const double m = (pa - pb) / z;
  mean_ = sigma * m;
  variance_ = sigma * sigma * (1.0 + (a * pa - b * pb) / z - m * m);
}

double TruncatedNormal::pdf(double x) const {
  if (degenerate() || x < lo_ || x > hi_) return 0.0;
  return std_normal_pdf(x / sigma_) / (sigma_ * (cdf_hi_ - cdf_lo_));
}

double TruncatedNormal::sample(Rng& rng) const {
  if (degenerate()) return 0.0;
  static const boost::math::normal_distribution<double> unit;
  double p = cdf_lo_ + (cdf_hi_ - cdf_lo_) * uniform01(rng);
  p = std::clamp(p, std::nextafter(0.0, 1.0), std::nextafter(1.0, 0.0));
  const double x = sigma_ * boost::math::quantile(unit, p);
  return std::clamp(x, lo_, hi_);
}

std::vector<std::pair<double, double>> TruncatedNormal::quadrature(int points) const {
  if (degenerate()) return {{0.0, 1.0}};
  const auto rule = gauss_legendre(points);
  const double half = 0.5 * (hi_ - lo_);
  const double mid = 0.5 * (hi_ + lo_);
  std::vector<std::pair<double, double>> out;
  out.reserve(rule.size());
  double total = 0.0;
  for (const auto& [t, w] : rule) {
    const double x = mid + half * t;
    const double wx = w * half * pdf(x);
    out.emplace_back(x, wx);
    total += wx;
  }
  for (auto& [x, w] : out) w /= total;
  return out;
}

}  // namespace pclab
