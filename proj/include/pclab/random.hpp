#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "pclab/core.hpp"

namespace pclab {

using Rng = std::mt19937_64;

/// Independent stream for replicate `index` of an experiment seeded with `seed`.
inline Rng make_stream(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

/// Uniform in [0, 1) from the top 53 bits; portable across standard libraries.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Point drawn uniformly from the Euclidean ball of radius r around `center`.
Vector uniform_in_ball(Rng& rng, const Vector& center, double r);

/// Gauss–Legendre nodes and weights on [-1, 1]. Supported counts: 15, 20, 30.
std::vector<std::pair<double, double>> gauss_legendre(int points);

/// Zero-location Gaussian N(0, sigma^2) truncated to [lo, hi] (absolute units).
/// sigma == 0 is the point mass at 0 (requires lo <= 0 <= hi).
class TruncatedNormal {
 public:
  TruncatedNormal() = default;
  TruncatedNormal(double sigma, double lo, double hi);
  /// Symmetric truncation at +-k sigma.
  static TruncatedNormal symmetric(double sigma, double k = 4.0) { return {sigma, -k * sigma, k * sigma}; }

  double sigma() const { return sigma_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }
  bool degenerate() const { return sigma_ == 0.0; }

  double mean() const { return mean_; }
  double variance() const { return variance_; }
  double pdf(double x) const;
  /// Inverse-CDF draw; always inside [lo, hi].
  double sample(Rng& rng) const;
  /// Density-weighted Gauss–Legendre rule on [lo, hi]; weights sum to 1.
  std::vector<std::pair<double, double>> quadrature(int points) const;

 private:
  double sigma_ = 0.0;
  double lo_ = 0.0;
  double hi_ = 0.0;
  double cdf_lo_ = 0.0;
  double cdf_hi_ = 1.0;
  double mean_ = 0.0;
  double variance_ = 0.0;
};

}  // namespace pclab
