#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pclab/core.hpp"

namespace pclab {

/// One coordinate axis of a tensor grid. Nodes are strictly increasing.
class Axis {
 public:
  Axis(double min, double max, std::size_t points);
  explicit Axis(std::vector<double> nodes);

  std::size_t size() const { return nodes_.size(); }
  double min() const { return nodes_.front(); }
  double max() const { return nodes_.back(); }
  double operator[](std::size_t i) const { return nodes_[i]; }
  const std::vector<double>& nodes() const { return nodes_; }
  bool uniform() const { return uniform_; }
  /// Largest gap between consecutive nodes.
  double spacing() const { return spacing_; }

  /// Index i of the cell [x_i, x_{i+1}] holding x (clamped) and the weight of x_{i+1}.
  void locate(double x, std::size_t& cell, double& frac) const;

 private:
  std::vector<double> nodes_;
  bool uniform_ = false;
  double spacing_ = 0.0;
};

/// Sparse interpolation weight on a flat node index.
struct Stencil {
  std::size_t index;
  double weight;
};

/// Tensor-product grid, row-major flat indexing (last axis fastest).
class Grid {
 public:
  Grid() = default;
  explicit Grid(std::vector<Axis> axes);

  std::size_t dim() const { return axes_.size(); }
  std::size_t size() const { return size_; }
  const Axis& axis(std::size_t k) const { return axes_[k]; }
  const std::vector<Axis>& axes() const { return axes_; }

  Vector node(std::size_t flat) const;
  std::vector<std::size_t> unflatten(std::size_t flat) const;
  std::size_t flatten(std::span<const std::size_t> multi) const;
  std::size_t stride(std::size_t k) const { return strides_[k]; }
  Box box() const;

  /// Appends multilinear weights of x (clamped to the box) to `out`.
  /// Corners with zero weight are skipped, so an exact node yields one entry.
  void stencil(const Vector& x, std::vector<Stencil>& out) const;
  std::vector<Stencil> stencil(const Vector& x) const;

  /// Multilinear interpolation with clamped extrapolation. A +inf node value
  /// with positive weight makes the result +inf.
  double interpolate(std::span<const double> values, const Vector& x) const;

  /// Number of histogram cells (points - 1 per axis, at least 1).
  std::size_t cell_count() const;
  /// Flat cell index of x (clamped to the box).
  std::size_t cell_of(const Vector& x) const;
  /// Center of flat cell index.
  Vector cell_center(std::size_t cell) const;

  /// Same axes with (points - 1) * scale + 1 nodes each, endpoints preserved.
  Grid rescaled(double scale) const;

 private:
  std::vector<Axis> axes_;
  std::vector<std::size_t> strides_;
  std::size_t size_ = 0;
};

}  // namespace pclab
