#include "pclab/grid.hpp"

#include <algorithm>
#include <cmath>

namespace pclab {

Axis::Axis(double min, double max, std::size_t points) {
  if (points < 2) throw DomainError("axis needs at least 2 points");
  if (!(max > min)) throw DomainError("axis max must exceed min");
  nodes_.resize(points);
  const double h = (max - min) / static_cast<double>(points - 1);
  for (std::size_t i = 0; i < points; ++i) nodes_[i] = min + h * static_cast<double>(i);
  nodes_.back() = max;
  uniform_ = true;
  spacing_ = h;
}

Axis::Axis(std::vector<double> nodes) : nodes_(std::move(nodes)) {
  if (nodes_.size() < 2) throw DomainError("axis needs at least 2 points");
  for (std::size_t i = 1; i < nodes_.size(); ++i) {
    if (!(nodes_[i] > nodes_[i - 1])) throw DomainError("axis nodes must be strictly increasing");
    spacing_ = std::max(spacing_, nodes_[i] - nodes_[i - 1]);
  }
}

void Axis::locate(double x, std::size_t& cell, double& frac) const {
  const std::size_t n = nodes_.size();
  if (x <= nodes_.front()) {
    cell = 0;
    frac = 0.0;
    return;
  }
  if (x >= nodes_.back()) {
    cell = n - 2;
    frac = 1.0;
    return;
  }
  if (uniform_) {
    const double t = (x - nodes_.front()) / spacing_;
    cell = std::min(static_cast<std::size_t>(t), n - 2);
  } else {
    auto it = std::upper_bound(nodes_.begin(), nodes_.end(), x);
    cell = static_cast<std::size_t>(it - nodes_.begin()) - 1;
  }
  frac = (x - nodes_[cell]) / (nodes_[cell + 1] - nodes_[cell]);
  frac = std::clamp(frac, 0.0, 1.0);
}

Grid::Grid(std::vector<Axis> axes) : axes_(std::move(axes)) {
  if (axes_.empty()) throw DomainError("grid needs at least one axis");
  strides_.assign(axes_.size(), 1);
  size_ = 1;
  for (std::size_t k = axes_.size(); k-- > 0;) {
    strides_[k] = size_;
    size_ *= axes_[k].size();
  }
}

Vector Grid::node(std::size_t flat) const {
  Vector x(static_cast<Eigen::Index>(dim()));
  for (std::size_t k = 0; k < dim(); ++k) {
    x[static_cast<Eigen::Index>(k)] = axes_[k][(flat / strides_[k]) % axes_[k].size()];
  }
  return x;
}

std::vector<std::size_t> Grid::unflatten(std::size_t flat) const {
  std::vector<std::size_t> m(dim());
  for (std::size_t k = 0; k < dim(); ++k) m[k] = (flat / strides_[k]) % axes_[k].size();
  return m;
}

std::size_t Grid::flatten(std::span<const std::size_t> multi) const {
  std::size_t flat = 0;
  for (std::size_t k = 0; k < dim(); ++k) flat += multi[k] * strides_[k];
  return flat;
}

Box Grid::box() const {
  Box b{Vector(static_cast<Eigen::Index>(dim())), Vector(static_cast<Eigen::Index>(dim()))};
  for (std::size_t k = 0; k < dim(); ++k) {
    b.lo[static_cast<Eigen::Index>(k)] = axes_[k].min();
    b.hi[static_cast<Eigen::Index>(k)] = axes_[k].max();
  }
  return b;
}

void Grid::stencil(const Vector& x, std::vector<Stencil>& out) const {
  const std::size_t d = dim();
  if (static_cast<std::size_t>(x.size()) != d) throw DomainError("point dimension does not match grid");
  std::size_t base = 0;
  // At most 3 dims are used in practice; keep this allocation-free.
  std::size_t cell[8];
  double frac[8];
  if (d > 8) throw DomainError("grid dimension above 8 not supported");
  for (std::size_t k = 0; k < d; ++k) {
    axes_[k].locate(x[static_cast<Eigen::Index>(k)], cell[k], frac[k]);
    base += cell[k] * strides_[k];
  }
  const std::size_t corners = std::size_t{1} << d;
  for (std::size_t c = 0; c < corners; ++c) {
    double w = 1.0;
    std::size_t idx = base;
    for (std::size_t k = 0; k < d; ++k) {
      if (c & (std::size_t{1} << k)) {
        w *= frac[k];
        idx += strides_[k];
      } else {
        w *= 1.0 - frac[k];
      }
    }
    if (w > 0.0) out.push_back({idx, w});
  }
}

std::vector<Stencil> Grid::stencil(const Vector& x) const {
  std::vector<Stencil> out;
  out.reserve(std::size_t{1} << dim());
  stencil(x, out);
  return out;
}

double Grid::interpolate(std::span<const double> values, const Vector& x) const {
  const std::size_t d = dim();
  if (d == 1) {
    std::size_t cell;
    double frac;
    axes_[0].locate(x[0], cell, frac);
    const double v0 = values[cell];
    const double v1 = values[cell + 1];
    if (frac == 0.0) return v0;
    if (frac == 1.0) return v1;
    if (v0 == kInf || v1 == kInf) return kInf;
    return (1.0 - frac) * v0 + frac * v1;
  }
  thread_local std::vector<Stencil> st;
  st.clear();
  stencil(x, st);
  double acc = 0.0;
  for (const auto& s : st) {
    const double v = values[s.index];
    if (v == kInf) return kInf;
    acc += s.weight * v;
  }
  return acc;
}

std::size_t Grid::cell_count() const {
  std::size_t n = 1;
  for (const auto& a : axes_) n *= a.size() - 1;
  return n;
}

std::size_t Grid::cell_of(const Vector& x) const {
  std::size_t flat = 0;
  for (std::size_t k = 0; k < dim(); ++k) {
    std::size_t cell;
    double frac;
    axes_[k].locate(x[static_cast<Eigen::Index>(k)], cell, frac);
    flat = flat * (axes_[k].size() - 1) + cell;
  }
  return flat;
}

Vector Grid::cell_center(std::size_t cell) const {
  Vector c(static_cast<Eigen::Index>(dim()));
  for (std::size_t k = dim(); k-- > 0;) {
    const std::size_t n = axes_[k].size() - 1;
    const std::size_t i = cell % n;
    cell /= n;
    c[static_cast<Eigen::Index>(k)] = 0.5 * (axes_[k][i] + axes_[k][i + 1]);
  }
  return c;
}

Grid Grid::rescaled(double scale) const {
  if (!(scale > 0.0)) throw DomainError("grid scale must be positive");
  std::vector<Axis> axes;
  for (const auto& a : axes_) {
    const auto cells = static_cast<double>(a.size() - 1);
    const auto n = static_cast<std::size_t>(std::max(1.0, std::round(cells * scale))) + 1;
    axes.emplace_back(a.min(), a.max(), n);
  }
  return Grid(std::move(axes));
}

}  // namespace pclab
