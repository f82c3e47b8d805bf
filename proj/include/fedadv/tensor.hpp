#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fedadv/errors.hpp"

namespace fedadv {

#ifdef FEDADV_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major array. Rank-2 tensors are used for batches ([rows, cols]).
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real{0})
      : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_volume(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + shape_string(shape_) + " holds " +
                           std::to_string(shape_volume(shape_)) + " values, got " +
                           std::to_string(data_.size()));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<Real> values) {
    return Tensor({rows, cols}, std::vector<Real>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<Real> values() noexcept { return data_; }
  std::span<const Real> values() const noexcept { return data_; }
  std::vector<Real>& storage() noexcept { return data_; }
  const std::vector<Real>& storage() const noexcept { return data_; }

  Real& operator[](std::size_t i) noexcept { return data_[i]; }
  Real operator[](std::size_t i) const noexcept { return data_[i]; }

  // Rank-2 helpers. Higher-rank tensors are viewed as [shape[0], rest].
  std::size_t rows() const noexcept { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const noexcept { return rows() == 0 ? 0 : data_.size() / rows(); }

  Real& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  Real operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  std::span<Real> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const Real> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols(), cols()};
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
  }

  void require_finite(const std::string& what) const {
    if (!all_finite()) throw NumericError(what + ": non-finite value");
  }

  // Copies the listed rows into a new [indices.size(), cols] tensor.
  Tensor gather_rows(std::span<const std::size_t> indices) const {
    const std::size_t c = cols();
    Shape out_shape = shape_;
    out_shape[0] = indices.size();
    Tensor out(std::move(out_shape));
    for (std::size_t i = 0; i < indices.size(); ++i) {
      std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(indices[i] * c), c,
                  out.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
    }
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

private:
  void check_extents() const {
    // Only the leading (batch) extent may be zero.
    for (std::size_t i = 1; i < shape_.size(); ++i) {
      if (shape_[i] == 0) throw DimensionError("tensor extents must be positive");
    }
  }

  Shape shape_;
  std::vector<Real> data_;
};

// Stacks rank-2 tensors with equal column counts.
inline Tensor concat_rows(std::span<const Tensor* const> parts) {
  if (parts.empty()) return Tensor{};
  Shape shape = parts.front()->shape();
  std::size_t total = 0;
  for (const Tensor* p : parts) {
    if (p->cols() != parts.front()->cols() && p->rows() != 0) {
      throw DimensionError("concat_rows: column mismatch");
    }
    total += p->rows();
  }
  shape[0] = total;
  std::vector<Real> data;
  data.reserve(shape_volume(shape));
  for (const Tensor* p : parts) data.insert(data.end(), p->storage().begin(), p->storage().end());
  return Tensor(std::move(shape), std::move(data));
}

inline Real clamp01(Real v) noexcept { return std::clamp(v, Real{0}, Real{1}); }

// sign(0) == 0.
inline Real sign(Real v) noexcept { return static_cast<Real>((v > 0) - (v < 0)); }

inline std::size_t argmax(std::span<const Real> v) noexcept {
  return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

inline Real norm_l2(std::span<const Real> v) noexcept {
  Real s = 0;
  for (Real x : v) s += x * x;
  return std::sqrt(s);
}

inline Real norm_linf(std::span<const Real> v) noexcept {
  Real m = 0;
  for (Real x : v) m = std::max(m, std::abs(x));
  return m;
}

} // namespace fedadv
