// SPDX-License-Identifier: Apache-2.0
#include "gridnerf/array.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <type_traits>
#include <cmath>
#include <functional>
#include <numeric>

#include "gridnerf/errors.hpp"

namespace gridnerf {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

template <typename T>
Array<T>::Array(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_size(shape_)) {
  if (fill != T{0}) std::fill(data_.begin(), data_.end(), fill);
}

template <typename T>
Array<T>::Array(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError("array of shape " + shape_string(shape_) + " cannot hold " +
                     std::to_string(data_.size()) + " values");
  }
}

template <typename T>
T Array<T>::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() on array of shape " + shape_string(shape_));
  }
  return data_[0];
}

template <typename T>
void Array<T>::reshape(Shape shape) {
  if (shape_size(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  shape_ = std::move(shape);
}

template <typename T>
Array<T> Array<T>::reshaped(Shape shape) const {
  Array out = *this;
  out.reshape(std::move(shape));
  return out;
}

template <typename T>
void Array<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool Array<T>::all_finite() const {
  // Exponent-bit test; reduces without branches so it vectorizes.
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exp_mask = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
  Bits bad = 0;
  for (const T v : data_) {
    const Bits b = std::bit_cast<Bits>(v);
    bad |= static_cast<Bits>((b & exp_mask) == exp_mask);
  }
  return bad == 0;
}

template class Array<float>;
template class Array<double>;

}  // namespace gridnerf
