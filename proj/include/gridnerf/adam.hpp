// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "gridnerf/array.hpp"

namespace gridnerf {

template <typename T>
struct AdamState {
  Array<T> m;
  Array<T> v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState zeros_like(const Array<T>& param) {
    AdamState s;
    s.m = Array<T>(param.shape());
    s.v = Array<T>(param.shape());
    return s;
  }
};

// One bias-corrected Adam update of `param` in place; increments state.step.
template <typename T>
void adam_step(Array<T>& param, const Array<T>& grad, AdamState<T>& state, double lr);

}  // namespace gridnerf
