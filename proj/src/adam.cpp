// SPDX-License-Identifier: Apache-2.0
#include "gridnerf/adam.hpp"

#include <cmath>

#include "gridnerf/errors.hpp"

namespace gridnerf {

template <typename T>
void adam_step(Array<T>& param, const Array<T>& grad, AdamState<T>& state, double lr) {
  if (grad.shape() != param.shape() || state.m.shape() != param.shape() || state.v.shape() != param.shape()) {
    throw ShapeError("adam_step shape mismatch: param " + shape_string(param.shape()) + ", grad " +
                     shape_string(grad.shape()));
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(state.beta1);
  const T b2 = static_cast<T>(state.beta2);
  const T eps = static_cast<T>(state.epsilon);
  const T m_scale = static_cast<T>(1.0 / (1.0 - std::pow(state.beta1, t)));
  const T v_scale = static_cast<T>(1.0 / (1.0 - std::pow(state.beta2, t)));
  const T step = static_cast<T>(lr);
  auto p = param.data();
  auto g = grad.data();
  auto m = state.m.data();
  auto v = state.v.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = b1 * m[i] + (T{1} - b1) * g[i];
    v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
    const T m_hat = m[i] * m_scale;
    const T v_hat = v[i] * v_scale;
    p[i] -= step * m_hat / (std::sqrt(v_hat) + eps);
  }
}

template void adam_step<float>(Array<float>&, const Array<float>&, AdamState<float>&, double);
template void adam_step<double>(Array<double>&, const Array<double>&, AdamState<double>&, double);

}  // namespace gridnerf
