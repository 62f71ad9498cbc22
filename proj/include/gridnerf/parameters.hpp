// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "gridnerf/array.hpp"

namespace gridnerf {

// Optimizer learning-rate group of a parameter.
enum class ParamGroup { kPlanes, kMlp };

template <typename T>
struct NamedParameter {
  std::string name;
  Array<T>* value;
  ParamGroup group;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

}  // namespace gridnerf
