// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gridnerf/array.hpp"
#include "gridnerf/graph.hpp"
#include "gridnerf/parameters.hpp"

namespace gridnerf {

// Rows of x [N, C] -> [N, 2 * L * C]. For each component u (outer) and frequency
// l in [0, L) (inner) emits sin(2^l u), cos(2^l u).
template <typename T>
Array<T> positional_encoding(const Array<T>& x, std::size_t frequencies);

inline std::size_t encoded_width(std::size_t components, std::size_t frequencies) {
  return 2 * frequencies * components;
}

template <typename T>
struct Linear {
  Array<T> weight;  // [in, out]
  Array<T> bias;    // [out]

  static Linear uniform_init(std::size_t in, std::size_t out, std::uint64_t seed);
  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }
  typename Graph<T>::Var apply(Graph<T>& g, typename Graph<T>::Var x, bool trainable = true);
};

// Fully connected stack with ReLU between layers, and after the last layer only
// when `relu_output` is set.
template <typename T>
struct Mlp {
  std::vector<Linear<T>> layers;
  bool relu_output = false;

  static Mlp create(const std::vector<std::size_t>& widths, bool relu_output, std::uint64_t seed);
  std::size_t in_dim() const { return layers.front().in_dim(); }
  std::size_t out_dim() const { return layers.back().out_dim(); }
  typename Graph<T>::Var apply(Graph<T>& g, typename Graph<T>::Var x, bool trainable = true);
  void append_parameters(ParameterList<T>& out, const std::string& prefix);
};

template <typename T>
struct FieldOutput {
  typename Graph<T>::Var sigma;  // [N, 1], >= 0
  typename Graph<T>::Var rgb;    // [N, 3], in [0, 1]
};

struct GridHeadConfig {
  std::size_t width = 128;
  std::size_t hidden_layers = 2;
  std::size_t dir_freqs = 4;
};

// Grid-branch decoders: density from density features only, color from appearance
// features plus encoded view direction.
template <typename T>
struct GridHeads {
  Mlp<T> density;
  Mlp<T> color;
  std::size_t dir_freqs = 4;

  static GridHeads create(std::size_t density_features, std::size_t appearance_features, const GridHeadConfig& cfg,
                          std::uint64_t seed);
  FieldOutput<T> evaluate(Graph<T>& g, typename Graph<T>::Var density_features,
                          typename Graph<T>::Var appearance_features, typename Graph<T>::Var dir_encoding,
                          bool trainable = true);
  ParameterList<T> parameters();
};

struct NerfBranchConfig {
  std::size_t width = 256;
  std::size_t depth = 4;
  std::size_t pos_freqs = 16;
  std::size_t dir_freqs = 4;
};

// Positional-encoding MLP conditioned on grid features: a ReLU trunk over
// [density features, appearance features, PE(X)], a density layer on the trunk
// output, and a color layer on [trunk output, PE(d)].
template <typename T>
struct NerfBranch {
  Mlp<T> trunk;
  Linear<T> density;
  Linear<T> color;
  std::size_t pos_freqs = 16;
  std::size_t dir_freqs = 4;

  static NerfBranch create(std::size_t density_features, std::size_t appearance_features,
                           const NerfBranchConfig& cfg, std::uint64_t seed);
  FieldOutput<T> evaluate(Graph<T>& g, typename Graph<T>::Var density_features,
                          typename Graph<T>::Var appearance_features, typename Graph<T>::Var pos_encoding,
                          typename Graph<T>::Var dir_encoding, bool trainable = true);
  ParameterList<T> parameters();
};

}  // namespace gridnerf
