// SPDX-License-Identifier: Apache-2.0
#include "gridnerf/field_heads.hpp"

#include <cmath>
#include <random>

#include "gridnerf/errors.hpp"

namespace gridnerf {

template <typename T>
Array<T> positional_encoding(const Array<T>& x, std::size_t frequencies) {
  if (x.rank() != 2) throw ShapeError("positional_encoding expects [N, C], got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0);
  const std::size_t c = x.dim(1);
  Array<T> out(Shape{n, encoded_width(c, frequencies)});
  std::size_t o = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double u = static_cast<double>(x.at(i, j));
      double freq = 1.0;
      for (std::size_t l = 0; l < frequencies; ++l, freq *= 2.0) {
        out[o++] = static_cast<T>(std::sin(freq * u));
        out[o++] = static_cast<T>(std::cos(freq * u));
      }
    }
  }
  return out;
}

template <typename T>
Linear<T> Linear<T>::uniform_init(std::size_t in, std::size_t out, std::uint64_t seed) {
  if (in == 0 || out == 0) throw ConfigError("linear layer dimensions must be positive");
  Linear layer{Array<T>(Shape{in, out}), Array<T>(Shape{out})};
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (T& w : layer.weight.data()) w = static_cast<T>(dist(rng));
  for (T& b : layer.bias.data()) b = static_cast<T>(dist(rng));
  return layer;
}

template <typename T>
typename Graph<T>::Var Linear<T>::apply(Graph<T>& g, typename Graph<T>::Var x, bool trainable) {
  const Shape& s = g.shape(x);
  if (s.size() != 2 || s[1] != in_dim()) {
    throw ShapeError("linear layer expects [N, " + std::to_string(in_dim()) + "], got " + shape_string(s));
  }
  return g.add(g.matmul(x, g.parameter(weight, trainable)), g.parameter(bias, trainable));
}

template <typename T>
Mlp<T> Mlp<T>::create(const std::vector<std::size_t>& widths, bool relu_output, std::uint64_t seed) {
  if (widths.size() < 2) throw ConfigError("an MLP needs at least an input and an output width");
  Mlp mlp;
  mlp.relu_output = relu_output;
  std::mt19937_64 seeds(seed);
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    mlp.layers.push_back(Linear<T>::uniform_init(widths[i], widths[i + 1], seeds()));
  }
  return mlp;
}

template <typename T>
typename Graph<T>::Var Mlp<T>::apply(Graph<T>& g, typename Graph<T>::Var x, bool trainable) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = layers[i].apply(g, x, trainable);
    if (i + 1 < layers.size() || relu_output) x = g.relu(x);
  }
  return x;
}

template <typename T>
void Mlp<T>::append_parameters(ParameterList<T>& out, const std::string& prefix) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = prefix + ".l" + std::to_string(i);
    out.push_back({p + ".weight", &layers[i].weight, ParamGroup::kMlp});
    out.push_back({p + ".bias", &layers[i].bias, ParamGroup::kMlp});
  }
}

namespace {

std::vector<std::size_t> head_widths(std::size_t in, std::size_t width, std::size_t hidden, std::size_t out) {
  std::vector<std::size_t> w{in};
  for (std::size_t i = 0; i < hidden; ++i) w.push_back(width);
  w.push_back(out);
  return w;
}

}  // namespace

template <typename T>
GridHeads<T> GridHeads<T>::create(std::size_t density_features, std::size_t appearance_features,
                                  const GridHeadConfig& cfg, std::uint64_t seed) {
  GridHeads heads;
  heads.dir_freqs = cfg.dir_freqs;
  std::mt19937_64 seeds(seed);
  heads.density = Mlp<T>::create(head_widths(density_features, cfg.width, cfg.hidden_layers, 1), false, seeds());
  heads.color = Mlp<T>::create(
      head_widths(appearance_features + encoded_width(3, cfg.dir_freqs), cfg.width, cfg.hidden_layers, 3), false,
      seeds());
  return heads;
}

template <typename T>
FieldOutput<T> GridHeads<T>::evaluate(Graph<T>& g, typename Graph<T>::Var density_features,
                                      typename Graph<T>::Var appearance_features,
                                      typename Graph<T>::Var dir_encoding, bool trainable) {
  auto sigma = g.softplus(density.apply(g, density_features, trainable));
  auto rgb = g.sigmoid(color.apply(g, g.concat({appearance_features, dir_encoding}, 1), trainable));
  return {sigma, rgb};
}

template <typename T>
ParameterList<T> GridHeads<T>::parameters() {
  ParameterList<T> out;
  density.append_parameters(out, "grid_head.density");
  color.append_parameters(out, "grid_head.color");
  return out;
}

template <typename T>
NerfBranch<T> NerfBranch<T>::create(std::size_t density_features, std::size_t appearance_features,
                                    const NerfBranchConfig& cfg, std::uint64_t seed) {
  if (cfg.depth == 0) throw ConfigError("NeRF trunk needs at least one layer");
  NerfBranch branch;
  branch.pos_freqs = cfg.pos_freqs;
  branch.dir_freqs = cfg.dir_freqs;
  std::mt19937_64 seeds(seed);
  const std::size_t in = density_features + appearance_features + encoded_width(3, cfg.pos_freqs);
  std::vector<std::size_t> widths{in};
  for (std::size_t i = 0; i < cfg.depth; ++i) widths.push_back(cfg.width);
  branch.trunk = Mlp<T>::create(widths, true, seeds());
  branch.density = Linear<T>::uniform_init(cfg.width, 1, seeds());
  branch.color = Linear<T>::uniform_init(cfg.width + encoded_width(3, cfg.dir_freqs), 3, seeds());
  return branch;
}

template <typename T>
FieldOutput<T> NerfBranch<T>::evaluate(Graph<T>& g, typename Graph<T>::Var density_features,
                                       typename Graph<T>::Var appearance_features,
                                       typename Graph<T>::Var pos_encoding, typename Graph<T>::Var dir_encoding,
                                       bool trainable) {
  auto h = trunk.apply(g, g.concat({density_features, appearance_features, pos_encoding}, 1), trainable);
  auto sigma = g.softplus(density.apply(g, h, trainable));
  auto rgb = g.sigmoid(color.apply(g, g.concat({h, dir_encoding}, 1), trainable));
  return {sigma, rgb};
}

template <typename T>
ParameterList<T> NerfBranch<T>::parameters() {
  ParameterList<T> out;
  trunk.append_parameters(out, "nerf_branch.trunk");
  out.push_back({"nerf_branch.density.weight", &density.weight, ParamGroup::kMlp});
  out.push_back({"nerf_branch.density.bias", &density.bias, ParamGroup::kMlp});
  out.push_back({"nerf_branch.color.weight", &color.weight, ParamGroup::kMlp});
  out.push_back({"nerf_branch.color.bias", &color.bias, ParamGroup::kMlp});
  return out;
}

template Array<float> positional_encoding<float>(const Array<float>&, std::size_t);
template Array<double> positional_encoding<double>(const Array<double>&, std::size_t);
template struct Linear<float>;
template struct Linear<double>;
template struct Mlp<float>;
template struct Mlp<double>;
template struct GridHeads<float>;
template struct GridHeads<double>;
template struct NerfBranch<float>;
template struct NerfBranch<double>;

}  // namespace gridnerf
