// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "gridnerf/array.hpp"

namespace gridnerf {

enum class OpKind : std::uint8_t {
  kConstant,
  kVariable,
  kParameter,
  kAdd,
  kSub,
  kMul,
  kNeg,
  kScale,
  kAddScalar,
  kMatMul,
  kSum,
  kMean,
  kSumAxis,
  kConcat,
  kReshape,
  kBroadcastTo,
  kExp,
  kLog,
  kSin,
  kCos,
  kRelu,
  kSoftplus,
  kSigmoid,
  kCumsumExclusive,
  kBilinearSample,
  kLinearSample,
  kStopGradient,
};

std::string_view op_name(OpKind op);

// Numerically stable scalar helpers shared by the graph kernels and tests.
template <typename T>
T softplus(T x);
template <typename T>
T sigmoid(T x);

// Define-by-construction computation graph with reverse-mode differentiation.
//
// Nodes are appended in topological order; shapes are checked when a node is
// created. forward() evaluates every node added since the previous call, so a
// graph can be grown in stages and read back in between. recompute() re-runs
// every node, which is how finite-difference checks re-evaluate a loss after
// perturbing parameter storage in place.
template <typename T>
class Graph {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  struct ParameterGradient {
    Array<T>* storage;
    const Array<T>* grad;
  };

  Graph() = default;

  Var constant(Array<T> value);
  Var variable(Array<T> value, bool requires_grad = true);
  // Leaf aliasing caller-owned storage. The same storage always maps to the same node.
  Var parameter(Array<T>& storage, bool requires_grad = true);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var neg(Var a);
  Var scale(Var a, T factor);
  Var add_scalar(Var a, T offset);
  // [n, k] x [k, m] -> [n, m]
  Var matmul(Var a, Var b);
  Var sum(Var a);
  Var mean(Var a);
  Var sum_axis(Var a, std::size_t axis);
  Var concat(std::span<const Var> parts, std::size_t axis);
  Var concat(std::initializer_list<Var> parts, std::size_t axis) {
    return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
  }
  Var reshape(Var a, Shape shape);
  Var broadcast_to(Var a, Shape shape);
  Var exp(Var a);
  Var log(Var a);
  Var sin(Var a);
  Var cos(Var a);
  Var relu(Var a);
  Var softplus(Var a);
  Var sigmoid(Var a);
  // Running sum along an axis that excludes the current element.
  Var cumsum_exclusive(Var a, std::size_t axis);
  // plane [R, H, W] sampled bilinearly at columns (x, y) of points [N, 3] -> [N, R].
  Var bilinear_sample(Var plane, Var points);
  // line [R, D] sampled linearly at column z of points [N, 3] -> [N, R].
  Var linear_sample(Var line, Var points);
  Var stop_gradient(Var a);

  void forward();
  void recompute();
  void backward(Var output);

  const Array<T>& value(Var v) const;
  const Array<T>& grad(Var v) const;
  const Shape& shape(Var v) const { return node(v).shape; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradients of every differentiable parameter leaf, in registration order.
  std::vector<ParameterGradient> parameter_gradients() const;

  // Sign of every evaluated relu input, in node order. Two evaluations with equal
  // masks lie on the same smooth piece of the graph function.
  std::vector<bool> relu_mask() const;

 private:
  struct Node {
    OpKind op = OpKind::kConstant;
    std::vector<int> inputs;
    Shape shape;
    Array<T> value;
    Array<T>* storage = nullptr;
    Array<T> grad;
    bool requires_grad = false;
    bool evaluated = false;
    T scalar = T{0};
    std::size_t axis = 0;
  };

  const Node& node(Var v) const;
  Node& node(Var v);
  Var push(Node n);
  Var binary(OpKind op, Var a, Var b);
  Var unary(OpKind op, Var a);
  const Array<T>& input_value(const Node& n, std::size_t i) const;
  void evaluate(Node& n);
  void propagate(Node& n);
  Array<T>& grad_buffer(int id);

  std::vector<Node> nodes_;
  std::vector<std::pair<Array<T>*, int>> parameters_;
  std::size_t evaluated_count_ = 0;
  bool backward_done_ = false;
  mutable std::map<int, Array<T>> zero_grads_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace gridnerf
