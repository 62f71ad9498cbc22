// SPDX-License-Identifier: Apache-2.0
#include "gridnerf/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "gridnerf/errors.hpp"

namespace gridnerf {

std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::kConstant: return "constant";
    case OpKind::kVariable: return "variable";
    case OpKind::kParameter: return "parameter";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kNeg: return "neg";
    case OpKind::kScale: return "scale";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSumAxis: return "sum_axis";
    case OpKind::kConcat: return "concat";
    case OpKind::kReshape: return "reshape";
    case OpKind::kBroadcastTo: return "broadcast_to";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSin: return "sin";
    case OpKind::kCos: return "cos";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftplus: return "softplus";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kCumsumExclusive: return "cumsum_exclusive";
    case OpKind::kBilinearSample: return "bilinear_sample";
    case OpKind::kLinearSample: return "linear_sample";
    case OpKind::kStopGradient: return "stop_gradient";
  }
  return "unknown";
}

template <typename T>
T softplus(T x) {
  if (x > T{20}) return x;
  return std::log1p(std::exp(x));
}

template <typename T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template float softplus<float>(float);
template double softplus<double>(double);
template float sigmoid<float>(float);
template double sigmoid<double>(double);

namespace {

// Offsets of one operand when iterating the broadcast output in row-major order.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  const std::size_t pad = out.size() - in.size();
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[i + pad] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i + a.size() >= rank ? a[i + a.size() - rank] : 1;
    const std::size_t db = i + b.size() >= rank ? b[i + b.size() - rank] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    out[i] = std::max(da, db);
    if (da == 0 || db == 0) out[i] = 0;
  }
  return out;
}

BroadcastPlan make_plan(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  plan.out = broadcast_shape(a, b);
  plan.stride_a = broadcast_strides(a, plan.out);
  plan.stride_b = broadcast_strides(b, plan.out);
  return plan;
}

// Calls f(out_index, a_offset, b_offset) for every output element.
template <typename F>
void for_each_broadcast(const BroadcastPlan& plan, F&& f) {
  const std::size_t total = shape_size(plan.out);
  if (total == 0) return;
  const std::size_t rank = plan.out.size();
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t inner = plan.out[rank - 1];
  const std::size_t sa = plan.stride_a[rank - 1];
  const std::size_t sb = plan.stride_b[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t base_a = 0;
  std::size_t base_b = 0;
  // Unit and zero inner strides are the common cases; give the compiler fixed strides for them.
  auto row = [&](std::size_t o) {
    if (sa == 1 && sb == 1) {
      for (std::size_t k = 0; k < inner; ++k) f(o + k, base_a + k, base_b + k);
    } else if (sa == 1 && sb == 0) {
      for (std::size_t k = 0; k < inner; ++k) f(o + k, base_a + k, base_b);
    } else if (sa == 0 && sb == 1) {
      for (std::size_t k = 0; k < inner; ++k) f(o + k, base_a, base_b + k);
    } else {
      for (std::size_t k = 0; k < inner; ++k) f(o + k, base_a + k * sa, base_b + k * sb);
    }
  };
  for (std::size_t o = 0; o < total; o += inner) {
    row(o);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      base_a += plan.stride_a[d];
      base_b += plan.stride_b[d];
      if (idx[d] < plan.out[d]) break;
      base_a -= idx[d] * plan.stride_a[d];
      base_b -= idx[d] * plan.stride_b[d];
      idx[d] = 0;
    }
  }
}

// (outer, extent, inner) factorization of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<const RowMajor<T>> matrix_view(const Array<T>& a) {
  return {a.data().data(), static_cast<Eigen::Index>(a.dim(0)), static_cast<Eigen::Index>(a.dim(1))};
}

template <typename T>
Eigen::Map<RowMajor<T>> matrix_view(Array<T>& a) {
  return {a.data().data(), static_cast<Eigen::Index>(a.dim(0)), static_cast<Eigen::Index>(a.dim(1))};
}

struct LerpCoord {
  std::size_t i0;
  double frac;
};

template <typename T>
LerpCoord lerp_coord(T x, std::size_t extent, std::string_view what) {
  if (!(x >= T{0} && x <= T{1})) {
    throw NumericError(std::string(what) + " coordinate " + std::to_string(static_cast<double>(x)) +
                       " outside the unit interval");
  }
  const double u = static_cast<double>(x) * static_cast<double>(extent - 1);
  const auto i0 = std::min(static_cast<std::size_t>(u), extent - 2);
  return {i0, u - static_cast<double>(i0)};
}

}  // namespace

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw std::out_of_range("invalid graph variable " + std::to_string(v.id));
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <typename T>
typename Graph<T>::Node& Graph<T>::node(Var v) {
  return const_cast<Node&>(std::as_const(*this).node(v));
}

template <typename T>
typename Graph<T>::Var Graph<T>::push(Node n) {
  if (n.op != OpKind::kConstant && n.op != OpKind::kVariable && n.op != OpKind::kParameter &&
      n.op != OpKind::kStopGradient) {
    n.requires_grad = std::any_of(n.inputs.begin(), n.inputs.end(),
                                  [this](int id) { return nodes_[static_cast<std::size_t>(id)].requires_grad; });
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
typename Graph<T>::Var Graph<T>::constant(Array<T> value) {
  Node n;
  n.op = OpKind::kConstant;
  n.shape = value.shape();
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::Var Graph<T>::variable(Array<T> value, bool requires_grad) {
  Node n;
  n.op = OpKind::kVariable;
  n.shape = value.shape();
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::Var Graph<T>::parameter(Array<T>& storage, bool requires_grad) {
  for (const auto& [ptr, id] : parameters_) {
    if (ptr == &storage) return Var{id};
  }
  Node n;
  n.op = OpKind::kParameter;
  n.shape = storage.shape();
  n.storage = &storage;
  n.requires_grad = requires_grad;
  const Var v = push(std::move(n));
  parameters_.emplace_back(&storage, v.id);
  return v;
}

template <typename T>
typename Graph<T>::Var Graph<T>::binary(OpKind op, Var a, Var b) {
  Node n;
  n.op = op;
  n.inputs = {a.id, b.id};
  n.shape = broadcast_shape(node(a).shape, node(b).shape);
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::Var Graph<T>::unary(OpKind op, Var a) {
  Node n;
  n.op = op;
  n.inputs = {a.id};
  n.shape = node(a).shape;
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::Var Graph<T>::add(Var a, Var b) { return binary(OpKind::kAdd, a, b); }
template <typename T>
typename Graph<T>::Var Graph<T>::sub(Var a, Var b) { return binary(OpKind::kSub, a, b); }
template <typename T>
typename Graph<T>::Var Graph<T>::mul(Var a, Var b) { return binary(OpKind::kMul, a, b); }
template <typename T>
typename Graph<T>::Var Graph<T>::neg(Var a) { return unary(OpKind::kNeg, a); }

template <typename T>
typename Graph<T>::Var Graph<T>::scale(Var a, T factor) {
  const Var v = unary(OpKind::kScale, a);
  nodes_[static_cast<std::size_t>(v.id)].scalar = factor;
  return v;
}

template <typename T>
typename Graph<T>::Var Graph<T>::add_scalar(Var a, T offset) {
  const Var v = unary(OpKind::kAddScalar, a);
  nodes_[static_cast<std::size_t>(v.id)].scalar = offset;
  return v;
}

template <typename T>
typename Graph<T>::Var Graph<T>::matmul(Var a, Var b) {
  const Shape& sa = node(a).shape;
  const Shape& sb = node(b).shape;
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul of " + shape_string(sa) + " and " + shape_string(sb));
  }
  Node n;
  n.op = OpKind::kMatMul;
  n.inputs = {a.id, b.id};
  n.shape = {sa[0], sb[1]};
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::Var Graph<T>::sum(Var a) {
  Node n;
  n.op = OpKind::kSum;
  n.inputs = {a.id};
  n.shape = {1};
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::Var Graph<T>::mean(Var a) {
  if (shape_size(node(a).shape) == 0) throw ShapeError("mean of an empty array");
  Node n;
  n.op = OpKind::kMean;
  n.inputs = {a.id};
  n.shape = {1};
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::Var Graph<T>::sum_axis(Var a, std::size_t axis) {
  const Shape& s = node(a).shape;
  if (axis >= s.size()) throw ShapeError("sum_axis axis out of range for " + shape_string(s));
  Node n;
  n.op = OpKind::kSumAxis;
  n.inputs = {a.id};
  n.shape = s;
  n.shape[axis] = 1;
  n.axis = axis;
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::Var Graph<T>::concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero arrays");
  Shape out = node(parts[0]).shape;
  if (axis >= out.size()) throw ShapeError("concat axis out of range for " + shape_string(out));
  out[axis] = 0;
  Node n;
  n.op = OpKind::kConcat;
  n.axis = axis;
  for (const Var p : parts) {
    const Shape& s = node(p).shape;
    if (s.size() != out.size()) throw ShapeError("concat rank mismatch: " + shape_string(s));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != out[i]) {
        throw ShapeError("concat extent mismatch: " + shape_string(s) + " vs " + shape_string(out));
      }
    }
    out[axis] += s[axis];
    n.inputs.push_back(p.id);
  }
  n.shape = out;
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::Var Graph<T>::reshape(Var a, Shape shape) {
  if (shape_size(shape) != shape_size(node(a).shape)) {
    throw ShapeError("cannot reshape " + shape_string(node(a).shape) + " to " + shape_string(shape));
  }
  Node n;
  n.op = OpKind::kReshape;
  n.inputs = {a.id};
  n.shape = std::move(shape);
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::Var Graph<T>::broadcast_to(Var a, Shape shape) {
  if (broadcast_shape(node(a).shape, shape) != shape) {
    throw ShapeError("cannot broadcast " + shape_string(node(a).shape) + " to " + shape_string(shape));
  }
  Node n;
  n.op = OpKind::kBroadcastTo;
  n.inputs = {a.id};
  n.shape = std::move(shape);
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::Var Graph<T>::exp(Var a) { return unary(OpKind::kExp, a); }
template <typename T>
typename Graph<T>::Var Graph<T>::log(Var a) { return unary(OpKind::kLog, a); }
template <typename T>
typename Graph<T>::Var Graph<T>::sin(Var a) { return unary(OpKind::kSin, a); }
template <typename T>
typename Graph<T>::Var Graph<T>::cos(Var a) { return unary(OpKind::kCos, a); }
template <typename T>
typename Graph<T>::Var Graph<T>::relu(Var a) { return unary(OpKind::kRelu, a); }
template <typename T>
typename Graph<T>::Var Graph<T>::softplus(Var a) { return unary(OpKind::kSoftplus, a); }
template <typename T>
typename Graph<T>::Var Graph<T>::sigmoid(Var a) { return unary(OpKind::kSigmoid, a); }

template <typename T>
typename Graph<T>::Var Graph<T>::cumsum_exclusive(Var a, std::size_t axis) {
  if (axis >= node(a).shape.size()) throw ShapeError("cumsum axis out of range");
  const Var v = unary(OpKind::kCumsumExclusive, a);
  nodes_[static_cast<std::size_t>(v.id)].axis = axis;
  return v;
}

template <typename T>
typename Graph<T>::Var Graph<T>::bilinear_sample(Var plane, Var points) {
  const Shape& sp = node(plane).shape;
  const Shape& sx = node(points).shape;
  if (sp.size() != 3 || sp[1] < 2 || sp[2] < 2) {
    throw ShapeError("bilinear_sample needs a [R, H>=2, W>=2] plane, got " + shape_string(sp));
  }
  if (sx.size() != 2 || sx[1] != 3) throw ShapeError("sample points must be [N, 3], got " + shape_string(sx));
  Node n;
  n.op = OpKind::kBilinearSample;
  n.inputs = {plane.id, points.id};
  n.shape = {sx[0], sp[0]};
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::Var Graph<T>::linear_sample(Var line, Var points) {
  const Shape& sl = node(line).shape;
  const Shape& sx = node(points).shape;
  if (sl.size() != 2 || sl[1] < 2) {
    throw ShapeError("linear_sample needs a [R, D>=2] line, got " + shape_string(sl));
  }
  if (sx.size() != 2 || sx[1] != 3) throw ShapeError("sample points must be [N, 3], got " + shape_string(sx));
  Node n;
  n.op = OpKind::kLinearSample;
  n.inputs = {line.id, points.id};
  n.shape = {sx[0], sl[0]};
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::Var Graph<T>::stop_gradient(Var a) {
  Node n;
  n.op = OpKind::kStopGradient;
  n.inputs = {a.id};
  n.shape = node(a).shape;
  return push(std::move(n));
}

template <typename T>
const Array<T>& Graph<T>::input_value(const Node& n, std::size_t i) const {
  const Node& in = nodes_[static_cast<std::size_t>(n.inputs[i])];
  return in.storage ? *in.storage : in.value;
}

template <typename T>
const Array<T>& Graph<T>::value(Var v) const {
  const Node& n = node(v);
  if (!n.evaluated) throw std::logic_error("value of node " + std::to_string(v.id) + " read before forward()");
  return n.storage ? *n.storage : n.value;
}

template <typename T>
void Graph<T>::forward() {
  for (std::size_t i = evaluated_count_; i < nodes_.size(); ++i) evaluate(nodes_[i]);
  evaluated_count_ = nodes_.size();
  backward_done_ = false;
}

template <typename T>
void Graph<T>::recompute() {
  evaluated_count_ = 0;
  forward();
}

template <typename T>
void Graph<T>::evaluate(Node& n) {
  auto unary_map = [&](auto&& f) {
    const Array<T>& x = input_value(n, 0);
    n.value = Array<T>(n.shape);
    auto out = n.value.data();
    auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  };
  auto binary_map = [&](auto&& f) {
    const Array<T>& a = input_value(n, 0);
    const Array<T>& b = input_value(n, 1);
    n.value = Array<T>(n.shape);
    auto out = n.value.data();
    auto da = a.data();
    auto db = b.data();
    if (a.shape() == b.shape()) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(da[i], db[i]);
    } else {
      for_each_broadcast(make_plan(a.shape(), b.shape()),
                         [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = f(da[ia], db[ib]); });
    }
  };

  switch (n.op) {
    case OpKind::kConstant:
    case OpKind::kVariable:
      break;
    case OpKind::kParameter:
      if (n.storage->shape() != n.shape) {
        throw ShapeError("parameter storage reshaped after registration: " + shape_string(n.storage->shape()));
      }
      break;
    case OpKind::kAdd: binary_map([](T x, T y) { return x + y; }); break;
    case OpKind::kSub: binary_map([](T x, T y) { return x - y; }); break;
    case OpKind::kMul: binary_map([](T x, T y) { return x * y; }); break;
    case OpKind::kNeg: unary_map([](T x) { return -x; }); break;
    case OpKind::kScale: {
      const T s = n.scalar;
      unary_map([s](T x) { return x * s; });
      break;
    }
    case OpKind::kAddScalar: {
      const T s = n.scalar;
      unary_map([s](T x) { return x + s; });
      break;
    }
    case OpKind::kMatMul: {
      n.value = Array<T>(n.shape);
      auto out = matrix_view(n.value);
      out.noalias() = matrix_view(input_value(n, 0)) * matrix_view(input_value(n, 1));
      break;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      const Array<T>& x = input_value(n, 0);
      T total{0};
      for (const T v : x.data()) total += v;
      if (n.op == OpKind::kMean) total /= static_cast<T>(x.size());
      n.value = Array<T>::scalar(total);
      break;
    }
    case OpKind::kSumAxis: {
      const Array<T>& x = input_value(n, 0);
      const AxisSplit s = split_axis(x.shape(), n.axis);
      n.value = Array<T>(n.shape);
      auto out = n.value.data();
      auto in = x.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t src = (o * s.extent + k) * s.inner;
          for (std::size_t j = 0; j < s.inner; ++j) out[o * s.inner + j] += in[src + j];
        }
      }
      break;
    }
    case OpKind::kConcat: {
      n.value = Array<T>(n.shape);
      const AxisSplit so = split_axis(n.shape, n.axis);
      auto out = n.value.data();
      std::size_t offset = 0;
      for (std::size_t p = 0; p < n.inputs.size(); ++p) {
        const Array<T>& x = input_value(n, p);
        const std::size_t width = x.dim(n.axis) * so.inner;
        auto in = x.data();
        for (std::size_t o = 0; o < so.outer; ++o) {
          std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * width), width,
                      out.begin() + static_cast<std::ptrdiff_t>(o * so.extent * so.inner + offset));
        }
        offset += width;
      }
      break;
    }
    case OpKind::kReshape:
      n.value = Array<T>(n.shape, input_value(n, 0).storage());
      break;
    case OpKind::kBroadcastTo: {
      const Array<T>& x = input_value(n, 0);
      n.value = Array<T>(n.shape);
      auto out = n.value.data();
      auto in = x.data();
      for_each_broadcast(make_plan(x.shape(), n.shape),
                         [&](std::size_t o, std::size_t ia, std::size_t) { out[o] = in[ia]; });
      break;
    }
    case OpKind::kExp: unary_map([](T x) { return std::exp(x); }); break;
    case OpKind::kLog: unary_map([](T x) { return std::log(x); }); break;
    case OpKind::kSin: unary_map([](T x) { return std::sin(x); }); break;
    case OpKind::kCos: unary_map([](T x) { return std::cos(x); }); break;
    case OpKind::kRelu: unary_map([](T x) { return x > T{0} ? x : T{0}; }); break;
    case OpKind::kSoftplus: unary_map([](T x) { return gridnerf::softplus(x); }); break;
    case OpKind::kSigmoid: unary_map([](T x) { return gridnerf::sigmoid(x); }); break;
    case OpKind::kCumsumExclusive: {
      const Array<T>& x = input_value(n, 0);
      const AxisSplit s = split_axis(x.shape(), n.axis);
      n.value = Array<T>(n.shape);
      auto out = n.value.data();
      auto in = x.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < s.inner; ++j) {
          T running{0};
          for (std::size_t k = 0; k < s.extent; ++k) {
            const std::size_t idx = (o * s.extent + k) * s.inner + j;
            out[idx] = running;
            running += in[idx];
          }
        }
      }
      break;
    }
    case OpKind::kBilinearSample: {
      const Array<T>& plane = input_value(n, 0);
      const Array<T>& pts = input_value(n, 1);
      const std::size_t channels = plane.dim(0);
      const std::size_t height = plane.dim(1);
      const std::size_t width = plane.dim(2);
      const std::size_t stride = height * width;
      n.value = Array<T>(n.shape);
      auto out = n.value.data();
      auto m = plane.data();
      for (std::size_t p = 0; p < pts.dim(0); ++p) {
        const LerpCoord cx = lerp_coord(pts.at(p, 0), width, "x");
        const LerpCoord cy = lerp_coord(pts.at(p, 1), height, "y");
        const T fx = static_cast<T>(cx.frac);
        const T fy = static_cast<T>(cy.frac);
        const T w00 = (T{1} - fx) * (T{1} - fy);
        const T w01 = fx * (T{1} - fy);
        const T w10 = (T{1} - fx) * fy;
        const T w11 = fx * fy;
        const std::size_t base = cy.i0 * width + cx.i0;
        for (std::size_t r = 0; r < channels; ++r) {
          const T* c = m.data() + r * stride + base;
          out[p * channels + r] = w00 * c[0] + w01 * c[1] + w10 * c[width] + w11 * c[width + 1];
        }
      }
      break;
    }
    case OpKind::kLinearSample: {
      const Array<T>& line = input_value(n, 0);
      const Array<T>& pts = input_value(n, 1);
      const std::size_t channels = line.dim(0);
      const std::size_t depth = line.dim(1);
      n.value = Array<T>(n.shape);
      auto out = n.value.data();
      auto v = line.data();
      for (std::size_t p = 0; p < pts.dim(0); ++p) {
        const LerpCoord cz = lerp_coord(pts.at(p, 2), depth, "z");
        const T fz = static_cast<T>(cz.frac);
        for (std::size_t r = 0; r < channels; ++r) {
          const T* c = v.data() + r * depth + cz.i0;
          out[p * channels + r] = (T{1} - fz) * c[0] + fz * c[1];
        }
      }
      break;
    }
    case OpKind::kStopGradient:
      n.value = input_value(n, 0);
      break;
  }

  const Array<T>& result = n.storage ? *n.storage : n.value;
  if (!result.all_finite()) {
    throw NumericError("non-finite value produced by " + std::string(op_name(n.op)) + " of shape " +
                       shape_string(n.shape));
  }
  n.evaluated = true;
}

template <typename T>
Array<T>& Graph<T>::grad_buffer(int id) {
  Node& in = nodes_[static_cast<std::size_t>(id)];
  if (in.grad.shape() != in.shape) in.grad = Array<T>(in.shape);
  return in.grad;
}

template <typename T>
void Graph<T>::backward(Var output) {
  const Node& out = node(output);
  if (shape_size(out.shape) != 1) {
    throw ShapeError("backward needs a scalar output, got " + shape_string(out.shape));
  }
  for (std::size_t i = 0; i <= static_cast<std::size_t>(output.id); ++i) {
    if (!nodes_[i].evaluated) throw std::logic_error("backward called before forward()");
  }
  zero_grads_.clear();
  for (Node& n : nodes_) {
    if (n.requires_grad) {
      n.grad = Array<T>(n.shape);
    } else {
      n.grad = Array<T>();
    }
  }
  if (out.requires_grad) {
    nodes_[static_cast<std::size_t>(output.id)].grad.fill(T{1});
    for (std::size_t i = static_cast<std::size_t>(output.id) + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.requires_grad && !n.inputs.empty()) propagate(n);
    }
  }
  for (const auto& [storage, id] : parameters_) {
    const Node& p = nodes_[static_cast<std::size_t>(id)];
    if (p.requires_grad && !p.grad.all_finite()) {
      throw NumericError("non-finite gradient for parameter node " + std::to_string(id));
    }
  }
  backward_done_ = true;
}

template <typename T>
void Graph<T>::propagate(Node& n) {
  const auto& g = n.grad.data();
  auto wants = [&](std::size_t i) { return nodes_[static_cast<std::size_t>(n.inputs[i])].requires_grad; };

  auto unary_grad = [&](auto&& df) {
    if (!wants(0)) return;
    const Array<T>& x = input_value(n, 0);
    auto gx = grad_buffer(n.inputs[0]).data();
    auto in = x.data();
    auto y = n.value.data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(in[i], y[i]);
  };

  switch (n.op) {
    case OpKind::kConstant:
    case OpKind::kVariable:
    case OpKind::kParameter:
    case OpKind::kStopGradient:
      break;
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: {
      const Array<T>& a = input_value(n, 0);
      const Array<T>& b = input_value(n, 1);
      const bool wa = wants(0);
      const bool wb = wants(1);
      T* ga = wa ? grad_buffer(n.inputs[0]).data().data() : nullptr;
      T* gb = wb ? grad_buffer(n.inputs[1]).data().data() : nullptr;
      auto da = a.data();
      auto db = b.data();
      const T sign_b = n.op == OpKind::kSub ? T{-1} : T{1};
      const bool is_mul = n.op == OpKind::kMul;
      auto step = [&](std::size_t o, std::size_t ia, std::size_t ib) {
        if (is_mul) {
          if (ga) ga[ia] += g[o] * db[ib];
          if (gb) gb[ib] += g[o] * da[ia];
        } else {
          if (ga) ga[ia] += g[o];
          if (gb) gb[ib] += sign_b * g[o];
        }
      };
      if (a.shape() == b.shape()) {
        const std::size_t count = g.size();
        const T* gp = g.data();
        if (is_mul) {
          if (ga) for (std::size_t i = 0; i < count; ++i) ga[i] += gp[i] * db[i];
          if (gb) for (std::size_t i = 0; i < count; ++i) gb[i] += gp[i] * da[i];
        } else {
          if (ga) for (std::size_t i = 0; i < count; ++i) ga[i] += gp[i];
          if (gb) for (std::size_t i = 0; i < count; ++i) gb[i] += sign_b * gp[i];
        }
      } else {
        for_each_broadcast(make_plan(a.shape(), b.shape()), step);
      }
      break;
    }
    case OpKind::kNeg: unary_grad([](T, T) { return T{-1}; }); break;
    case OpKind::kScale: {
      const T s = n.scalar;
      unary_grad([s](T, T) { return s; });
      break;
    }
    case OpKind::kAddScalar: unary_grad([](T, T) { return T{1}; }); break;
    case OpKind::kMatMul: {
      const Array<T>& a = input_value(n, 0);
      const Array<T>& b = input_value(n, 1);
      const auto gm = matrix_view(n.grad);
      if (wants(0)) matrix_view(grad_buffer(n.inputs[0])).noalias() += gm * matrix_view(b).transpose();
      if (wants(1)) matrix_view(grad_buffer(n.inputs[1])).noalias() += matrix_view(a).transpose() * gm;
      break;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      if (!wants(0)) break;
      auto gx = grad_buffer(n.inputs[0]).data();
      T d = g[0];
      if (n.op == OpKind::kMean) d /= static_cast<T>(gx.size());
      for (T& v : gx) v += d;
      break;
    }
    case OpKind::kSumAxis: {
      if (!wants(0)) break;
      Array<T>& gx_arr = grad_buffer(n.inputs[0]);
      const AxisSplit s = split_axis(gx_arr.shape(), n.axis);
      auto gx = gx_arr.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t dst = (o * s.extent + k) * s.inner;
          for (std::size_t j = 0; j < s.inner; ++j) gx[dst + j] += g[o * s.inner + j];
        }
      }
      break;
    }
    case OpKind::kConcat: {
      const AxisSplit so = split_axis(n.shape, n.axis);
      std::size_t offset = 0;
      for (std::size_t p = 0; p < n.inputs.size(); ++p) {
        const std::size_t width = nodes_[static_cast<std::size_t>(n.inputs[p])].shape[n.axis] * so.inner;
        if (wants(p)) {
          auto gx = grad_buffer(n.inputs[p]).data();
          for (std::size_t o = 0; o < so.outer; ++o) {
            const T* src = g.data() + o * so.extent * so.inner + offset;
            T* dst = gx.data() + o * width;
            for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
          }
        }
        offset += width;
      }
      break;
    }
    case OpKind::kReshape: {
      if (!wants(0)) break;
      auto gx = grad_buffer(n.inputs[0]).data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      break;
    }
    case OpKind::kBroadcastTo: {
      if (!wants(0)) break;
      Array<T>& gx_arr = grad_buffer(n.inputs[0]);
      auto gx = gx_arr.data();
      for_each_broadcast(make_plan(gx_arr.shape(), n.shape),
                         [&](std::size_t o, std::size_t ia, std::size_t) { gx[ia] += g[o]; });
      break;
    }
    case OpKind::kExp: unary_grad([](T, T y) { return y; }); break;
    case OpKind::kLog: unary_grad([](T x, T) { return T{1} / x; }); break;
    case OpKind::kSin: unary_grad([](T x, T) { return std::cos(x); }); break;
    case OpKind::kCos: unary_grad([](T x, T) { return -std::sin(x); }); break;
    case OpKind::kRelu: unary_grad([](T x, T) { return x > T{0} ? T{1} : T{0}; }); break;
    case OpKind::kSoftplus: unary_grad([](T x, T) { return gridnerf::sigmoid(x); }); break;
    case OpKind::kSigmoid: unary_grad([](T, T y) { return y * (T{1} - y); }); break;
    case OpKind::kCumsumExclusive: {
      if (!wants(0)) break;
      Array<T>& gx_arr = grad_buffer(n.inputs[0]);
      const AxisSplit s = split_axis(gx_arr.shape(), n.axis);
      auto gx = gx_arr.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < s.inner; ++j) {
          T running{0};
          for (std::size_t k = s.extent; k-- > 0;) {
            const std::size_t idx = (o * s.extent + k) * s.inner + j;
            gx[idx] += running;
            running += g[idx];
          }
        }
      }
      break;
    }
    case OpKind::kBilinearSample: {
      const Array<T>& plane = input_value(n, 0);
      const Array<T>& pts = input_value(n, 1);
      const std::size_t channels = plane.dim(0);
      const std::size_t height = plane.dim(1);
      const std::size_t width = plane.dim(2);
      const std::size_t stride = height * width;
      T* gm = wants(0) ? grad_buffer(n.inputs[0]).data().data() : nullptr;
      T* gp = wants(1) ? grad_buffer(n.inputs[1]).data().data() : nullptr;
      auto m = plane.data();
      for (std::size_t p = 0; p < pts.dim(0); ++p) {
        const LerpCoord cx = lerp_coord(pts.at(p, 0), width, "x");
        const LerpCoord cy = lerp_coord(pts.at(p, 1), height, "y");
        const T fx = static_cast<T>(cx.frac);
        const T fy = static_cast<T>(cy.frac);
        const std::size_t base = cy.i0 * width + cx.i0;
        const T* gp_row = g.data() + p * channels;
        if (gm) {
          const T w00 = (T{1} - fx) * (T{1} - fy);
          const T w01 = fx * (T{1} - fy);
          const T w10 = (T{1} - fx) * fy;
          const T w11 = fx * fy;
          for (std::size_t r = 0; r < channels; ++r) {
            T* c = gm + r * stride + base;
            const T gr = gp_row[r];
            c[0] += w00 * gr;
            c[1] += w01 * gr;
            c[width] += w10 * gr;
            c[width + 1] += w11 * gr;
          }
        }
        if (gp) {
          T dx{0};
          T dy{0};
          for (std::size_t r = 0; r < channels; ++r) {
            const T* c = m.data() + r * stride + base;
            dx += gp_row[r] * ((T{1} - fy) * (c[1] - c[0]) + fy * (c[width + 1] - c[width]));
            dy += gp_row[r] * ((T{1} - fx) * (c[width] - c[0]) + fx * (c[width + 1] - c[1]));
          }
          gp[p * 3 + 0] += dx * static_cast<T>(width - 1);
          gp[p * 3 + 1] += dy * static_cast<T>(height - 1);
        }
      }
      break;
    }
    case OpKind::kLinearSample: {
      const Array<T>& line = input_value(n, 0);
      const Array<T>& pts = input_value(n, 1);
      const std::size_t channels = line.dim(0);
      const std::size_t depth = line.dim(1);
      T* gl = wants(0) ? grad_buffer(n.inputs[0]).data().data() : nullptr;
      T* gp = wants(1) ? grad_buffer(n.inputs[1]).data().data() : nullptr;
      auto v = line.data();
      for (std::size_t p = 0; p < pts.dim(0); ++p) {
        const LerpCoord cz = lerp_coord(pts.at(p, 2), depth, "z");
        const T fz = static_cast<T>(cz.frac);
        const T* gp_row = g.data() + p * channels;
        T dz{0};
        for (std::size_t r = 0; r < channels; ++r) {
          if (gl) {
            gl[r * depth + cz.i0] += (T{1} - fz) * gp_row[r];
            gl[r * depth + cz.i0 + 1] += fz * gp_row[r];
          }
          dz += gp_row[r] * (v[r * depth + cz.i0 + 1] - v[r * depth + cz.i0]);
        }
        if (gp) gp[p * 3 + 2] += dz * static_cast<T>(depth - 1);
      }
      break;
    }
  }
}

template <typename T>
const Array<T>& Graph<T>::grad(Var v) const {
  const Node& n = node(v);
  if (!backward_done_) throw std::logic_error("grad read before backward()");
  if (n.requires_grad) return n.grad;
  auto it = zero_grads_.find(v.id);
  if (it == zero_grads_.end()) it = zero_grads_.emplace(v.id, Array<T>(n.shape)).first;
  return it->second;
}

template <typename T>
std::vector<typename Graph<T>::ParameterGradient> Graph<T>::parameter_gradients() const {
  if (!backward_done_) throw std::logic_error("parameter_gradients read before backward()");
  std::vector<ParameterGradient> out;
  for (const auto& [storage, id] : parameters_) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.requires_grad) out.push_back({storage, &n.grad});
  }
  return out;
}

template <typename T>
std::vector<bool> Graph<T>::relu_mask() const {
  std::vector<bool> mask;
  for (const Node& n : nodes_) {
    if (n.op != OpKind::kRelu || !n.evaluated) continue;
    for (const T v : input_value(n, 0).data()) mask.push_back(v > T{0});
  }
  return mask;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace gridnerf
