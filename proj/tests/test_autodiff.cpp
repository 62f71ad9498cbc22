// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>

#include "fd_oracle.hpp"
#include "gridnerf/adam.hpp"
#include "gridnerf/checkpoint.hpp"
#include "gridnerf/errors.hpp"
#include "gridnerf/graph.hpp"

namespace gridnerf {
namespace {

using G = Graph<double>;
using testing::central_difference;
using testing::random_array;
using testing::relative_error;

TEST(GraphForward, IdentityMatmul) {
  G g;
  Array<double> eye(Shape{2, 2}, {1, 0, 0, 1});
  auto a = g.constant(eye);
  auto b = g.constant(eye);
  auto c = g.matmul(a, b);
  g.forward();
  EXPECT_EQ(g.value(c), eye);
}

TEST(GraphForward, ReduceSum) {
  G g;
  auto x = g.constant(Array<double>::from({1, 2, 3}));
  auto s = g.sum(x);
  g.forward();
  EXPECT_DOUBLE_EQ(g.value(s).item(), 6.0);
}

TEST(GraphForward, SoftplusAtZero) {
  G g;
  auto x = g.constant(Array<double>::from({0.0}));
  auto y = g.softplus(x);
  g.forward();
  EXPECT_NEAR(g.value(y).item(), 0.6931, 1e-4);
  EXPECT_DOUBLE_EQ(g.value(y).item(), std::log(2.0));
}

TEST(GraphForward, SoftplusLargeInputDoesNotOverflow) {
  EXPECT_DOUBLE_EQ(softplus(50.0), 50.0);
  EXPECT_FLOAT_EQ(softplus(200.0f), 200.0f);
  EXPECT_NEAR(softplus(-40.0), std::exp(-40.0), 1e-30);
  EXPECT_DOUBLE_EQ(sigmoid(-800.0), 0.0);
}

TEST(GraphForward, ShapeMismatchThrows) {
  G g;
  auto a = g.constant(Array<double>(Shape{2, 3}));
  auto b = g.constant(Array<double>(Shape{2, 3}));
  EXPECT_THROW(g.matmul(a, b), ShapeError);
  auto c = g.constant(Array<double>(Shape{4, 3}));
  EXPECT_THROW(g.add(a, c), ShapeError);
  EXPECT_THROW(g.concat({a, g.constant(Array<double>(Shape{2, 3, 1}))}, 1), ShapeError);
}

TEST(GraphForward, NonFiniteIntermediateThrows) {
  G g;
  auto x = g.constant(Array<double>::from({-1.0}));
  g.log(x);
  EXPECT_THROW(g.forward(), NumericError);
}

TEST(GraphForward, BroadcastRowAndColumn) {
  G g;
  auto a = g.constant(Array<double>(Shape{2, 3}, {1, 2, 3, 4, 5, 6}));
  auto row = g.constant(Array<double>(Shape{1, 3}, {10, 20, 30}));
  auto col = g.constant(Array<double>(Shape{2, 1}, {100, 200}));
  auto r = g.add(a, row);
  auto c = g.mul(a, col);
  auto vec = g.sub(a, g.constant(Array<double>::from({1, 1, 1})));
  g.forward();
  EXPECT_EQ(g.value(r).storage(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  EXPECT_EQ(g.value(c).storage(), (std::vector<double>{100, 200, 300, 800, 1000, 1200}));
  EXPECT_EQ(g.value(vec).storage(), (std::vector<double>{0, 1, 2, 3, 4, 5}));
}

TEST(GraphForward, CumsumExclusiveAndSumAxis) {
  G g;
  auto a = g.constant(Array<double>(Shape{2, 3}, {1, 2, 3, 4, 5, 6}));
  auto cs = g.cumsum_exclusive(a, 1);
  auto s0 = g.sum_axis(a, 0);
  auto s1 = g.sum_axis(a, 1);
  g.forward();
  EXPECT_EQ(g.value(cs).storage(), (std::vector<double>{0, 1, 3, 0, 4, 9}));
  EXPECT_EQ(g.value(s0).shape(), (Shape{1, 3}));
  EXPECT_EQ(g.value(s0).storage(), (std::vector<double>{5, 7, 9}));
  EXPECT_EQ(g.value(s1).storage(), (std::vector<double>{6, 15}));
}

TEST(GraphForward, IncrementalForwardEvaluatesOnlyNewNodes) {
  G g;
  auto x = g.constant(Array<double>::from({1, 2}));
  auto y = g.scale(x, 2.0);
  g.forward();
  EXPECT_EQ(g.value(y).storage(), (std::vector<double>{2, 4}));
  auto z = g.add(y, x);
  EXPECT_THROW(g.value(z), std::logic_error);
  g.forward();
  EXPECT_EQ(g.value(z).storage(), (std::vector<double>{3, 6}));
}

TEST(GraphBackward, QuadraticDerivative) {
  G g;
  Array<double> x = Array<double>::from({1, 2});
  auto xv = g.parameter(x);
  auto loss = g.sum(g.mul(xv, xv));
  g.forward();
  g.backward(loss);
  EXPECT_EQ(g.grad(xv).storage(), (std::vector<double>{2, 4}));
}

TEST(GraphBackward, ConstantOutputGivesZeroGradient) {
  G g;
  Array<double> p = Array<double>::from({3, 4});
  auto pv = g.parameter(p);
  auto c = g.sum(g.constant(Array<double>::from({5, 6})));
  g.forward();
  g.backward(c);
  EXPECT_EQ(g.grad(pv).storage(), (std::vector<double>{0, 0}));
  ASSERT_EQ(g.parameter_gradients().size(), 1u);
  EXPECT_EQ(g.parameter_gradients()[0].grad->storage(), (std::vector<double>{0, 0}));
}

TEST(GraphBackward, UnusedLeafGetsZeroGradient) {
  G g;
  Array<double> used = Array<double>::from({1.0});
  Array<double> unused(Shape{2, 2}, 7.0);
  auto u = g.parameter(used);
  auto n = g.parameter(unused);
  auto loss = g.sum(g.scale(u, 3.0));
  g.forward();
  g.backward(loss);
  EXPECT_EQ(g.grad(u).storage(), (std::vector<double>{3.0}));
  EXPECT_EQ(g.grad(n), Array<double>(Shape{2, 2}));
}

TEST(GraphBackward, NonScalarOutputThrows) {
  G g;
  Array<double> p = Array<double>::from({1, 2});
  auto pv = g.parameter(p);
  g.forward();
  EXPECT_THROW(g.backward(pv), ShapeError);
}

TEST(GraphBackward, BackwardBeforeForwardThrows) {
  G g;
  Array<double> p = Array<double>::from({1, 2});
  auto loss = g.sum(g.parameter(p));
  EXPECT_THROW(g.backward(loss), std::logic_error);
}

TEST(GraphBackward, FanOutAccumulates) {
  G g;
  Array<double> p = Array<double>::from({2.0});
  auto x = g.parameter(p);
  // 3x + x*x at x=2 -> derivative 3 + 2x = 7
  auto loss = g.sum(g.add(g.scale(x, 3.0), g.mul(x, x)));
  g.forward();
  g.backward(loss);
  EXPECT_DOUBLE_EQ(g.grad(x).item(), 7.0);
}

TEST(GraphBackward, ConcatSplitsOnesExactly) {
  G g;
  Array<double> a(Shape{2, 3}, 0.5);
  Array<double> b(Shape{2, 4}, -1.5);
  auto av = g.parameter(a);
  auto bv = g.parameter(b);
  auto loss = g.sum(g.concat({av, bv}, 1));
  g.forward();
  g.backward(loss);
  EXPECT_EQ(g.grad(av), Array<double>(Shape{2, 3}, 1.0));
  EXPECT_EQ(g.grad(bv), Array<double>(Shape{2, 4}, 1.0));
}

TEST(GraphBackward, StopGradientBlocksFlow) {
  G g;
  Array<double> p = Array<double>::from({1.5, -2.0});
  auto x = g.parameter(p);
  auto loss = g.sum(g.mul(g.stop_gradient(x), x));
  g.forward();
  g.backward(loss);
  EXPECT_EQ(g.grad(x).storage(), (std::vector<double>{1.5, -2.0}));
}

// Builds loss = sum(weights * op(inputs...)) and checks every parameter entry against
// central differences.
struct OpCase {
  std::string name;
  std::function<std::vector<Array<double>>(std::mt19937_64&)> inputs;
  std::function<G::Var(G&, std::vector<G::Var>&)> build;
};

void check_op_gradients(const OpCase& c, int trials) {
  std::mt19937_64 rng(1234);
  for (int t = 0; t < trials; ++t) {
    std::vector<Array<double>> params = c.inputs(rng);
    G g;
    std::vector<G::Var> vars;
    for (auto& p : params) vars.push_back(g.parameter(p));
    const G::Var y = c.build(g, vars);
    auto weights = g.constant(random_array(g.shape(y), rng));
    const G::Var loss = g.sum(g.mul(y, weights));
    g.forward();
    g.backward(loss);
    std::vector<Array<double>> analytic;
    for (auto v : vars) analytic.push_back(g.grad(v));
    for (std::size_t k = 0; k < params.size(); ++k) {
      for (std::size_t i = 0; i < params[k].size(); ++i) {
        const double numeric = central_difference(g, loss, params[k], i);
        EXPECT_LT(relative_error(analytic[k][i], numeric), 1e-3)
            << c.name << " trial " << t << " input " << k << " entry " << i << ": analytic " << analytic[k][i]
            << " numeric " << numeric;
      }
    }
  }
}

std::size_t random_extent(std::mt19937_64& rng) { return std::uniform_int_distribution<std::size_t>(1, 8)(rng); }

Array<double> away_from_zero(Shape s, std::mt19937_64& rng) {
  Array<double> a = random_array(std::move(s), rng);
  for (double& v : a.data()) v = v < 0 ? v - 0.05 : v + 0.05;
  return a;
}

TEST(GraphBackward, EveryOpMatchesFiniteDifferences) {
  auto two_same = [](std::mt19937_64& rng) {
    Shape s{random_extent(rng), random_extent(rng)};
    return std::vector{random_array(s, rng), random_array(s, rng)};
  };
  auto one = [](std::mt19937_64& rng) {
    return std::vector{random_array(Shape{random_extent(rng), random_extent(rng)}, rng, -3.0, 3.0)};
  };
  std::vector<OpCase> cases = {
      {"add", two_same, [](G& g, auto& v) { return g.add(v[0], v[1]); }},
      {"sub", two_same, [](G& g, auto& v) { return g.sub(v[0], v[1]); }},
      {"mul", two_same, [](G& g, auto& v) { return g.mul(v[0], v[1]); }},
      {"neg", one, [](G& g, auto& v) { return g.neg(v[0]); }},
      {"scale", one, [](G& g, auto& v) { return g.scale(v[0], -2.5); }},
      {"add_scalar", one, [](G& g, auto& v) { return g.add_scalar(v[0], 0.75); }},
      {"exp", one, [](G& g, auto& v) { return g.exp(v[0]); }},
      {"sin", one, [](G& g, auto& v) { return g.sin(v[0]); }},
      {"cos", one, [](G& g, auto& v) { return g.cos(v[0]); }},
      {"softplus", one, [](G& g, auto& v) { return g.softplus(v[0]); }},
      {"sigmoid", one, [](G& g, auto& v) { return g.sigmoid(v[0]); }},
      {"mean", one, [](G& g, auto& v) { return g.mean(v[0]); }},
      {"sum_axis0", one, [](G& g, auto& v) { return g.sum_axis(v[0], 0); }},
      {"sum_axis1", one, [](G& g, auto& v) { return g.sum_axis(v[0], 1); }},
      {"cumsum0", one, [](G& g, auto& v) { return g.cumsum_exclusive(v[0], 0); }},
      {"cumsum1", one, [](G& g, auto& v) { return g.cumsum_exclusive(v[0], 1); }},
      {"reshape", one,
       [](G& g, auto& v) {
         const Shape& s = g.shape(v[0]);
         return g.reshape(v[0], Shape{s[0] * s[1]});
       }},
      {"log",
       [](std::mt19937_64& rng) {
         return std::vector{random_array(Shape{random_extent(rng), random_extent(rng)}, rng, 0.2, 3.0)};
       },
       [](G& g, auto& v) { return g.log(v[0]); }},
      {"relu",
       [](std::mt19937_64& rng) { return std::vector{away_from_zero(Shape{random_extent(rng), random_extent(rng)}, rng)}; },
       [](G& g, auto& v) { return g.relu(v[0]); }},
      {"matmul",
       [](std::mt19937_64& rng) {
         const std::size_t n = random_extent(rng), k = random_extent(rng), m = random_extent(rng);
         return std::vector{random_array(Shape{n, k}, rng), random_array(Shape{k, m}, rng)};
       },
       [](G& g, auto& v) { return g.matmul(v[0], v[1]); }},
      {"broadcast_row",
       [](std::mt19937_64& rng) {
         const std::size_t n = random_extent(rng), m = random_extent(rng);
         return std::vector{random_array(Shape{n, m}, rng), random_array(Shape{1, m}, rng)};
       },
       [](G& g, auto& v) { return g.mul(v[0], v[1]); }},
      {"broadcast_col",
       [](std::mt19937_64& rng) {
         const std::size_t n = random_extent(rng), m = random_extent(rng);
         return std::vector{random_array(Shape{n, 1}, rng), random_array(Shape{n, m}, rng)};
       },
       [](G& g, auto& v) { return g.sub(v[0], v[1]); }},
      {"broadcast_to",
       [](std::mt19937_64& rng) { return std::vector{random_array(Shape{1, random_extent(rng)}, rng)}; },
       [](G& g, auto& v) { return g.broadcast_to(v[0], Shape{5, g.shape(v[0])[1]}); }},
      {"concat0",
       [](std::mt19937_64& rng) {
         const std::size_t m = random_extent(rng);
         return std::vector{random_array(Shape{random_extent(rng), m}, rng),
                            random_array(Shape{random_extent(rng), m}, rng)};
       },
       [](G& g, auto& v) { return g.concat({v[0], v[1]}, 0); }},
      {"concat1",
       [](std::mt19937_64& rng) {
         const std::size_t n = random_extent(rng);
         return std::vector{random_array(Shape{n, random_extent(rng)}, rng),
                            random_array(Shape{n, random_extent(rng)}, rng)};
       },
       [](G& g, auto& v) { return g.concat({v[0], v[1]}, 1); }},
  };
  for (const auto& c : cases) check_op_gradients(c, 5);
}

// Points whose lattice coordinates stay at least `margin` cells from a grid line.
Array<double> interior_points(std::size_t n, std::size_t w, std::size_t h, std::size_t d, std::mt19937_64& rng) {
  Array<double> pts(Shape{n, 3});
  std::uniform_int_distribution<std::size_t> cell;
  std::uniform_real_distribution<double> frac(0.1, 0.9);
  const std::size_t ext[3] = {w, h, d};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < 3; ++a) {
      const std::size_t c = std::uniform_int_distribution<std::size_t>(0, ext[a] - 2)(rng);
      pts.at(i, a) = (static_cast<double>(c) + frac(rng)) / static_cast<double>(ext[a] - 1);
    }
  }
  return pts;
}

TEST(GraphBackward, InterpolationOpsMatchFiniteDifferences) {
  std::mt19937_64 rng(99);
  for (int t = 0; t < 5; ++t) {
    const std::size_t r = random_extent(rng), h = random_extent(rng) + 1, w = random_extent(rng) + 1,
                      d = random_extent(rng) + 1, n = random_extent(rng);
    Array<double> plane = random_array(Shape{r, h, w}, rng);
    Array<double> line = random_array(Shape{r, d}, rng);
    Array<double> pts = interior_points(n, w, h, d, rng);
    G g;
    auto pv = g.parameter(plane);
    auto lv = g.parameter(line);
    auto xv = g.parameter(pts);
    auto feat = g.mul(g.bilinear_sample(pv, xv), g.linear_sample(lv, xv));
    auto loss = g.sum(g.mul(feat, g.constant(random_array(Shape{n, r}, rng))));
    g.forward();
    g.backward(loss);
    const std::vector<std::pair<Array<double>, Array<double>*>> checks = {
        {g.grad(pv), &plane}, {g.grad(lv), &line}, {g.grad(xv), &pts}};
    for (const auto& [analytic, storage] : checks) {
      for (std::size_t i = 0; i < storage->size(); ++i) {
        const double numeric = central_difference(g, loss, *storage, i);
        EXPECT_LT(relative_error(analytic[i], numeric), 1e-3) << "entry " << i;
      }
    }
  }
}

TEST(GraphBackward, SampleOutsideUnitCubeThrows) {
  G g;
  Array<double> plane(Shape{1, 2, 2}, 1.0);
  auto pv = g.parameter(plane);
  auto xv = g.constant(Array<double>(Shape{1, 3}, {1.2, 0.5, 0.5}));
  g.bilinear_sample(pv, xv);
  EXPECT_THROW(g.forward(), NumericError);
}

TEST(GraphBackward, RepeatedRunsAreBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(5);
    Array<double> w = random_array(Shape{6, 8}, rng);
    Array<double> x = random_array(Shape{8, 6}, rng);
    G g;
    auto wv = g.parameter(w);
    auto xv = g.parameter(x);
    auto loss = g.mean(g.softplus(g.matmul(wv, xv)));
    g.forward();
    g.backward(loss);
    std::vector<double> out = g.grad(wv).storage();
    out.push_back(g.value(loss).item());
    g.recompute();
    g.backward(loss);
    EXPECT_EQ(g.grad(wv).storage(), std::vector<double>(out.begin(), out.end() - 1));
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  Array<float> p = Array<float>::from({0.3f, -1.0f, 2.0f});
  const Array<float> before = p;
  auto state = AdamState<float>::zeros_like(p);
  for (int i = 0; i < 5; ++i) adam_step(p, Array<float>(p.shape()), state, 0.02);
  EXPECT_EQ(p, before);
  EXPECT_EQ(state.step, 5);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Array<double> p = Array<double>::from({1.0});
  auto state = AdamState<double>::zeros_like(p);
  EXPECT_EQ(state.step, 0);
  adam_step(p, Array<double>::from({1.0}), state, 0.1);
  EXPECT_NEAR(p.item(), 0.9, 1e-4);
  EXPECT_EQ(state.step, 1);
  EXPECT_DOUBLE_EQ(state.beta1, 0.9);
  EXPECT_DOUBLE_EQ(state.beta2, 0.999);
  EXPECT_DOUBLE_EQ(state.epsilon, 1e-8);
}

TEST(Adam, ShapeMismatchThrows) {
  Array<double> p(Shape{2});
  auto state = AdamState<double>::zeros_like(p);
  EXPECT_THROW(adam_step(p, Array<double>(Shape{3}), state, 0.1), ShapeError);
}

TEST(Checkpoint, RoundTripPreservesRecordsAndOrder) {
  const auto path = std::filesystem::temp_directory_path() / "gridnerf_ckpt_roundtrip.bin";
  Checkpoint c;
  c.put("level0.density.M_xy", Array<float>(Shape{2, 3, 3}, 0.25f));
  c.put("grad_check", Array<double>(Shape{2}, {1e-300, -3.5}));
  c.put_int64("adam.t", {42});
  c.put_text("meta.config", "{\"seed\": 1}");
  c.save(path);
  const Checkpoint back = Checkpoint::load(path);
  ASSERT_EQ(back.records().size(), 4u);
  EXPECT_EQ(back.records()[0].name, "level0.density.M_xy");
  EXPECT_EQ(back.get<float>("level0.density.M_xy"), Array<float>(Shape{2, 3, 3}, 0.25f));
  EXPECT_EQ(back.get<double>("grad_check").storage(), (std::vector<double>{1e-300, -3.5}));
  EXPECT_EQ(back.get_int64("adam.t"), (std::vector<std::int64_t>{42}));
  EXPECT_EQ(back.get_text("meta.config"), "{\"seed\": 1}");
  EXPECT_THROW(back.get<float>("missing"), DataError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, ByteLayout) {
  const auto path = std::filesystem::temp_directory_path() / "gridnerf_ckpt_layout.bin";
  Checkpoint c;
  c.put("w", Array<float>(Shape{2}, {1.0f, -2.0f}));
  c.save(path);
  std::ifstream f(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::vector<unsigned char> expected = {
      'G', 'R', 'I', 'D', 'N', 'R', 'F', '1',   // magic
      1, 0, 0, 0, 0, 0, 0, 0,                   // record count
      1, 0, 0, 0, 'w',                          // name
      1,                                        // dtype f32
      1, 0, 0, 0,                               // rank
      2, 0, 0, 0, 0, 0, 0, 0,                   // extent
      0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0,  // 1.0f, -2.0f
  };
  EXPECT_EQ(bytes, expected);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsBadMagicAndTruncation) {
  const auto path = std::filesystem::temp_directory_path() / "gridnerf_ckpt_bad.bin";
  {
    std::ofstream f(path, std::ios::binary);
    f << "NOTACKPT";
  }
  EXPECT_THROW(Checkpoint::load(path), DataError);
  Checkpoint c;
  c.put("w", Array<float>(Shape{4}, 1.0f));
  c.save(path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  EXPECT_THROW(Checkpoint::load(path), DataError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace gridnerf
