// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <algorithm>
#include <numbers>
#include <numeric>
#include <random>

#include "fd_oracle.hpp"
#include "gridnerf/errors.hpp"
#include "gridnerf/field_heads.hpp"

namespace gridnerf {
namespace {

using G = Graph<double>;

template <typename Net>
void zero_all(Net& net) {
  for (auto& p : net.parameters()) p.value->fill(0.0);
}

Array<double> unit_directions(std::size_t n, std::mt19937_64& rng) {
  Array<double> d = testing::random_array({n, 3}, rng);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < 3; ++j) norm += d.at(i, j) * d.at(i, j);
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < 3; ++j) d.at(i, j) /= norm;
  }
  return d;
}

TEST(PositionalEncoding, ZeroInput) {
  const auto pe = positional_encoding(Array<double>({1, 1}, 0.0), 2);
  EXPECT_EQ(pe.shape(), (Shape{1, 4}));
  EXPECT_EQ(pe.storage(), (std::vector<double>{0, 1, 0, 1}));
}

TEST(PositionalEncoding, HalfPi) {
  const auto pe = positional_encoding(Array<double>({1, 1}, std::numbers::pi / 2), 1);
  EXPECT_NEAR(pe[0], 1.0, 1e-12);
  EXPECT_NEAR(pe[1], 0.0, 1e-12);
}

TEST(PositionalEncoding, ComponentMajorOrderAndTopFrequency) {
  Array<double> x({1, 2}, std::vector<double>{0.3, -0.7});
  const auto pe = positional_encoding(x, 16);
  ASSERT_EQ(pe.dim(1), 64u);
  // second component, highest frequency 2^15
  EXPECT_DOUBLE_EQ(pe[32 + 30], std::sin(32768.0 * -0.7));
  EXPECT_DOUBLE_EQ(pe[32 + 31], std::cos(32768.0 * -0.7));
  EXPECT_DOUBLE_EQ(pe[2], std::sin(2.0 * 0.3));
}

TEST(PositionalEncoding, LengthAndRange) {
  std::mt19937_64 rng(3);
  for (std::size_t dim = 1; dim <= 4; ++dim) {
    for (std::size_t l = 1; l <= 6; ++l) {
      const auto pe = positional_encoding(testing::random_array({5, dim}, rng, -1000, 1000), l);
      EXPECT_EQ(pe.dim(1), 2 * l * dim);
      for (double v : pe.data()) EXPECT_LE(std::abs(v), 1.0);
    }
  }
}

TEST(GridHeads, ZeroNetwork) {
  auto heads = GridHeads<double>::create(24, 48, {}, 1);
  zero_all(heads);
  std::mt19937_64 rng(1);
  G g;
  auto out = heads.evaluate(g, g.constant(testing::random_array({4, 24}, rng)),
                            g.constant(testing::random_array({4, 48}, rng)),
                            g.constant(positional_encoding(unit_directions(4, rng), 4)));
  g.forward();
  for (double s : g.value(out.sigma).data()) EXPECT_NEAR(s, std::log(2.0), 1e-12);
  for (double c : g.value(out.rgb).data()) EXPECT_NEAR(c, 0.5, 1e-12);
}

TEST(GridHeads, DensityNonNegative) {
  std::mt19937_64 rng(5);
  auto heads = GridHeads<double>::create(6, 5, {16, 2, 2}, 9);
  for (int trial = 0; trial < 10; ++trial) {
    for (auto& p : heads.parameters()) *p.value = testing::random_array(p.value->shape(), rng, -3, 3);
    G g;
    auto out = heads.evaluate(g, g.constant(testing::random_array({100, 6}, rng, -1000, 1000)),
                              g.constant(testing::random_array({100, 5}, rng)),
                              g.constant(positional_encoding(unit_directions(100, rng), 2)));
    g.forward();
    for (double s : g.value(out.sigma).data()) EXPECT_GE(s, 0.0);
    for (double c : g.value(out.rgb).data()) {
      EXPECT_GE(c, 0.0);
      EXPECT_LE(c, 1.0);
    }
  }
}

TEST(GridHeads, DirectionAffectsColorOnly) {
  std::mt19937_64 rng(7);
  auto heads = GridHeads<double>::create(8, 16, {32, 2, 4}, 11);
  const auto fs = testing::random_array({3, 8}, rng);
  const auto fc = testing::random_array({3, 16}, rng);
  auto run = [&](const Array<double>& dirs) {
    G g;
    auto out = heads.evaluate(g, g.constant(fs), g.constant(fc), g.constant(positional_encoding(dirs, 4)));
    g.forward();
    return std::pair{g.value(out.sigma), g.value(out.rgb)};
  };
  const auto a = run(unit_directions(3, rng));
  const auto b = run(unit_directions(3, rng));
  EXPECT_EQ(a.first, b.first);
  EXPECT_NE(a.second, b.second);
}

TEST(GridHeads, DimensionMismatchThrows) {
  auto heads = GridHeads<double>::create(8, 16, {}, 1);
  G g;
  EXPECT_THROW(heads.evaluate(g, g.constant(Array<double>({2, 7})), g.constant(Array<double>({2, 16})),
                              g.constant(Array<double>({2, 24}))),
               ShapeError);
}

TEST(GridHeads, ParameterNames) {
  auto heads = GridHeads<double>::create(8, 16, {}, 1);
  const auto params = heads.parameters();
  ASSERT_EQ(params.size(), 12u);
  EXPECT_EQ(params[0].name, "grid_head.density.l0.weight");
  EXPECT_EQ(params[0].value->shape(), (Shape{8, 128}));
  EXPECT_EQ(params[6].name, "grid_head.color.l0.weight");
  EXPECT_EQ(params[6].value->shape(), (Shape{16 + 24, 128}));
  EXPECT_EQ(params[11].value->shape(), (Shape{3}));
}

TEST(NerfBranch, DefaultStructure) {
  auto branch = NerfBranch<double>::create(24, 48, {}, 1);
  EXPECT_EQ(branch.trunk.layers.size(), 4u);
  EXPECT_EQ(branch.trunk.in_dim(), 24u + 48u + 96u);
  EXPECT_EQ(branch.trunk.out_dim(), 256u);
  EXPECT_EQ(branch.color.in_dim(), 256u + 24u);
  EXPECT_EQ(branch.parameters().front().name, "nerf_branch.trunk.l0.weight");
  EXPECT_EQ(branch.parameters().back().name, "nerf_branch.color.bias");
}

TEST(NerfBranch, ZeroNetwork) {
  NerfBranchConfig cfg{32, 4, 6, 2};
  auto branch = NerfBranch<double>::create(4, 5, cfg, 2);
  zero_all(branch);
  std::mt19937_64 rng(2);
  G g;
  auto out = branch.evaluate(g, g.constant(testing::random_array({3, 4}, rng)),
                             g.constant(testing::random_array({3, 5}, rng)),
                             g.constant(positional_encoding(testing::random_array({3, 3}, rng, 0, 1), 6)),
                             g.constant(positional_encoding(unit_directions(3, rng), 2)));
  g.forward();
  for (double s : g.value(out.sigma).data()) EXPECT_NEAR(s, std::log(2.0), 1e-12);
  for (double c : g.value(out.rgb).data()) EXPECT_NEAR(c, 0.5, 1e-12);
}

TEST(NerfBranch, BatchPermutationEquivariance) {
  NerfBranchConfig cfg{32, 4, 6, 2};
  auto branch = NerfBranch<double>::create(4, 5, cfg, 3);
  std::mt19937_64 rng(4);
  const std::size_t n = 7;
  const auto fs = testing::random_array({n, 4}, rng);
  const auto fc = testing::random_array({n, 5}, rng);
  const auto pe = positional_encoding(testing::random_array({n, 3}, rng, 0, 1), 6);
  const auto de = positional_encoding(unit_directions(n, rng), 2);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto permute = [&](const Array<double>& a) {
    Array<double> out(a.shape());
    const std::size_t w = a.dim(1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) out.at(i, j) = a.at(perm[i], j);
    return out;
  };
  auto run = [&](const Array<double>& a, const Array<double>& b, const Array<double>& c, const Array<double>& d) {
    G g;
    auto out = branch.evaluate(g, g.constant(a), g.constant(b), g.constant(c), g.constant(d));
    g.forward();
    return std::pair{g.value(out.sigma), g.value(out.rgb)};
  };
  const auto base = run(fs, fc, pe, de);
  const auto shuffled = run(permute(fs), permute(fc), permute(pe), permute(de));
  EXPECT_EQ(permute(base.first), shuffled.first);
  EXPECT_EQ(permute(base.second), shuffled.second);
}

TEST(NerfBranch, FiniteForLargeInputs) {
  auto branch = NerfBranch<double>::create(4, 5, {64, 4, 16, 4}, 3);
  std::mt19937_64 rng(8);
  G g;
  auto out = branch.evaluate(g, g.constant(testing::random_array({20, 4}, rng, -1000, 1000)),
                             g.constant(testing::random_array({20, 5}, rng, -1000, 1000)),
                             g.constant(positional_encoding(testing::random_array({20, 3}, rng, -1000, 1000), 16)),
                             g.constant(positional_encoding(unit_directions(20, rng), 4)));
  g.forward();
  EXPECT_TRUE(g.value(out.sigma).all_finite());
  EXPECT_TRUE(g.value(out.rgb).all_finite());
}

// Scalar loss touching both outputs; checks every weight family plus the feature inputs.
template <typename Eval>
void check_gradients(ParameterList<double> params, Eval eval, std::vector<Array<double>*> features) {
  G g;
  auto out = eval(g);
  auto loss = g.add(g.sum(g.mul(out.sigma, out.sigma)), g.sum(g.mul(out.rgb, out.rgb)));
  g.forward();
  g.backward(loss);
  std::vector<std::pair<Array<double>*, Array<double>>> checks;
  for (auto& p : params) checks.push_back({p.value, g.grad(g.parameter(*p.value))});
  for (auto* f : features) checks.push_back({f, g.grad(g.parameter(*f))});
  std::mt19937_64 rng(17);
  for (auto& [storage, grad] : checks) {
    for (int k = 0; k < 5; ++k) {
      const std::size_t idx = rng() % storage->size();
      const double numeric = testing::central_difference(g, loss, *storage, idx);
      EXPECT_LT(testing::relative_error(grad[idx], numeric), 1e-3) << "entry " << idx;
    }
  }
}

TEST(GridHeads, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(21);
  auto heads = GridHeads<double>::create(5, 6, {12, 2, 2}, 4);
  auto fs = testing::random_array({4, 5}, rng);
  auto fc = testing::random_array({4, 6}, rng);
  const auto de = positional_encoding(unit_directions(4, rng), 2);
  check_gradients(
      heads.parameters(),
      [&](G& g) { return heads.evaluate(g, g.parameter(fs), g.parameter(fc), g.constant(de)); }, {&fs, &fc});
}

TEST(NerfBranch, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(22);
  auto branch = NerfBranch<double>::create(3, 4, {16, 4, 3, 2}, 5);
  auto fs = testing::random_array({4, 3}, rng);
  auto fc = testing::random_array({4, 4}, rng);
  const auto pe = positional_encoding(testing::random_array({4, 3}, rng, 0, 1), 3);
  const auto de = positional_encoding(unit_directions(4, rng), 2);
  check_gradients(
      branch.parameters(),
      [&](G& g) {
        return branch.evaluate(g, g.parameter(fs), g.parameter(fc), g.constant(pe), g.constant(de));
      },
      {&fs, &fc});
}

}  // namespace
}  // namespace gridnerf
