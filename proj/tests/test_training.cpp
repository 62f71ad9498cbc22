// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <iterator>

#include "fd_oracle.hpp"
#include "gridnerf/errors.hpp"
#include "gridnerf/trainer.hpp"
#include "temp_dir.hpp"

namespace gridnerf {
namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.pretrain_iters = 20;
  c.joint_iters = 20;
  c.batch_rays = 32;
  c.chunk_rays = 16;
  c.n_coarse = 8;
  c.n_fine = 8;
  c.plane_resolution = 32;
  c.density_components = 2;
  c.appearance_components = 3;
  c.downsample_factors = {1, 2, 4};
  c.grid_head_width = 16;
  c.grid_head_layers = 1;
  c.nerf_width = 16;
  c.nerf_depth = 2;
  c.pos_freqs = 3;
  c.dir_freqs = 2;
  c.log_every = 5;
  return c;
}

// One small scene rendered once per test binary.
class TrainingTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testing::TempDir();
    ViewRig rig;
    rig.views = 8;
    rig.test_stride = 4;
    rig.width = 12;
    rig.height = 12;
    write_synthetic_dataset(generate_synthetic_scene(4, 3), rig, dir_->path() / "data");
    data_ = new SceneDataset(load_dataset(dir_->path() / "data" / "manifest.json"));
  }
  static void TearDownTestSuite() {
    delete data_;
    delete dir_;
  }

  struct Batch {
    std::vector<Ray> rays;
    std::vector<std::uint64_t> ids;
    Array<float> targets;
  };

  static Batch batch(std::size_t n, std::size_t stride = 7) {
    const RayPool pool = build_ray_pool(*data_, data_->train);
    Batch b{{}, {}, Array<float>(Shape{n, 3})};
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t r = (k * stride) % pool.rays.size();
      b.rays.push_back(pool.rays[r]);
      b.ids.push_back(r);
      for (std::size_t c = 0; c < 3; ++c) b.targets[k * 3 + c] = pool.colors[r * 3 + c];
    }
    return b;
  }

  static Model<float> model(const TrainConfig& c, bool nerf) {
    return Model<float>::create(c, data_->normalization.padded_box(), nerf);
  }

  static testing::TempDir* dir_;
  static SceneDataset* data_;
};

testing::TempDir* TrainingTest::dir_ = nullptr;
SceneDataset* TrainingTest::data_ = nullptr;

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

bool all_zero(const Array<float>& a) {
  for (const float v : a.data()) {
    if (v != 0.0f) return false;
  }
  return true;
}

TEST(MsePixelLoss, Examples) {
  Array<float> same(Shape{2, 3}, 0.3f);
  EXPECT_EQ(mse_pixel_loss(same, same), 0.0);
  EXPECT_DOUBLE_EQ(mse_pixel_loss(Array<float>(Shape{1, 3}, 0.0f), Array<float>(Shape{1, 3}, 1.0f)), 3.0);
  EXPECT_DOUBLE_EQ(mse_pixel_loss(Array<double>(Shape{1, 3}, 0.5), Array<double>(Shape{1, 3}, 0.0)), 0.75);
  EXPECT_THROW(mse_pixel_loss(Array<float>(Shape{2, 3}), Array<float>(Shape{3, 3})), ShapeError);
}

TEST(MsePixelLoss, GraphFormMatchesArrayForm) {
  Graph<double> g;
  std::mt19937_64 rng(1);
  const Array<double> a = testing::random_array(Shape{4, 3}, rng, 0.0, 1.0);
  const Array<double> b = testing::random_array(Shape{4, 3}, rng, 0.0, 1.0);
  auto loss = mse_pixel_loss(g, g.constant(a), g.constant(b), 4.0);
  g.forward();
  EXPECT_NEAR(g.value(loss).item(), mse_pixel_loss(a, b), 1e-12);
}

TEST_F(TrainingTest, FirstPretrainLossIsFinitePositive) {
  const TrainConfig c = tiny_config();
  auto m = model(c, false);
  AdamStates adam;
  const Batch b = batch(c.batch_rays);
  const StepLosses l = pretrain_step(m, adam, b.rays, b.targets, b.ids, c, 0);
  EXPECT_TRUE(std::isfinite(l.total));
  EXPECT_GT(l.total, 0.0);
  EXPECT_EQ(l.total, l.grid);
}

TEST_F(TrainingTest, PretrainLeavesNerfUntouched) {
  const TrainConfig c = tiny_config();
  auto m = model(c, true);
  std::vector<Array<float>> before;
  for (auto& p : m.nerf_parameters()) before.push_back(*p.value);
  const auto grid_before = *m.pyramid.parameters().front().value;
  AdamStates adam;
  const Batch b = batch(c.batch_rays);
  for (std::uint64_t it = 0; it < 5; ++it) pretrain_step(m, adam, b.rays, b.targets, b.ids, c, it);
  auto after = m.nerf_parameters();
  for (std::size_t i = 0; i < after.size(); ++i) {
    ASSERT_EQ(after[i].value->data().size(), before[i].data().size());
    EXPECT_TRUE(std::equal(before[i].data().begin(), before[i].data().end(), after[i].value->data().begin()))
        << after[i].name;
  }
  EXPECT_FALSE(std::equal(grid_before.data().begin(), grid_before.data().end(),
                          m.pyramid.parameters().front().value->data().begin()));
  for (const auto& [name, state] : adam) EXPECT_EQ(name.rfind("nerf_branch", 0), std::string::npos) << name;
}

TEST_F(TrainingTest, PretrainGradientsSkipNerf) {
  const TrainConfig c = tiny_config();
  auto m = model(c, true);
  const Batch b = batch(c.batch_rays);
  const auto grads = batch_gradients(m, Stage::kPretrain, b.rays, b.targets, b.ids, c, 0);
  for (auto& p : m.nerf_parameters()) {
    auto it = grads.grads.find(p.value);
    if (it != grads.grads.end()) EXPECT_TRUE(all_zero(it->second)) << p.name;
  }
}

TEST_F(TrainingTest, GridOnlyWeightWithFrozenFeaturesGivesZeroNerfGradient) {
  TrainConfig c = tiny_config();
  c.loss_weight_grid = 1.0;
  c.loss_weight_nerf = 0.0;
  c.freeze_grid_features = true;
  auto m = model(c, true);
  const Batch b = batch(c.batch_rays);
  const auto grads = batch_gradients(m, Stage::kJoint, b.rays, b.targets, b.ids, c, 3);
  std::size_t seen = 0;
  for (auto& p : m.nerf_parameters()) {
    auto it = grads.grads.find(p.value);
    if (it == grads.grads.end()) continue;
    ++seen;
    EXPECT_TRUE(all_zero(it->second)) << p.name;
  }
  EXPECT_GT(seen, 0u);
  for (auto& p : m.pyramid.parameters()) EXPECT_EQ(grads.grads.count(p.value), 0u) << p.name;
  EXPECT_TRUE(trainable_parameters(m, Stage::kJoint, c).size() == m.grid_heads.parameters().size());
}

TEST_F(TrainingTest, GuidedPositionsAreDetached) {
  // Grid heads only influence L_nerf through the guided positions, so adding
  // L_nerf to the loss must leave their gradients bit-identical.
  TrainConfig c = tiny_config();
  auto m = model(c, true);
  const Batch b = batch(c.batch_rays);
  c.loss_weight_nerf = 0.0;
  const auto grid_only = batch_gradients(m, Stage::kJoint, b.rays, b.targets, b.ids, c, 4);
  c.loss_weight_nerf = 1.0;
  const auto both = batch_gradients(m, Stage::kJoint, b.rays, b.targets, b.ids, c, 4);
  EXPECT_EQ(grid_only.losses.nerf, both.losses.nerf);
  for (auto& p : m.grid_heads.parameters()) {
    const auto& a = grid_only.grads.at(p.value);
    const auto& z = both.grads.at(p.value);
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), z.data().begin())) << p.name;
  }
}

TEST_F(TrainingTest, NerfLossReachesPlanes) {
  TrainConfig c = tiny_config();
  c.loss_weight_grid = 0.0;
  auto m = Model<double>::create(c, data_->normalization.padded_box(), true);
  const Batch fb = batch(4, 53);
  Array<double> targets = fb.targets.cast<double>();

  Graph<double> g;
  auto loss = build_loss(g, m, Stage::kJoint, fb.rays, targets, fb.ids, c, 0, 4.0);
  g.forward();
  g.backward(loss.nerf);
  // largest-magnitude entry of the finest density plane
  Array<double>& plane = m.pyramid.levels.front().density.plane;
  const auto pg = g.parameter_gradients();
  const Array<double>* grad = nullptr;
  for (const auto& e : pg) {
    if (e.storage == &plane) grad = e.grad;
  }
  ASSERT_NE(grad, nullptr);
  std::size_t best = 0;
  for (std::size_t i = 0; i < grad->size(); ++i) {
    if (std::abs((*grad)[i]) > std::abs((*grad)[best])) best = i;
  }
  const double analytic = (*grad)[best];
  ASSERT_NE(analytic, 0.0);

  auto nerf_loss = [&] {
    Graph<double> h;
    auto l = build_loss_at(h, m, Stage::kJoint, fb.rays, targets, loss.coarse_ts, loss.union_ts, c, 4.0);
    h.forward();
    return h.value(l.nerf).item();
  };
  const double eps = 1e-4;
  const double original = plane[best];
  plane[best] = original + eps;
  const double up = nerf_loss();
  plane[best] = original - eps;
  const double down = nerf_loss();
  plane[best] = original;
  const double fd = (up - down) / (2.0 * eps);
  EXPECT_LT(testing::relative_error(analytic, fd), 1e-3) << analytic << " vs " << fd;
}

TEST_F(TrainingTest, JointStepDescendsOnOneRay) {
  TrainConfig c = tiny_config();
  c.batch_rays = 1;
  c.chunk_rays = 1;
  auto m = model(c, true);
  AdamStates adam;
  // first pool ray with a visibly colored target
  const RayPool pool = build_ray_pool(*data_, data_->train);
  std::size_t r = 0;
  while (pool.rays[r].empty || pool.colors[r * 3] + pool.colors[r * 3 + 1] + pool.colors[r * 3 + 2] < 0.3f) ++r;
  Batch b{{pool.rays[r]}, {r}, Array<float>(Shape{1, 3})};
  for (std::size_t k = 0; k < 3; ++k) b.targets[k] = pool.colors[r * 3 + k];
  double first = 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (std::uint64_t it = 0; it < 200; ++it) {
    const double l = joint_step(m, adam, b.rays, b.targets, b.ids, c, it).total;
    if (it == 0) first = l;
    best = std::min(best, l);
  }
  EXPECT_LT(best, first);
  EXPECT_LT(best, 0.1 * first);
}

TEST_F(TrainingTest, ThreadCountDoesNotChangeGradients) {
  TrainConfig c = tiny_config();
  auto m = model(c, true);
  const Batch b = batch(c.batch_rays);
  c.threads = 1;
  const auto one = batch_gradients(m, Stage::kJoint, b.rays, b.targets, b.ids, c, 2);
  c.threads = 3;
  const auto three = batch_gradients(m, Stage::kJoint, b.rays, b.targets, b.ids, c, 2);
  EXPECT_EQ(one.losses.total, three.losses.total);
  ASSERT_EQ(one.grads.size(), three.grads.size());
  for (const auto& [key, grad] : one.grads) {
    const auto& other = three.grads.at(key);
    EXPECT_TRUE(std::equal(grad.data().begin(), grad.data().end(), other.data().begin()));
  }
}

TEST_F(TrainingTest, JointWithoutNerfThrows) {
  const TrainConfig c = tiny_config();
  auto m = model(c, false);
  const Batch b = batch(4);
  EXPECT_THROW(batch_gradients(m, Stage::kJoint, b.rays, b.targets, b.ids, c, 0), DataError);
}

TEST_F(TrainingTest, TrainableSelection) {
  TrainConfig c = tiny_config();
  auto m = model(c, true);
  const std::size_t grid = m.pyramid.parameters().size();
  const std::size_t heads = m.grid_heads.parameters().size();
  const std::size_t nerf = m.nerf_parameters().size();
  EXPECT_EQ(trainable_parameters(m, Stage::kPretrain, c).size(), grid + heads);
  EXPECT_EQ(trainable_parameters(m, Stage::kJoint, c).size(), grid + heads + nerf);
  c.loss_weight_grid = 0.0;
  c.freeze_grid_features = true;
  EXPECT_EQ(trainable_parameters(m, Stage::kJoint, c).size(), nerf);
}

TEST_F(TrainingTest, RunsAreDeterministic) {
  TrainConfig c = tiny_config();
  c.threads = 1;
  testing::TempDir a;
  testing::TempDir b;
  TrainOptions o;
  o.evaluate_at_end = false;
  o.output_dir = a.path();
  const auto ra = run_training(*data_, c, o);
  o.output_dir = b.path();
  const auto rb = run_training(*data_, c, o);
  ASSERT_EQ(ra.entries.size(), rb.entries.size());
  for (std::size_t i = 0; i < ra.entries.size(); ++i) {
    EXPECT_EQ(ra.entries[i].iteration, rb.entries[i].iteration);
    EXPECT_EQ(ra.entries[i].losses.total, rb.entries[i].losses.total);
  }
  for (const char* name : {"pretrain.ckpt", "joint.ckpt"}) {
    const std::string x = file_bytes(a.path() / name);
    EXPECT_FALSE(x.empty());
    EXPECT_EQ(x, file_bytes(b.path() / name)) << name;
  }
}

TEST_F(TrainingTest, ReportIsWellFormed) {
  TrainConfig c = tiny_config();
  testing::TempDir out;
  TrainOptions o;
  o.output_dir = out.path();
  const auto r = run_training(*data_, c, o);
  ASSERT_FALSE(r.entries.empty());
  for (std::size_t i = 0; i < r.entries.size(); ++i) {
    EXPECT_GE(r.entries[i].losses.grid, 0.0);
    EXPECT_GE(r.entries[i].losses.nerf, 0.0);
    EXPECT_GE(r.entries[i].losses.total, 0.0);
    if (i) EXPECT_GT(r.entries[i].iteration, r.entries[i - 1].iteration);
  }
  EXPECT_EQ(r.entries.back().iteration, c.pretrain_iters + c.joint_iters - 1);
  EXPECT_EQ(r.progress.pretrain_done, c.pretrain_iters);
  EXPECT_EQ(r.progress.joint_done, c.joint_iters);
  ASSERT_TRUE(r.final_metrics.grid.has_value());
  ASSERT_TRUE(r.final_metrics.nerf.has_value());
  EXPECT_TRUE(std::isfinite(r.final_metrics.grid->psnr));
  const std::string log = file_bytes(out.path() / "train_log.tsv");
  EXPECT_EQ(log.rfind("# iteration\t", 0), 0u);
  EXPECT_NE(log.find("# final grid_psnr="), std::string::npos);
}

TEST_F(TrainingTest, CheckpointRoundTrip) {
  TrainConfig c = tiny_config();
  testing::TempDir out;
  TrainOptions o;
  o.output_dir = out.path();
  o.evaluate_at_end = false;
  run_training(*data_, c, o);
  TrainingState s = load_checkpoint(out.path() / "joint.ckpt");
  EXPECT_TRUE(s.model.has_nerf);
  EXPECT_EQ(s.progress.pretrain_done, c.pretrain_iters);
  EXPECT_EQ(s.progress.joint_done, c.joint_iters);
  EXPECT_EQ(s.adam.size(), s.model.parameters().size());
  save_checkpoint(out.path() / "again.ckpt", s);
  EXPECT_EQ(file_bytes(out.path() / "joint.ckpt"), file_bytes(out.path() / "again.ckpt"));

  TrainingState p = load_checkpoint(out.path() / "pretrain.ckpt");
  EXPECT_FALSE(p.model.has_nerf);
  EXPECT_EQ(p.progress.joint_done, 0u);
}

TEST_F(TrainingTest, ResumedRunMatchesUninterrupted) {
  TrainConfig c = tiny_config();
  testing::TempDir whole;
  testing::TempDir split;
  TrainOptions o;
  o.evaluate_at_end = false;
  o.output_dir = whole.path();
  run_training(*data_, c, o);

  o.output_dir = split.path();
  o.run_joint = false;
  run_training(*data_, c, o);
  o.run_pretrain = false;
  o.run_joint = true;
  o.resume = split.path() / "pretrain.ckpt";
  run_training(*data_, c, o);
  EXPECT_EQ(file_bytes(whole.path() / "joint.ckpt"), file_bytes(split.path() / "joint.ckpt"));
}

TEST_F(TrainingTest, ResumeRejectsDifferentArchitecture) {
  TrainConfig c = tiny_config();
  c.joint_iters = 0;
  testing::TempDir out;
  TrainOptions o;
  o.output_dir = out.path();
  o.evaluate_at_end = false;
  o.run_joint = false;
  run_training(*data_, c, o);
  c.grid_head_width = 8;
  o.resume = out.path() / "pretrain.ckpt";
  EXPECT_THROW(run_training(*data_, c, o), ConfigError);
}

TEST_F(TrainingTest, DivergenceAbortsAndKeepsLastCheckpoint) {
  TrainConfig c = tiny_config();
  c.lr_planes = 1e36;
  c.lr_mlp = 1e36;
  c.checkpoint_every = 1;
  testing::TempDir out;
  TrainOptions o;
  o.output_dir = out.path();
  try {
    run_training(*data_, c, o);
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("training diverged at iteration"), std::string::npos) << e.what();
  }
  ASSERT_TRUE(std::filesystem::exists(out.path() / "latest.ckpt"));
  EXPECT_NO_THROW(load_checkpoint(out.path() / "latest.ckpt"));
  EXPECT_FALSE(std::filesystem::exists(out.path() / "joint.ckpt"));
}

TEST_F(TrainingTest, ZeroJointItersIsPretrainOnly) {
  TrainConfig c = tiny_config();
  c.joint_iters = 0;
  testing::TempDir out;
  TrainOptions o;
  o.output_dir = out.path();
  o.run_joint = false;
  const auto r = run_training(*data_, c, o);
  EXPECT_TRUE(r.final_metrics.grid.has_value());
  EXPECT_FALSE(r.final_metrics.nerf.has_value());
}

TEST_F(TrainingTest, RenderRaysShapesAndRange) {
  const TrainConfig c = tiny_config();
  auto m = model(c, true);
  const Batch b = batch(10);
  for (Branch br : {Branch::kGrid, Branch::kNerf}) {
    const Array<float> out = render_rays(m, b.rays, c, br);
    ASSERT_EQ(out.shape(), (Shape{10, 3}));
    for (const float v : out.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f + 1e-6f);
    }
  }
  auto grid_only = model(c, false);
  EXPECT_THROW(render_rays(grid_only, b.rays, c, Branch::kNerf), DataError);
}

}  // namespace
}  // namespace gridnerf
