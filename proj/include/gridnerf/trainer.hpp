// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gridnerf/adam.hpp"
#include "gridnerf/checkpoint.hpp"
#include "gridnerf/model.hpp"
#include "gridnerf/scene.hpp"

namespace gridnerf {

enum class Stage { kPretrain, kJoint };
const char* stage_name(Stage s);

struct StepLosses {
  double grid = 0.0;
  double nerf = 0.0;
  double total = 0.0;
};

template <typename T>
struct LossVars {
  typename Graph<T>::Var grid;
  typename Graph<T>::Var nerf;  // invalid in the pretrain stage
  typename Graph<T>::Var total;
  std::vector<std::vector<double>> coarse_ts;
  std::vector<std::vector<double>> union_ts;  // empty in the pretrain stage
};

// Builds the per-chunk training loss. Runs forward() on the coarse pass so the
// guided samples can be drawn from its weights; the caller runs the final
// forward() and backward(). Losses are summed over rays and divided by
// `normalizer`.
template <typename T>
LossVars<T> build_loss(Graph<T>& g, Model<T>& model, Stage stage, std::span<const Ray> rays, const Array<T>& targets,
                       std::span<const std::uint64_t> ray_ids, const TrainConfig& config, std::uint64_t iteration,
                       double normalizer);

// Same loss at given sample positions. Used for finite-difference checks, where
// the guided positions must stay put while parameters move.
template <typename T>
LossVars<T> build_loss_at(Graph<T>& g, Model<T>& model, Stage stage, std::span<const Ray> rays,
                          const Array<T>& targets, const std::vector<std::vector<double>>& coarse_ts,
                          const std::vector<std::vector<double>>& union_ts, const TrainConfig& config,
                          double normalizer);

// Parameters the optimizer updates in a stage.
template <typename T>
ParameterList<T> trainable_parameters(Model<T>& model, Stage stage, const TrainConfig& config);

template <typename T>
struct BatchGradients {
  StepLosses losses;
  std::map<const Array<T>*, Array<T>> grads;  // keyed by parameter storage
};

// Loss and gradients over a batch split into fixed chunks, reduced in chunk order
// so the result does not depend on the thread count.
template <typename T>
BatchGradients<T> batch_gradients(Model<T>& model, Stage stage, std::span<const Ray> rays, const Array<T>& targets,
                                  std::span<const std::uint64_t> ray_ids, const TrainConfig& config,
                                  std::uint64_t iteration);

using AdamStates = std::map<std::string, AdamState<float>>;

// One optimizer step. lr_scale multiplies both learning-rate groups.
StepLosses train_step(Model<float>& model, AdamStates& adam, Stage stage, std::span<const Ray> rays,
                      const Array<float>& targets, std::span<const std::uint64_t> ray_ids, const TrainConfig& config,
                      std::uint64_t iteration, double lr_scale);
inline StepLosses pretrain_step(Model<float>& model, AdamStates& adam, std::span<const Ray> rays,
                                const Array<float>& targets, std::span<const std::uint64_t> ray_ids,
                                const TrainConfig& config, std::uint64_t iteration, double lr_scale = 1.0) {
  return train_step(model, adam, Stage::kPretrain, rays, targets, ray_ids, config, iteration, lr_scale);
}
inline StepLosses joint_step(Model<float>& model, AdamStates& adam, std::span<const Ray> rays,
                             const Array<float>& targets, std::span<const std::uint64_t> ray_ids,
                             const TrainConfig& config, std::uint64_t iteration, double lr_scale = 1.0) {
  return train_step(model, adam, Stage::kJoint, rays, targets, ray_ids, config, iteration, lr_scale);
}

struct Progress {
  std::size_t pretrain_done = 0;
  std::size_t joint_done = 0;
};

struct TrainingState {
  Model<float> model;
  AdamStates adam;
  TrainConfig config;
  Aabb scene_box;
  Progress progress;
};

void save_checkpoint(const std::filesystem::path& path, TrainingState& state);
// Rebuilds the model from the configuration stored in the checkpoint.
TrainingState load_checkpoint(const std::filesystem::path& path);

// All pixels of the given frames as normalized rays with their target colors.
struct RayPool {
  std::vector<Ray> rays;
  Array<float> colors;  // [N, 3]
};
RayPool build_ray_pool(const SceneDataset& dataset, std::span<const std::size_t> frames);

struct BranchMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
};

struct EvalResult {
  std::optional<BranchMetrics> grid;
  std::optional<BranchMetrics> nerf;
  double grid_seconds_per_image = 0.0;
  double nerf_seconds_per_image = 0.0;
};

// Mean PSNR/SSIM over the test split for every available branch. Renders are
// written to image_dir when given.
EvalResult evaluate(Model<float>& model, const SceneDataset& dataset, const TrainConfig& config,
                    const std::optional<std::filesystem::path>& image_dir = std::nullopt);

struct LogEntry {
  std::uint64_t iteration = 0;
  Stage stage = Stage::kPretrain;
  StepLosses losses;
  double wall_seconds = 0.0;
};

struct TrainOptions {
  std::filesystem::path output_dir;
  std::optional<std::filesystem::path> resume;
  bool run_pretrain = true;
  bool run_joint = true;
  bool evaluate_at_end = true;
  std::function<void(const LogEntry&)> on_log;
};

struct TrainReport {
  std::vector<LogEntry> entries;
  EvalResult final_metrics;
  Progress progress;
  std::filesystem::path checkpoint;
};

// Pretrain then joint stages per options. Writes pretrain.ckpt / joint.ckpt at
// stage ends, latest.ckpt periodically, and train_log.tsv. A non-finite loss
// aborts with NumericError and leaves earlier checkpoints untouched.
TrainReport run_training(const SceneDataset& dataset, const TrainConfig& config, const TrainOptions& options);

// Tab-separated log lines; wall time is the last column.
std::string format_log_entry(const LogEntry& e);

}  // namespace gridnerf
