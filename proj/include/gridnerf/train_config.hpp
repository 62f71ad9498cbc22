// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace gridnerf {

struct TrainConfig {
  // schedule
  std::size_t pretrain_iters = 10000;
  std::size_t joint_iters = 100000;
  std::size_t batch_rays = 4096;
  std::size_t chunk_rays = 256;
  double lr_planes = 0.02;
  double lr_mlp = 0.01;
  double lr_decay_factor = 0.1;
  double loss_weight_grid = 1.0;
  double loss_weight_nerf = 1.0;
  // sampling
  std::size_t n_coarse = 64;
  std::size_t n_fine = 128;
  double guide_floor = 0.01;
  std::array<double, 3> background{0.0, 0.0, 0.0};
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  // model
  std::size_t plane_resolution = 1024;
  std::size_t density_components = 8;
  std::size_t appearance_components = 16;
  std::vector<std::size_t> downsample_factors{1, 4, 16};
  double init_scale = 0.1;
  std::size_t grid_head_width = 128;
  std::size_t grid_head_layers = 2;
  std::size_t nerf_width = 256;
  std::size_t nerf_depth = 4;
  std::size_t pos_freqs = 16;
  std::size_t dir_freqs = 4;
  // ablations
  bool freeze_grid_features = false;
  bool zero_grid_features = false;
  // bookkeeping; 0 disables periodic checkpoints
  std::size_t checkpoint_every = 0;
  std::size_t log_every = 100;

  // Throws ConfigError naming the first invalid field.
  void validate() const;
};

// Desk-scale settings used by the synthetic benchmark.
TrainConfig benchmark_config();

nlohmann::ordered_json to_json(const TrainConfig& config);
// Overlays the keys of `j` onto `base`. Unknown keys and type mismatches throw ConfigError.
TrainConfig train_config_from_json(const nlohmann::ordered_json& j, TrainConfig base = {});
// Names of all TrainConfig keys, in serialization order.
std::vector<std::string> train_config_keys();

}  // namespace gridnerf
