// SPDX-License-Identifier: Apache-2.0
#include "gridnerf/train_config.hpp"

#include <algorithm>
#include <type_traits>

#include "gridnerf/errors.hpp"

namespace gridnerf {

namespace {

template <typename Config, typename F>
void visit_fields(Config& c, F&& f) {
  f("pretrain_iters", c.pretrain_iters);
  f("joint_iters", c.joint_iters);
  f("batch_rays", c.batch_rays);
  f("chunk_rays", c.chunk_rays);
  f("lr_planes", c.lr_planes);
  f("lr_mlp", c.lr_mlp);
  f("lr_decay_factor", c.lr_decay_factor);
  f("loss_weight_grid", c.loss_weight_grid);
  f("loss_weight_nerf", c.loss_weight_nerf);
  f("n_coarse", c.n_coarse);
  f("n_fine", c.n_fine);
  f("guide_floor", c.guide_floor);
  f("background", c.background);
  f("seed", c.seed);
  f("threads", c.threads);
  f("plane_resolution", c.plane_resolution);
  f("density_components", c.density_components);
  f("appearance_components", c.appearance_components);
  f("downsample_factors", c.downsample_factors);
  f("init_scale", c.init_scale);
  f("grid_head_width", c.grid_head_width);
  f("grid_head_layers", c.grid_head_layers);
  f("nerf_width", c.nerf_width);
  f("nerf_depth", c.nerf_depth);
  f("pos_freqs", c.pos_freqs);
  f("dir_freqs", c.dir_freqs);
  f("freeze_grid_features", c.freeze_grid_features);
  f("zero_grid_features", c.zero_grid_features);
  f("checkpoint_every", c.checkpoint_every);
  f("log_every", c.log_every);
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

void TrainConfig::validate() const {
  require(batch_rays >= 1, "batch_rays must be at least 1");
  require(chunk_rays >= 1, "chunk_rays must be at least 1");
  require(lr_planes >= 0.0 && lr_mlp >= 0.0, "learning rates must be non-negative");
  require(lr_decay_factor > 0.0, "lr_decay_factor must be positive");
  require(loss_weight_grid >= 0.0 && loss_weight_nerf >= 0.0, "loss weights must be non-negative");
  require(n_coarse >= 1, "n_coarse must be at least 1");
  require(guide_floor >= 0.0, "guide_floor must be non-negative");
  for (const double b : background) require(b >= 0.0 && b <= 1.0, "background components must be in [0, 1]");
  require(threads >= 1, "threads must be at least 1");
  require(plane_resolution >= 2, "plane_resolution must be at least 2");
  require(density_components >= 1 && appearance_components >= 1, "component counts must be positive");
  require(!downsample_factors.empty(), "downsample_factors must not be empty");
  require(std::all_of(downsample_factors.begin(), downsample_factors.end(), [](std::size_t f) { return f >= 1; }),
          "downsample factors must be positive");
  require(init_scale >= 0.0, "init_scale must be non-negative");
  require(grid_head_width >= 1 && nerf_width >= 1, "layer widths must be positive");
  require(nerf_depth >= 1, "nerf_depth must be at least 1");
  require(pos_freqs >= 1 && dir_freqs >= 1, "encoding frequency counts must be at least 1");
}

TrainConfig benchmark_config() {
  TrainConfig c;
  c.pretrain_iters = 2000;
  c.joint_iters = 4000;
  c.batch_rays = 256;
  c.chunk_rays = 128;
  c.n_coarse = 32;
  c.n_fine = 32;
  c.plane_resolution = 128;
  c.nerf_width = 128;
  c.log_every = 50;
  return c;
}

nlohmann::ordered_json to_json(const TrainConfig& config) {
  nlohmann::ordered_json j;
  visit_fields(config, [&](const char* key, const auto& value) { j[key] = value; });
  return j;
}

TrainConfig train_config_from_json(const nlohmann::ordered_json& j, TrainConfig base) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  const auto keys = train_config_keys();
  for (const auto& [key, value] : j.items()) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      throw ConfigError("unknown config key \"" + key + "\"");
    }
  }
  visit_fields(base, [&](const char* key, auto& value) {
    if (!j.contains(key)) return;
    using V = std::remove_reference_t<decltype(value)>;
    if constexpr (std::is_integral_v<V> && !std::is_same_v<V, bool>) {
      if (!j.at(key).is_number_unsigned()) {
        throw ConfigError("config key \"" + std::string(key) + "\" must be a non-negative integer");
      }
    }
    try {
      value = j.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key \"" + std::string(key) + "\" has the wrong type: " + j.at(key).dump());
    }
  });
  return base;
}

std::vector<std::string> train_config_keys() {
  std::vector<std::string> keys;
  TrainConfig c;
  visit_fields(c, [&](const char* key, auto&) { keys.emplace_back(key); });
  return keys;
}

}  // namespace gridnerf
