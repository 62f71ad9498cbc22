// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "gridnerf/feature_grid.hpp"
#include "gridnerf/field_heads.hpp"
#include "gridnerf/image.hpp"
#include "gridnerf/renderer.hpp"
#include "gridnerf/train_config.hpp"

namespace gridnerf {

// Grid branch (feature pyramid plus heads) and the optional NeRF branch.
template <typename T>
struct Model {
  FeaturePyramid<T> pyramid;
  GridHeads<T> grid_heads;
  NerfBranch<T> nerf;
  bool has_nerf = false;

  // `padded_box` is the world box mapped onto the unit cube; it sets the plane aspect and D_z.
  static Model create(const TrainConfig& config, const Aabb& padded_box, bool with_nerf);
  void init_nerf(const TrainConfig& config);

  ParameterList<T> grid_parameters();
  ParameterList<T> nerf_parameters();
  // Grid parameters first, then NeRF parameters when present.
  ParameterList<T> parameters();
};

enum class Branch { kGrid, kNerf };
const char* branch_name(Branch b);

// Per-pass sample layout: R rays with N samples each.
template <typename T>
struct SampleSet {
  std::size_t rays = 0;
  std::size_t per_ray = 0;
  Array<T> points;   // [R*N, 3], unit cube
  Array<T> ts;       // [R, N]
  Array<T> deltas;   // [R, N], zero for empty rays
  Array<T> dir_pe;   // [R*N, 6 L_dir]
  Array<T> pos_pe;   // [R*N, 6 L_pos], only for NeRF passes
};

template <typename T>
SampleSet<T> make_samples(std::span<const Ray> rays, const std::vector<std::vector<double>>& ts,
                          std::size_t dir_freqs, std::size_t pos_freqs);

// Coarse sample positions: jittered bins when training, bin centers otherwise.
// ray_ids and iteration select the per-ray RNG stream.
std::vector<std::vector<double>> coarse_positions(std::span<const Ray> rays, std::span<const std::uint64_t> ray_ids,
                                                  const TrainConfig& config, std::uint64_t iteration, bool train);

// Sorted union of the coarse positions and guided samples drawn from the
// (detached) coarse compositing weights [R, N_coarse].
template <typename T>
std::vector<std::vector<double>> union_positions(std::span<const Ray> rays, std::span<const std::uint64_t> ray_ids,
                                                 const std::vector<std::vector<double>>& coarse,
                                                 const Array<T>& coarse_weights, const TrainConfig& config,
                                                 std::uint64_t iteration, bool train);

struct PassOptions {
  bool train_grid = true;   // plane factors receive gradients
  bool train_heads = true;  // head weights receive gradients
};

template <typename T>
CompositeVars<T> grid_pass(Graph<T>& g, Model<T>& model, const SampleSet<T>& samples, const TrainConfig& config,
                           const PassOptions& options);

template <typename T>
CompositeVars<T> nerf_pass(Graph<T>& g, Model<T>& model, const SampleSet<T>& samples, const TrainConfig& config,
                           const PassOptions& options);

// Mean over rays of the squared error summed over rgb.
template <typename T>
double mse_pixel_loss(const Array<T>& pred, const Array<T>& truth);
// Graph form: sum over rays of per-ray squared error, divided by `normalizer`
// (the full batch size when a batch is split into chunks).
template <typename T>
typename Graph<T>::Var mse_pixel_loss(Graph<T>& g, typename Graph<T>::Var pred, typename Graph<T>::Var truth,
                                      double normalizer);

// Forward-only rendering of ray colors [R, 3] through one branch.
template <typename T>
Array<T> render_rays(Model<T>& model, std::span<const Ray> rays, const TrainConfig& config, Branch branch);

template <typename T>
Image render_image(Model<T>& model, const Camera& camera, const SceneNormalization& norm, const TrainConfig& config,
                   Branch branch);

}  // namespace gridnerf
