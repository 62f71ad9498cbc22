// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "gridnerf/array.hpp"
#include "gridnerf/geometry.hpp"
#include "gridnerf/graph.hpp"
#include "gridnerf/parameters.hpp"

namespace gridnerf {

struct GridResolution {
  std::size_t height = 2;  // y samples of the ground plane
  std::size_t width = 2;   // x samples of the ground plane
  std::size_t depth = 2;   // z samples of the shared vertical vector

  friend bool operator==(const GridResolution&, const GridResolution&) = default;
};

// One rank-R factorization of a 3-D feature grid: an xy-plane matrix per channel
// combined with a z-vector per channel by outer product.
template <typename T>
struct PlaneFactor {
  Array<T> plane;  // [R, H, W]
  Array<T> line;   // [R, D]

  PlaneFactor() = default;
  PlaneFactor(std::size_t channels, GridResolution res);

  std::size_t channels() const { return plane.dim(0); }
  GridResolution resolution() const { return {plane.dim(1), plane.dim(2), line.dim(1)}; }
  std::size_t parameter_count() const { return plane.size() + line.size(); }
};

enum class FeatureKind { kDensity, kAppearance };

const char* feature_kind_name(FeatureKind kind);

template <typename T>
struct FeatureLevel {
  PlaneFactor<T> density;
  PlaneFactor<T> appearance;

  PlaneFactor<T>& factor(FeatureKind k) { return k == FeatureKind::kDensity ? density : appearance; }
  const PlaneFactor<T>& factor(FeatureKind k) const { return k == FeatureKind::kDensity ? density : appearance; }
};

// Levels are stored finest first (downsample factor order); sampled features are
// concatenated coarsest first.
template <typename T>
struct FeaturePyramid {
  std::vector<FeatureLevel<T>> levels;

  std::size_t feature_dim(FeatureKind kind) const;
  std::size_t parameter_count() const;
  ParameterList<T> parameters();

  template <typename U>
  FeaturePyramid<U> cast() const;
};

struct PyramidConfig {
  GridResolution base;
  std::size_t density_components = 8;
  std::size_t appearance_components = 16;
  std::vector<std::size_t> downsample_factors = {1, 4, 16};
  double init_scale = 0.1;
  std::uint64_t seed = 0;
};

// Plane extents divided by `factor` (must stay >= 2); depth is floored with a minimum of 2.
GridResolution level_resolution(const GridResolution& base, std::size_t factor);

// Base resolution for a scene: the longer horizontal axis gets `plane_resolution`
// samples, the other axes scale with their extent. Depth is clamped to [16, 256].
GridResolution resolution_for_scene(std::size_t plane_resolution, const Aabb& box);

template <typename T>
FeaturePyramid<T> build_pyramid(const PyramidConfig& config);

// Features at normalized points [N, 3] in [0, 1]^3 -> [N, sum of level channels].
// When `trainable` is false the factors enter the graph without gradients.
template <typename T>
typename Graph<T>::Var sample_features(Graph<T>& graph, FeaturePyramid<T>& pyramid, typename Graph<T>::Var points,
                                       FeatureKind kind, bool trainable = true);

inline constexpr std::size_t kDensifyCap = std::size_t{1} << 24;

// Materialized grid out[r, k, j, i] = line[r, k] * plane[r, j, i], shape [R, D, H, W].
template <typename T>
Array<T> densify(const PlaneFactor<T>& factor, std::size_t cap = kDensifyCap);

// Writes one min-max normalized grayscale PNG per (level, kind, channel) plane.
template <typename T>
std::vector<std::filesystem::path> export_plane_images(const FeaturePyramid<T>& pyramid,
                                                       const std::filesystem::path& directory);

}  // namespace gridnerf
