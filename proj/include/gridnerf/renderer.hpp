// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "gridnerf/array.hpp"
#include "gridnerf/geometry.hpp"
#include "gridnerf/graph.hpp"

namespace gridnerf {

using Rgb = std::array<double, 3>;

// Pinhole camera. Camera space looks down +z with x right and y down; c2w is a
// row-major 4x4 camera-to-world transform. near/far are world distances.
struct Camera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  std::size_t width = 1;
  std::size_t height = 1;
  std::array<double, 16> c2w{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  double near = 0.0;
  double far = 1.0;

  // Throws DataError on bad intrinsics, near >= far, or a rotation block that is
  // not orthonormal within 1e-4.
  void validate() const;
  Eigen::Matrix3d rotation() const;
  Vec3 position() const;
  // Unit world-space direction through continuous pixel coordinates (u, v).
  // Pixel (i, j) has its center at (i + 0.5, j + 0.5).
  Vec3 direction(double u, double v) const;
};

// A ray in normalized scene coordinates, clipped to the unit cube.
struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double t_near = 0.0;
  double t_far = 0.0;
  bool empty = true;
};

Ray normalized_ray(const Camera& camera, const SceneNormalization& norm, double u, double v);
// Rays through the centers of pixels given as row-major indices y * width + x.
std::vector<Ray> generate_rays(const Camera& camera, const SceneNormalization& norm,
                               std::span<const std::size_t> pixel_indices);

// Independent, reproducible RNG stream for a (seed, a, b) triple.
std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b);

// N bin samples over [t_near, t_far]: bin centers, or uniform within each bin.
std::vector<double> stratified_sample(const Ray& ray, std::size_t n, bool jitter, std::mt19937_64& rng);

struct GuidedSampleOptions {
  double floor = 0.01;
  // Deterministic quantiles (i + 0.5) / N instead of uniform draws.
  bool deterministic = false;
};

// Inverse-CDF samples from the piecewise-constant PDF over the bins around
// coarse_ts (edges at the midpoints, plus t_near and t_far) with mass
// proportional to weight + floor. Falls back to stratified sampling when no
// weight is positive.
std::vector<double> grid_guided_sample(const Ray& ray, std::span<const double> coarse_ts,
                                       std::span<const double> coarse_weights, std::size_t n_fine,
                                       std::mt19937_64& rng, const GuidedSampleOptions& options = {});

// Per-sample interval lengths: t[i+1] - t[i], last one t_far - t[N-1].
std::vector<double> sample_deltas(std::span<const double> ts, double t_far);

template <typename T>
struct CompositeVars {
  typename Graph<T>::Var color;          // [R, 3]
  typename Graph<T>::Var weights;        // [R, N]
  typename Graph<T>::Var transmittance;  // [R, 1] after the last sample
  typename Graph<T>::Var depth;          // [R, 1]
};

// Differentiable alpha compositing of R rays with N samples each.
// sigma [R, N], rgb [R, N, 3], ts and deltas [R, N].
template <typename T>
CompositeVars<T> composite(Graph<T>& g, typename Graph<T>::Var sigma, typename Graph<T>::Var rgb,
                           const Array<T>& ts, const Array<T>& deltas, const Rgb& background);

struct RenderOutput {
  Rgb color{};
  std::vector<double> weights;
  double transmittance = 1.0;
  double depth = 0.0;
};

// Single-ray compositing. Throws ShapeError on length mismatch and NumericError
// for unsorted ts, negative sigma, or t_far before the last sample.
RenderOutput composite(std::span<const double> sigmas, std::span<const Rgb> colors, std::span<const double> ts,
                       double t_far, const Rgb& background = {0.0, 0.0, 0.0});

}  // namespace gridnerf
