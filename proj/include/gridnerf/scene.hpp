// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gridnerf/geometry.hpp"
#include "gridnerf/image.hpp"
#include "gridnerf/renderer.hpp"

namespace gridnerf {

struct SceneBox {
  Aabb bounds;
  Rgb color{};
};

// Layout limits for generated scenes, in world units. The ground is the square
// [-half_width, half_width]^2 at z = 0.
struct SceneLayout {
  double half_width = 1.0;
  double ceiling = 0.6;
  double min_footprint = 0.15;
  double max_footprint = 0.4;
  double min_height = 0.1;
  double max_height = 0.5;
  double gap = 0.02;
  std::size_t max_attempts = 2000;
};

struct SyntheticScene {
  Rgb ground_color{};
  Rgb background{};
  std::vector<SceneBox> boxes;
  std::uint64_t seed = 0;
  SceneLayout layout;

  Aabb bounds() const;
};

// Non-overlapping boxes standing on the ground. Throws ConfigError when the
// placement retry budget runs out.
SyntheticScene generate_synthetic_scene(std::size_t n_boxes, std::uint64_t seed, const SceneLayout& layout = {});

// First-hit color along a world-space ray (flat shading, no anti-aliasing).
Rgb trace_scene(const SyntheticScene& scene, const Vec3& origin, const Vec3& direction);
Image oracle_render(const SyntheticScene& scene, const Camera& camera);

// Camera looking from `eye` at `target` with world +z as the up reference.
Camera look_at_camera(const Vec3& eye, const Vec3& target, std::size_t width, std::size_t height,
                      double fov_degrees, double near, double far);

struct ViewRig {
  std::size_t views = 56;
  // every test_stride-th view (starting at 0) is held out
  std::size_t test_stride = 7;
  std::size_t width = 64;
  std::size_t height = 64;
  double radius = 3.0;
  double min_elevation_deg = 25.0;
  double max_elevation_deg = 75.0;
  double fov_deg = 50.0;
  double target_height = 0.15;
  double near = 0.5;
  double far = 6.0;
};

std::vector<Camera> hemisphere_cameras(const ViewRig& rig);

struct Frame {
  std::string file;
  Camera camera;
  std::string split;
};

struct SceneManifest {
  Aabb aabb;
  std::vector<Frame> frames;
};

// Canonical JSON form: two-space indent, fixed key order, trailing newline.
std::string manifest_to_json(const SceneManifest& manifest);
// Parses and validates structure and cameras (not the image files).
SceneManifest manifest_from_json(const std::string& text);
void write_manifest(const std::filesystem::path& path, const SceneManifest& manifest);
SceneManifest read_manifest(const std::filesystem::path& path);

struct SceneDataset {
  std::filesystem::path root;
  SceneManifest manifest;
  std::vector<Image> images;
  SceneNormalization normalization;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Reads the manifest and decodes every image relative to its directory.
SceneDataset load_dataset(const std::filesystem::path& manifest_path);

// Renders every view of the rig and writes PNGs plus manifest.json into directory.
SceneManifest write_synthetic_dataset(const SyntheticScene& scene, const ViewRig& rig,
                                      const std::filesystem::path& directory);

// 10 log10(1 / MSE) over all pixels and channels; +inf for identical images.
double psnr(const Image& pred, const Image& truth);
// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5) of the rec. 601 luma.
double ssim(const Image& pred, const Image& truth);

}  // namespace gridnerf
