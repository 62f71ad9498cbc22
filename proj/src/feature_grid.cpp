// SPDX-License-Identifier: Apache-2.0
#include "gridnerf/feature_grid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>

#include "gridnerf/errors.hpp"
#include "gridnerf/image.hpp"

namespace gridnerf {

const char* feature_kind_name(FeatureKind kind) { return kind == FeatureKind::kDensity ? "density" : "appearance"; }

template <typename T>
PlaneFactor<T>::PlaneFactor(std::size_t channels, GridResolution res)
    : plane(Shape{channels, res.height, res.width}), line(Shape{channels, res.depth}) {
  if (channels == 0) throw ConfigError("feature factor needs at least one channel");
  if (res.height < 2 || res.width < 2 || res.depth < 2) {
    throw ConfigError("feature factor resolution must be at least 2 on every axis");
  }
}

template <typename T>
std::size_t FeaturePyramid<T>::feature_dim(FeatureKind kind) const {
  std::size_t dim = 0;
  for (const auto& level : levels) dim += level.factor(kind).channels();
  return dim;
}

template <typename T>
std::size_t FeaturePyramid<T>::parameter_count() const {
  std::size_t count = 0;
  for (const auto& level : levels) count += level.density.parameter_count() + level.appearance.parameter_count();
  return count;
}

template <typename T>
ParameterList<T> FeaturePyramid<T>::parameters() {
  ParameterList<T> out;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    for (FeatureKind kind : {FeatureKind::kDensity, FeatureKind::kAppearance}) {
      const std::string prefix = "level" + std::to_string(l) + "." + feature_kind_name(kind);
      PlaneFactor<T>& f = levels[l].factor(kind);
      out.push_back({prefix + ".M_xy", &f.plane, ParamGroup::kPlanes});
      out.push_back({prefix + ".v_z", &f.line, ParamGroup::kPlanes});
    }
  }
  return out;
}

template <typename T>
template <typename U>
FeaturePyramid<U> FeaturePyramid<T>::cast() const {
  FeaturePyramid<U> out;
  for (const auto& level : levels) {
    FeatureLevel<U> l;
    l.density.plane = level.density.plane.template cast<U>();
    l.density.line = level.density.line.template cast<U>();
    l.appearance.plane = level.appearance.plane.template cast<U>();
    l.appearance.line = level.appearance.line.template cast<U>();
    out.levels.push_back(std::move(l));
  }
  return out;
}

GridResolution level_resolution(const GridResolution& base, std::size_t factor) {
  if (factor == 0) throw ConfigError("downsample factor must be positive");
  GridResolution res{base.height / factor, base.width / factor, std::max<std::size_t>(2, base.depth / factor)};
  if (res.height < 2 || res.width < 2) {
    throw ConfigError("plane resolution " + std::to_string(base.height) + "x" + std::to_string(base.width) +
                      " is too small for downsample factor " + std::to_string(factor));
  }
  return res;
}

GridResolution resolution_for_scene(std::size_t plane_resolution, const Aabb& box) {
  const Vec3 ext = box.extent();
  const double horizontal = std::max(ext.x(), ext.y());
  auto scaled = [&](double e) {
    return static_cast<std::size_t>(std::lround(static_cast<double>(plane_resolution) * e / horizontal));
  };
  GridResolution res;
  res.width = std::max<std::size_t>(2, scaled(ext.x()));
  res.height = std::max<std::size_t>(2, scaled(ext.y()));
  res.depth = std::clamp<std::size_t>(scaled(ext.z()), 16, 256);
  return res;
}

template <typename T>
FeaturePyramid<T> build_pyramid(const PyramidConfig& config) {
  if (config.downsample_factors.empty()) throw ConfigError("pyramid needs at least one level");
  FeaturePyramid<T> pyramid;
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> dist(-config.init_scale, config.init_scale);
  auto fill = [&](Array<T>& a) {
    for (T& v : a.data()) v = static_cast<T>(dist(rng));
  };
  for (const std::size_t factor : config.downsample_factors) {
    const GridResolution res = level_resolution(config.base, factor);
    FeatureLevel<T> level{PlaneFactor<T>(config.density_components, res),
                          PlaneFactor<T>(config.appearance_components, res)};
    fill(level.density.plane);
    fill(level.density.line);
    fill(level.appearance.plane);
    fill(level.appearance.line);
    pyramid.levels.push_back(std::move(level));
  }
  return pyramid;
}

template <typename T>
typename Graph<T>::Var sample_features(Graph<T>& graph, FeaturePyramid<T>& pyramid, typename Graph<T>::Var points,
                                       FeatureKind kind, bool trainable) {
  std::vector<typename Graph<T>::Var> parts;
  for (std::size_t l = pyramid.levels.size(); l-- > 0;) {
    PlaneFactor<T>& f = pyramid.levels[l].factor(kind);
    auto plane = graph.parameter(f.plane, trainable);
    auto line = graph.parameter(f.line, trainable);
    parts.push_back(graph.mul(graph.bilinear_sample(plane, points), graph.linear_sample(line, points)));
  }
  if (parts.size() == 1) return parts.front();
  return graph.concat(parts, 1);
}

template <typename T>
Array<T> densify(const PlaneFactor<T>& factor, std::size_t cap) {
  const std::size_t r_count = factor.channels();
  const GridResolution res = factor.resolution();
  const std::size_t total = r_count * res.depth * res.height * res.width;
  if (total > cap) {
    throw ConfigError("densified grid of " + std::to_string(total) + " values exceeds the cap of " +
                      std::to_string(cap));
  }
  Array<T> out(Shape{r_count, res.depth, res.height, res.width});
  std::size_t idx = 0;
  for (std::size_t r = 0; r < r_count; ++r) {
    for (std::size_t k = 0; k < res.depth; ++k) {
      const T z = factor.line.at(r, k);
      for (std::size_t j = 0; j < res.height; ++j) {
        for (std::size_t i = 0; i < res.width; ++i) {
          out[idx++] = z * factor.plane[(r * res.height + j) * res.width + i];
        }
      }
    }
  }
  return out;
}

template <typename T>
std::vector<std::filesystem::path> export_plane_images(const FeaturePyramid<T>& pyramid,
                                                       const std::filesystem::path& directory) {
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  if (ec) throw IoError("cannot create " + directory.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    for (FeatureKind kind : {FeatureKind::kDensity, FeatureKind::kAppearance}) {
      const PlaneFactor<T>& f = pyramid.levels[l].factor(kind);
      const std::size_t h = f.plane.dim(1);
      const std::size_t w = f.plane.dim(2);
      for (std::size_t r = 0; r < f.channels(); ++r) {
        auto channel = f.plane.data().subspan(r * h * w, h * w);
        const auto [lo, hi] = std::minmax_element(channel.begin(), channel.end());
        const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
        std::vector<std::uint8_t> pixels(h * w);
        for (std::size_t p = 0; p < pixels.size(); ++p) {
          const double v = range > 0.0 ? (static_cast<double>(channel[p]) - static_cast<double>(*lo)) / range : 0.5;
          pixels[p] = quantize(static_cast<float>(v));
        }
        char name[96];
        std::snprintf(name, sizeof(name), "level%zu_%s_%02zu.png", l, feature_kind_name(kind), r);
        const auto path = directory / name;
        write_png_gray(path, w, h, pixels);
        written.push_back(path);
      }
    }
  }
  return written;
}

template struct PlaneFactor<float>;
template struct PlaneFactor<double>;
template struct FeaturePyramid<float>;
template struct FeaturePyramid<double>;
template FeaturePyramid<double> FeaturePyramid<float>::cast<double>() const;
template FeaturePyramid<float> FeaturePyramid<double>::cast<float>() const;
template FeaturePyramid<float> FeaturePyramid<float>::cast<float>() const;
template FeaturePyramid<double> FeaturePyramid<double>::cast<double>() const;
template FeaturePyramid<float> build_pyramid<float>(const PyramidConfig&);
template FeaturePyramid<double> build_pyramid<double>(const PyramidConfig&);
template Graph<float>::Var sample_features<float>(Graph<float>&, FeaturePyramid<float>&, Graph<float>::Var,
                                                  FeatureKind, bool);
template Graph<double>::Var sample_features<double>(Graph<double>&, FeaturePyramid<double>&, Graph<double>::Var,
                                                    FeatureKind, bool);
template Array<float> densify<float>(const PlaneFactor<float>&, std::size_t);
template Array<double> densify<double>(const PlaneFactor<double>&, std::size_t);
template std::vector<std::filesystem::path> export_plane_images<float>(const FeaturePyramid<float>&,
                                                                       const std::filesystem::path&);
template std::vector<std::filesystem::path> export_plane_images<double>(const FeaturePyramid<double>&,
                                                                        const std::filesystem::path&);

}  // namespace gridnerf
