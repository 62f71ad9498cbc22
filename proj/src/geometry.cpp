// SPDX-License-Identifier: Apache-2.0
#include "gridnerf/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gridnerf/errors.hpp"

namespace gridnerf {

std::optional<std::pair<double, double>> intersect_aabb(const Vec3& origin, const Vec3& direction, const Aabb& box) {
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (direction[a] == 0.0) {
      if (origin[a] < box.min[a] || origin[a] > box.max[a]) return std::nullopt;
      continue;
    }
    const double inv = 1.0 / direction[a];
    double near = (box.min[a] - origin[a]) * inv;
    double far = (box.max[a] - origin[a]) * inv;
    if (near > far) std::swap(near, far);
    t0 = std::max(t0, near);
    t1 = std::min(t1, far);
  }
  if (t0 > t1) return std::nullopt;
  return std::make_pair(t0, t1);
}

SceneNormalization::SceneNormalization(const Aabb& scene_box) : scene_box_(scene_box), padded_(scene_box.padded(kPadding)) {
  const Vec3 ext = padded_.extent();
  if ((ext.array() <= 0.0).any()) throw DataError("scene bounding box must have positive extent on every axis");
  scale_ = ext.cwiseInverse();
}

Vec3 SceneNormalization::to_unit(const Vec3& world) const { return (world - padded_.min).cwiseProduct(scale_); }

Vec3 SceneNormalization::to_world(const Vec3& unit) const {
  return padded_.min + unit.cwiseProduct(padded_.extent());
}

Vec3 SceneNormalization::scale_direction(const Vec3& world_dir) const { return world_dir.cwiseProduct(scale_); }

}  // namespace gridnerf
