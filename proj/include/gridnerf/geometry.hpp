// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <optional>
#include <utility>

namespace gridnerf {

using Vec3 = Eigen::Vector3d;

struct Aabb {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Ones();

  Vec3 extent() const { return max - min; }
  bool contains(const Vec3& p, double tol = 0.0) const {
    return (p.array() >= min.array() - tol).all() && (p.array() <= max.array() + tol).all();
  }
  // Grows every side by `fraction` of the extent along that axis.
  Aabb padded(double fraction) const {
    const Vec3 pad = extent() * fraction;
    return {min - pad, max + pad};
  }
};

// Parametric [t_enter, t_exit] of a ray against a box, or nullopt when it misses.
// Directions may have zero components (slab test with IEEE infinities).
std::optional<std::pair<double, double>> intersect_aabb(const Vec3& origin, const Vec3& direction, const Aabb& box);

// Affine map between world coordinates and the unit cube spanned by a padded scene box.
class SceneNormalization {
 public:
  static constexpr double kPadding = 0.05;

  SceneNormalization() = default;
  explicit SceneNormalization(const Aabb& scene_box);

  const Aabb& scene_box() const { return scene_box_; }
  const Aabb& padded_box() const { return padded_; }
  Vec3 to_unit(const Vec3& world) const;
  Vec3 to_world(const Vec3& unit) const;
  // Linear part applied to direction vectors (not normalized).
  Vec3 scale_direction(const Vec3& world_dir) const;

 private:
  Aabb scene_box_;
  Aabb padded_;
  Vec3 scale_ = Vec3::Ones();
};

}  // namespace gridnerf
