// SPDX-License-Identifier: Apache-2.0
#include "gridnerf/renderer.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "gridnerf/errors.hpp"

namespace gridnerf {

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0) || !std::isfinite(fx) || !std::isfinite(fy)) {
    throw DataError("camera focal lengths must be positive and finite");
  }
  if (!std::isfinite(cx) || !std::isfinite(cy)) throw DataError("camera principal point must be finite");
  if (width == 0 || height == 0) throw DataError("camera image size must be positive");
  if (!(near >= 0.0) || !(near < far) || !std::isfinite(far)) {
    throw DataError("camera needs 0 <= near < far, got near=" + std::to_string(near) + " far=" + std::to_string(far));
  }
  for (const double v : c2w) {
    if (!std::isfinite(v)) throw DataError("camera pose has non-finite entries");
  }
  const Eigen::Matrix3d r = rotation();
  if ((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-4) {
    throw DataError("camera rotation is not orthonormal");
  }
  if (r.determinant() <= 0.0) throw DataError("camera rotation is a reflection");
  if (std::abs(c2w[12]) > 1e-9 || std::abs(c2w[13]) > 1e-9 || std::abs(c2w[14]) > 1e-9 ||
      std::abs(c2w[15] - 1.0) > 1e-9) {
    throw DataError("camera pose bottom row must be [0, 0, 0, 1]");
  }
}

Eigen::Matrix3d Camera::rotation() const {
  Eigen::Matrix3d r;
  r << c2w[0], c2w[1], c2w[2], c2w[4], c2w[5], c2w[6], c2w[8], c2w[9], c2w[10];
  return r;
}

Vec3 Camera::position() const { return {c2w[3], c2w[7], c2w[11]}; }

Vec3 Camera::direction(double u, double v) const {
  const Vec3 d_cam((u - cx) / fx, (v - cy) / fy, 1.0);
  return (rotation() * d_cam).normalized();
}

Ray normalized_ray(const Camera& camera, const SceneNormalization& norm, double u, double v) {
  Ray ray;
  ray.origin = norm.to_unit(camera.position());
  const Vec3 scaled = norm.scale_direction(camera.direction(u, v));
  const double stretch = scaled.norm();
  ray.direction = scaled / stretch;
  const Aabb unit{Vec3::Zero(), Vec3::Ones()};
  const auto hit = intersect_aabb(ray.origin, ray.direction, unit);
  if (!hit) return ray;
  ray.t_near = std::max(camera.near * stretch, hit->first);
  ray.t_far = std::min(camera.far * stretch, hit->second);
  ray.empty = !(ray.t_near < ray.t_far);
  if (ray.empty) ray.t_near = ray.t_far = 0.0;
  return ray;
}

std::vector<Ray> generate_rays(const Camera& camera, const SceneNormalization& norm,
                               std::span<const std::size_t> pixel_indices) {
  std::vector<Ray> rays;
  rays.reserve(pixel_indices.size());
  const std::size_t count = camera.width * camera.height;
  for (const std::size_t p : pixel_indices) {
    if (p >= count) throw ShapeError("pixel index " + std::to_string(p) + " outside the image");
    const double u = static_cast<double>(p % camera.width) + 0.5;
    const double v = static_cast<double>(p / camera.width) + 0.5;
    rays.push_back(normalized_ray(camera, norm, u, v));
  }
  return rays;
}

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  return std::mt19937_64(splitmix(splitmix(splitmix(seed) ^ a) ^ b));
}

std::vector<double> stratified_sample(const Ray& ray, std::size_t n, bool jitter, std::mt19937_64& rng) {
  if (ray.empty) throw NumericError("cannot sample an empty ray");
  if (n == 0) throw ConfigError("sample count must be positive");
  const double width = (ray.t_far - ray.t_near) / static_cast<double>(n);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> ts(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double offset = jitter ? unit(rng) : 0.5;
    ts[i] = std::min(ray.t_near + (static_cast<double>(i) + offset) * width, ray.t_far);
  }
  return ts;
}

std::vector<double> grid_guided_sample(const Ray& ray, std::span<const double> coarse_ts,
                                       std::span<const double> coarse_weights, std::size_t n_fine,
                                       std::mt19937_64& rng, const GuidedSampleOptions& options) {
  if (coarse_ts.size() != coarse_weights.size() || coarse_ts.empty()) {
    throw ShapeError("guided sampling needs matching, non-empty coarse samples and weights");
  }
  if (options.floor < 0.0) throw ConfigError("guided sampling floor must be non-negative");
  if (n_fine == 0) return {};
  double total = 0.0;
  for (const double w : coarse_weights) {
    if (!(w >= 0.0)) throw NumericError("coarse weights must be non-negative");
    total += w;
  }
  if (!(total > 0.0)) return stratified_sample(ray, n_fine, !options.deterministic, rng);

  const std::size_t bins = coarse_ts.size();
  std::vector<double> edges(bins + 1);
  edges[0] = ray.t_near;
  edges[bins] = ray.t_far;
  for (std::size_t i = 1; i < bins; ++i) edges[i] = 0.5 * (coarse_ts[i - 1] + coarse_ts[i]);
  std::vector<double> cdf(bins + 1, 0.0);
  for (std::size_t i = 0; i < bins; ++i) cdf[i + 1] = cdf[i] + coarse_weights[i] + options.floor;
  const double mass = cdf[bins];
  for (double& c : cdf) c /= mass;
  cdf[bins] = 1.0;

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> ts(n_fine);
  for (std::size_t i = 0; i < n_fine; ++i) {
    const double u = options.deterministic ? (static_cast<double>(i) + 0.5) / static_cast<double>(n_fine) : unit(rng);
    // first bin whose upper cdf exceeds u; never a zero-mass bin
    const auto it = std::upper_bound(cdf.begin() + 1, cdf.end(), u);
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()) - 1, bins - 1);
    const double span = cdf[k + 1] - cdf[k];
    const double frac = span > 0.0 ? (u - cdf[k]) / span : 0.5;
    ts[i] = std::clamp(edges[k] + frac * (edges[k + 1] - edges[k]), edges[k], edges[k + 1]);
  }
  std::sort(ts.begin(), ts.end());
  return ts;
}

std::vector<double> sample_deltas(std::span<const double> ts, double t_far) {
  std::vector<double> d(ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    d[i] = std::max(0.0, (i + 1 < ts.size() ? ts[i + 1] : t_far) - ts[i]);
  }
  return d;
}

template <typename T>
CompositeVars<T> composite(Graph<T>& g, typename Graph<T>::Var sigma, typename Graph<T>::Var rgb,
                           const Array<T>& ts, const Array<T>& deltas, const Rgb& background) {
  const Shape s = g.shape(sigma);
  if (s.size() != 2) throw ShapeError("composite expects sigma [R, N], got " + shape_string(s));
  const std::size_t r = s[0];
  const std::size_t n = s[1];
  if (g.shape(rgb) != Shape{r, n, 3}) throw ShapeError("composite expects rgb " + shape_string({r, n, 3}));
  if (ts.shape() != s || deltas.shape() != s) throw ShapeError("composite expects ts and deltas shaped like sigma");

  auto sd = g.mul(sigma, g.constant(deltas));
  auto trans = g.exp(g.neg(g.cumsum_exclusive(sd, 1)));
  auto alpha = g.add_scalar(g.neg(g.exp(g.neg(sd))), T{1});
  auto w = g.mul(trans, alpha);
  auto shaded = g.reshape(g.sum_axis(g.mul(g.reshape(w, {r, n, 1}), rgb), 1), {r, 3});
  auto t_final = g.exp(g.neg(g.sum_axis(sd, 1)));
  Array<T> bg(Shape{1, 3});
  for (std::size_t c = 0; c < 3; ++c) bg[c] = static_cast<T>(background[c]);
  auto color = g.add(shaded, g.mul(t_final, g.constant(std::move(bg))));
  auto depth = g.sum_axis(g.mul(w, g.constant(ts)), 1);
  return {color, w, t_final, depth};
}

RenderOutput composite(std::span<const double> sigmas, std::span<const Rgb> colors, std::span<const double> ts,
                       double t_far, const Rgb& background) {
  const std::size_t n = sigmas.size();
  if (colors.size() != n || ts.size() != n || n == 0) {
    throw ShapeError("composite needs equal, non-zero counts of sigmas, colors and sample positions");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!(sigmas[i] >= 0.0)) throw NumericError("composite requires non-negative densities");
    if (i > 0 && ts[i] < ts[i - 1]) throw NumericError("composite requires sorted sample positions");
  }
  if (t_far < ts[n - 1]) throw NumericError("t_far lies before the last sample");

  Graph<double> g;
  Array<double> rgb(Shape{1, n, 3});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) rgb[i * 3 + c] = colors[i][c];
  const auto deltas = sample_deltas(ts, t_far);
  auto out = composite(g, g.constant(Array<double>({1, n}, std::vector<double>(sigmas.begin(), sigmas.end()))),
                       g.constant(std::move(rgb)), Array<double>({1, n}, std::vector<double>(ts.begin(), ts.end())),
                       Array<double>({1, n}, deltas), background);
  g.forward();
  RenderOutput result;
  for (std::size_t c = 0; c < 3; ++c) result.color[c] = g.value(out.color)[c];
  result.weights = g.value(out.weights).storage();
  result.transmittance = g.value(out.transmittance).item();
  result.depth = g.value(out.depth).item();
  return result;
}

template CompositeVars<float> composite<float>(Graph<float>&, Graph<float>::Var, Graph<float>::Var,
                                               const Array<float>&, const Array<float>&, const Rgb&);
template CompositeVars<double> composite<double>(Graph<double>&, Graph<double>::Var, Graph<double>::Var,
                                                 const Array<double>&, const Array<double>&, const Rgb&);

}  // namespace gridnerf
