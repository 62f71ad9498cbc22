// SPDX-License-Identifier: Apache-2.0
#include "gridnerf/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gridnerf/errors.hpp"

namespace gridnerf {

namespace {

// Independent seeds for the separately initialized parts of a model, and tags
// separating the coarse and fine sampling streams.
enum SeedTag : std::uint64_t { kPyramidSeed = 1, kGridHeadSeed = 2, kNerfSeed = 3, kCoarseStream = 11, kFineStream = 12 };

std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t tag) { return stream_rng(seed, tag, 0)(); }

}  // namespace

template <typename T>
Model<T> Model<T>::create(const TrainConfig& config, const Aabb& padded_box, bool with_nerf) {
  config.validate();
  Model m;
  PyramidConfig pc;
  pc.base = resolution_for_scene(config.plane_resolution, padded_box);
  pc.density_components = config.density_components;
  pc.appearance_components = config.appearance_components;
  pc.downsample_factors = config.downsample_factors;
  pc.init_scale = config.init_scale;
  pc.seed = derived_seed(config.seed, kPyramidSeed);
  m.pyramid = build_pyramid<T>(pc);
  GridHeadConfig hc{config.grid_head_width, config.grid_head_layers, config.dir_freqs};
  m.grid_heads = GridHeads<T>::create(m.pyramid.feature_dim(FeatureKind::kDensity),
                                      m.pyramid.feature_dim(FeatureKind::kAppearance), hc,
                                      derived_seed(config.seed, kGridHeadSeed));
  if (with_nerf) m.init_nerf(config);
  return m;
}

template <typename T>
void Model<T>::init_nerf(const TrainConfig& config) {
  NerfBranchConfig nc{config.nerf_width, config.nerf_depth, config.pos_freqs, config.dir_freqs};
  nerf = NerfBranch<T>::create(pyramid.feature_dim(FeatureKind::kDensity), pyramid.feature_dim(FeatureKind::kAppearance),
                               nc, derived_seed(config.seed, kNerfSeed));
  has_nerf = true;
}

template <typename T>
ParameterList<T> Model<T>::grid_parameters() {
  ParameterList<T> out = pyramid.parameters();
  for (auto& p : grid_heads.parameters()) out.push_back(p);
  return out;
}

template <typename T>
ParameterList<T> Model<T>::nerf_parameters() {
  if (!has_nerf) return {};
  return nerf.parameters();
}

template <typename T>
ParameterList<T> Model<T>::parameters() {
  ParameterList<T> out = grid_parameters();
  for (auto& p : nerf_parameters()) out.push_back(p);
  return out;
}

const char* branch_name(Branch b) { return b == Branch::kGrid ? "grid" : "nerf"; }

template <typename T>
SampleSet<T> make_samples(std::span<const Ray> rays, const std::vector<std::vector<double>>& ts,
                          std::size_t dir_freqs, std::size_t pos_freqs) {
  if (ts.size() != rays.size() || rays.empty()) throw ShapeError("one sample list per ray is required");
  SampleSet<T> s;
  s.rays = rays.size();
  s.per_ray = ts.front().size();
  const std::size_t total = s.rays * s.per_ray;
  s.points = Array<T>(Shape{total, 3});
  s.ts = Array<T>(Shape{s.rays, s.per_ray});
  s.deltas = Array<T>(Shape{s.rays, s.per_ray});
  Array<T> dirs(Shape{total, 3});
  for (std::size_t r = 0; r < s.rays; ++r) {
    const Ray& ray = rays[r];
    if (ts[r].size() != s.per_ray) throw ShapeError("every ray needs the same number of samples");
    const std::vector<double> d = ray.empty ? std::vector<double>(s.per_ray, 0.0) : sample_deltas(ts[r], ray.t_far);
    for (std::size_t i = 0; i < s.per_ray; ++i) {
      const std::size_t k = r * s.per_ray + i;
      s.ts[k] = static_cast<T>(ts[r][i]);
      s.deltas[k] = static_cast<T>(d[i]);
      const Vec3 p = ray.empty ? Vec3::Constant(0.5) : Vec3(ray.origin + ts[r][i] * ray.direction);
      for (std::size_t c = 0; c < 3; ++c) {
        s.points[k * 3 + c] = static_cast<T>(std::clamp(p[static_cast<Eigen::Index>(c)], 0.0, 1.0));
        dirs[k * 3 + c] = static_cast<T>(ray.direction[static_cast<Eigen::Index>(c)]);
      }
    }
  }
  s.dir_pe = positional_encoding(dirs, dir_freqs);
  if (pos_freqs > 0) s.pos_pe = positional_encoding(s.points, pos_freqs);
  return s;
}

std::vector<std::vector<double>> coarse_positions(std::span<const Ray> rays, std::span<const std::uint64_t> ray_ids,
                                                  const TrainConfig& config, std::uint64_t iteration, bool train) {
  std::vector<std::vector<double>> out(rays.size());
  for (std::size_t r = 0; r < rays.size(); ++r) {
    if (rays[r].empty) {
      out[r].assign(config.n_coarse, 0.0);
      continue;
    }
    auto rng = stream_rng(config.seed ^ kCoarseStream, iteration, ray_ids[r]);
    out[r] = stratified_sample(rays[r], config.n_coarse, train, rng);
  }
  return out;
}

template <typename T>
std::vector<std::vector<double>> union_positions(std::span<const Ray> rays, std::span<const std::uint64_t> ray_ids,
                                                 const std::vector<std::vector<double>>& coarse,
                                                 const Array<T>& coarse_weights, const TrainConfig& config,
                                                 std::uint64_t iteration, bool train) {
  const std::size_t n = config.n_coarse;
  std::vector<std::vector<double>> out(rays.size());
  std::vector<double> w(n);
  for (std::size_t r = 0; r < rays.size(); ++r) {
    if (rays[r].empty) {
      out[r].assign(n + config.n_fine, 0.0);
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) w[i] = std::max(0.0, static_cast<double>(coarse_weights[r * n + i]));
    auto rng = stream_rng(config.seed ^ kFineStream, iteration, ray_ids[r]);
    auto fine = grid_guided_sample(rays[r], coarse[r], w, config.n_fine, rng, {config.guide_floor, !train});
    out[r] = coarse[r];
    out[r].insert(out[r].end(), fine.begin(), fine.end());
    std::sort(out[r].begin(), out[r].end());
  }
  return out;
}

namespace {

template <typename T>
CompositeVars<T> finish(Graph<T>& g, const SampleSet<T>& s, FieldOutput<T> field, const TrainConfig& config) {
  auto sigma = g.reshape(field.sigma, {s.rays, s.per_ray});
  auto rgb = g.reshape(field.rgb, {s.rays, s.per_ray, 3});
  return composite(g, sigma, rgb, s.ts, s.deltas, config.background);
}

}  // namespace

template <typename T>
CompositeVars<T> grid_pass(Graph<T>& g, Model<T>& model, const SampleSet<T>& samples, const TrainConfig& config,
                           const PassOptions& options) {
  auto pts = g.constant(samples.points);
  auto fs = sample_features(g, model.pyramid, pts, FeatureKind::kDensity, options.train_grid);
  auto fc = sample_features(g, model.pyramid, pts, FeatureKind::kAppearance, options.train_grid);
  auto field = model.grid_heads.evaluate(g, fs, fc, g.constant(samples.dir_pe), options.train_heads);
  return finish(g, samples, field, config);
}

template <typename T>
CompositeVars<T> nerf_pass(Graph<T>& g, Model<T>& model, const SampleSet<T>& samples, const TrainConfig& config,
                           const PassOptions& options) {
  if (!model.has_nerf) throw DataError("NeRF branch uninitialized");
  typename Graph<T>::Var fs;
  typename Graph<T>::Var fc;
  const std::size_t total = samples.rays * samples.per_ray;
  if (config.zero_grid_features) {
    fs = g.constant(Array<T>(Shape{total, model.pyramid.feature_dim(FeatureKind::kDensity)}));
    fc = g.constant(Array<T>(Shape{total, model.pyramid.feature_dim(FeatureKind::kAppearance)}));
  } else {
    auto pts = g.constant(samples.points);
    fs = sample_features(g, model.pyramid, pts, FeatureKind::kDensity, options.train_grid);
    fc = sample_features(g, model.pyramid, pts, FeatureKind::kAppearance, options.train_grid);
  }
  auto field = model.nerf.evaluate(g, fs, fc, g.constant(samples.pos_pe), g.constant(samples.dir_pe),
                                   options.train_heads);
  return finish(g, samples, field, config);
}

template <typename T>
double mse_pixel_loss(const Array<T>& pred, const Array<T>& truth) {
  if (pred.shape() != truth.shape() || pred.rank() != 2 || pred.dim(1) != 3) {
    throw ShapeError("mse_pixel_loss expects matching [R, 3] colors, got " + shape_string(pred.shape()) + " and " +
                     shape_string(truth.shape()));
  }
  if (pred.dim(0) == 0) throw ShapeError("mse_pixel_loss of zero rays");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(truth[i]);
    sum += d * d;
  }
  return sum / static_cast<double>(pred.dim(0));
}

template <typename T>
typename Graph<T>::Var mse_pixel_loss(Graph<T>& g, typename Graph<T>::Var pred, typename Graph<T>::Var truth,
                                      double normalizer) {
  if (g.shape(pred) != g.shape(truth)) throw ShapeError("mse_pixel_loss expects matching shapes");
  auto d = g.sub(pred, truth);
  return g.scale(g.sum(g.mul(d, d)), static_cast<T>(1.0 / normalizer));
}

template <typename T>
Array<T> render_rays(Model<T>& model, std::span<const Ray> rays, const TrainConfig& config, Branch branch) {
  if (branch == Branch::kNerf && !model.has_nerf) throw DataError("NeRF branch uninitialized");
  Array<T> colors(Shape{rays.size(), 3});
  const PassOptions frozen{false, false};
  std::vector<std::uint64_t> ids;
  for (std::size_t start = 0; start < rays.size(); start += config.chunk_rays) {
    const std::size_t n = std::min(config.chunk_rays, rays.size() - start);
    const auto chunk = rays.subspan(start, n);
    ids.resize(n);
    std::iota(ids.begin(), ids.end(), start);
    const auto coarse = coarse_positions(chunk, ids, config, 0, false);
    Graph<T> g;
    const auto cs = make_samples<T>(chunk, coarse, config.dir_freqs, 0);
    auto grid = grid_pass(g, model, cs, config, frozen);
    g.forward();
    auto color = grid.color;
    if (branch == Branch::kNerf) {
      const auto all = union_positions(chunk, ids, coarse, g.value(grid.weights), config, 0, false);
      const auto fs = make_samples<T>(chunk, all, config.dir_freqs, config.pos_freqs);
      color = nerf_pass(g, model, fs, config, frozen).color;
      g.forward();
    }
    const auto& v = g.value(color);
    std::copy(v.data().begin(), v.data().end(), colors.data().begin() + static_cast<std::ptrdiff_t>(start * 3));
  }
  return colors;
}

template <typename T>
Image render_image(Model<T>& model, const Camera& camera, const SceneNormalization& norm, const TrainConfig& config,
                   Branch branch) {
  camera.validate();
  std::vector<std::size_t> pixels(camera.width * camera.height);
  std::iota(pixels.begin(), pixels.end(), 0);
  const auto rays = generate_rays(camera, norm, pixels);
  const auto colors = render_rays(model, std::span<const Ray>(rays), config, branch);
  Image img(camera.width, camera.height);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<float>(colors[i]);
  return img;
}

#define GRIDNERF_INSTANTIATE(T)                                                                                     \
  template struct Model<T>;                                                                                         \
  template SampleSet<T> make_samples<T>(std::span<const Ray>, const std::vector<std::vector<double>>&, std::size_t, \
                                        std::size_t);                                                               \
  template std::vector<std::vector<double>> union_positions<T>(                                                     \
      std::span<const Ray>, std::span<const std::uint64_t>, const std::vector<std::vector<double>>&, const Array<T>&, \
      const TrainConfig&, std::uint64_t, bool);                                                                     \
  template CompositeVars<T> grid_pass<T>(Graph<T>&, Model<T>&, const SampleSet<T>&, const TrainConfig&,            \
                                         const PassOptions&);                                                       \
  template CompositeVars<T> nerf_pass<T>(Graph<T>&, Model<T>&, const SampleSet<T>&, const TrainConfig&,            \
                                         const PassOptions&);                                                       \
  template double mse_pixel_loss<T>(const Array<T>&, const Array<T>&);                                              \
  template Graph<T>::Var mse_pixel_loss<T>(Graph<T>&, Graph<T>::Var, Graph<T>::Var, double);                        \
  template Array<T> render_rays<T>(Model<T>&, std::span<const Ray>, const TrainConfig&, Branch);                    \
  template Image render_image<T>(Model<T>&, const Camera&, const SceneNormalization&, const TrainConfig&, Branch);

GRIDNERF_INSTANTIATE(float)
GRIDNERF_INSTANTIATE(double)

}  // namespace gridnerf
