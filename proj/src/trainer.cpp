// SPDX-License-Identifier: Apache-2.0
#include "gridnerf/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <mutex>
#include <thread>

#include "gridnerf/errors.hpp"

namespace gridnerf {

const char* stage_name(Stage s) { return s == Stage::kPretrain ? "pretrain" : "joint"; }

namespace {

template <typename T>
struct GridPart {
  typename Graph<T>::Var target;
  CompositeVars<T> pass;
  typename Graph<T>::Var loss;
};

template <typename T>
GridPart<T> grid_part(Graph<T>& g, Model<T>& model, Stage stage, std::span<const Ray> rays, const Array<T>& targets,
                      const std::vector<std::vector<double>>& coarse, const TrainConfig& config, double normalizer) {
  if (targets.shape() != Shape{rays.size(), 3}) throw ShapeError("batch needs one target color per ray");
  const bool train_grid_heads = stage == Stage::kPretrain || config.loss_weight_grid > 0.0;
  GridPart<T> out;
  out.target = g.constant(targets);
  const auto cs = make_samples<T>(rays, coarse, config.dir_freqs, 0);
  out.pass = grid_pass(g, model, cs, config, {!config.freeze_grid_features, train_grid_heads});
  out.loss = mse_pixel_loss(g, out.pass.color, out.target, normalizer);
  return out;
}

template <typename T>
void add_nerf_part(Graph<T>& g, Model<T>& model, std::span<const Ray> rays, typename Graph<T>::Var target,
                   const std::vector<std::vector<double>>& all, const TrainConfig& config, double normalizer,
                   LossVars<T>& out) {
  const auto fs = make_samples<T>(rays, all, config.dir_freqs, config.pos_freqs);
  auto np = nerf_pass(g, model, fs, config, {!config.freeze_grid_features, true});
  out.nerf = mse_pixel_loss(g, np.color, target, normalizer);
  out.total = g.add(g.scale(out.grid, static_cast<T>(config.loss_weight_grid)),
                    g.scale(out.nerf, static_cast<T>(config.loss_weight_nerf)));
}

}  // namespace

template <typename T>
LossVars<T> build_loss(Graph<T>& g, Model<T>& model, Stage stage, std::span<const Ray> rays, const Array<T>& targets,
                       std::span<const std::uint64_t> ray_ids, const TrainConfig& config, std::uint64_t iteration,
                       double normalizer) {
  if (ray_ids.size() != rays.size()) throw ShapeError("batch needs one id per ray");
  LossVars<T> out;
  out.coarse_ts = coarse_positions(rays, ray_ids, config, iteration, true);
  auto gp = grid_part(g, model, stage, rays, targets, out.coarse_ts, config, normalizer);
  out.grid = gp.loss;
  out.total = gp.loss;
  if (stage == Stage::kPretrain) return out;

  g.forward();
  // guided positions are plain numbers: nothing flows back through the coarse weights
  out.union_ts = union_positions(rays, ray_ids, out.coarse_ts, g.value(gp.pass.weights), config, iteration, true);
  add_nerf_part(g, model, rays, gp.target, out.union_ts, config, normalizer, out);
  return out;
}

template <typename T>
LossVars<T> build_loss_at(Graph<T>& g, Model<T>& model, Stage stage, std::span<const Ray> rays,
                          const Array<T>& targets, const std::vector<std::vector<double>>& coarse_ts,
                          const std::vector<std::vector<double>>& union_ts, const TrainConfig& config,
                          double normalizer) {
  LossVars<T> out;
  out.coarse_ts = coarse_ts;
  auto gp = grid_part(g, model, stage, rays, targets, coarse_ts, config, normalizer);
  out.grid = gp.loss;
  out.total = gp.loss;
  if (stage == Stage::kPretrain) return out;
  out.union_ts = union_ts;
  add_nerf_part(g, model, rays, gp.target, union_ts, config, normalizer, out);
  return out;
}

template <typename T>
ParameterList<T> trainable_parameters(Model<T>& model, Stage stage, const TrainConfig& config) {
  ParameterList<T> out;
  const bool joint = stage == Stage::kJoint;
  const bool planes_used =
      !joint || config.loss_weight_grid > 0.0 || (config.loss_weight_nerf > 0.0 && !config.zero_grid_features);
  if (!config.freeze_grid_features && planes_used) {
    for (auto& p : model.pyramid.parameters()) out.push_back(p);
  }
  if (!joint || config.loss_weight_grid > 0.0) {
    for (auto& p : model.grid_heads.parameters()) out.push_back(p);
  }
  if (joint && config.loss_weight_nerf > 0.0) {
    for (auto& p : model.nerf_parameters()) out.push_back(p);
  }
  return out;
}

namespace {

template <typename T>
struct ChunkResult {
  StepLosses losses;
  std::vector<std::pair<const Array<T>*, Array<T>>> grads;
};

template <typename T>
ChunkResult<T> chunk_gradients(Model<T>& model, Stage stage, std::span<const Ray> rays, const Array<T>& targets,
                               std::span<const std::uint64_t> ids, const TrainConfig& config,
                               std::uint64_t iteration, double normalizer) {
  Graph<T> g;
  auto loss = build_loss(g, model, stage, rays, targets, ids, config, iteration, normalizer);
  g.forward();
  g.backward(loss.total);
  ChunkResult<T> r;
  r.losses.grid = static_cast<double>(g.value(loss.grid).item());
  r.losses.nerf = loss.nerf.valid() ? static_cast<double>(g.value(loss.nerf).item()) : 0.0;
  r.losses.total = static_cast<double>(g.value(loss.total).item());
  for (const auto& pg : g.parameter_gradients()) r.grads.emplace_back(pg.storage, *pg.grad);
  return r;
}

// Runs body(i) for i in [0, n) on up to `threads` workers.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& body) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> workers;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

template <typename T>
BatchGradients<T> batch_gradients(Model<T>& model, Stage stage, std::span<const Ray> rays, const Array<T>& targets,
                                  std::span<const std::uint64_t> ray_ids, const TrainConfig& config,
                                  std::uint64_t iteration) {
  if (stage == Stage::kJoint && !model.has_nerf) throw DataError("NeRF branch uninitialized");
  const std::size_t n = rays.size();
  if (n == 0) throw ShapeError("empty ray batch");
  const std::size_t chunk = config.chunk_rays;
  const std::size_t chunks = (n + chunk - 1) / chunk;
  std::vector<ChunkResult<T>> results(chunks);
  parallel_for(chunks, config.threads, [&](std::size_t c) {
    const std::size_t start = c * chunk;
    const std::size_t len = std::min(chunk, n - start);
    Array<T> t(Shape{len, 3});
    std::copy_n(targets.data().begin() + static_cast<std::ptrdiff_t>(start * 3), len * 3, t.data().begin());
    results[c] = chunk_gradients(model, stage, rays.subspan(start, len), t, ray_ids.subspan(start, len), config,
                                 iteration, static_cast<double>(n));
  });
  BatchGradients<T> out;
  for (auto& r : results) {
    out.losses.grid += r.losses.grid;
    out.losses.nerf += r.losses.nerf;
    out.losses.total += r.losses.total;
    for (auto& [storage, grad] : r.grads) {
      auto it = out.grads.find(storage);
      if (it == out.grads.end()) {
        out.grads.emplace(storage, std::move(grad));
      } else {
        auto dst = it->second.data();
        auto src = grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    }
  }
  return out;
}

StepLosses train_step(Model<float>& model, AdamStates& adam, Stage stage, std::span<const Ray> rays,
                      const Array<float>& targets, std::span<const std::uint64_t> ray_ids, const TrainConfig& config,
                      std::uint64_t iteration, double lr_scale) {
  auto batch = batch_gradients(model, stage, rays, targets, ray_ids, config, iteration);
  if (!std::isfinite(batch.losses.total)) throw NumericError("non-finite loss");
  for (auto& p : trainable_parameters(model, stage, config)) {
    auto it = adam.find(p.name);
    if (it == adam.end()) it = adam.emplace(p.name, AdamState<float>::zeros_like(*p.value)).first;
    const double lr = (p.group == ParamGroup::kPlanes ? config.lr_planes : config.lr_mlp) * lr_scale;
    auto g = batch.grads.find(p.value);
    if (g == batch.grads.end()) {
      adam_step(*p.value, Array<float>(p.value->shape()), it->second, lr);
    } else {
      adam_step(*p.value, g->second, it->second, lr);
    }
  }
  return batch.losses;
}

void save_checkpoint(const std::filesystem::path& path, TrainingState& state) {
  Checkpoint ckpt;
  ckpt.put_text("meta.config", to_json(state.config).dump());
  const Aabb& b = state.scene_box;
  ckpt.put("meta.aabb", Array<double>({2, 3}, std::vector<double>{b.min.x(), b.min.y(), b.min.z(), b.max.x(),
                                                                   b.max.y(), b.max.z()}));
  ckpt.put_int64("meta.progress", {static_cast<std::int64_t>(state.progress.pretrain_done),
                                   static_cast<std::int64_t>(state.progress.joint_done)});
  auto params = state.model.parameters();
  for (auto& p : params) ckpt.put(p.name, *p.value);
  for (auto& p : params) {
    auto it = state.adam.find(p.name);
    if (it == state.adam.end()) continue;
    ckpt.put(p.name + ".adam_m", it->second.m);
    ckpt.put(p.name + ".adam_v", it->second.v);
    ckpt.put_int64(p.name + ".adam_t", {it->second.step});
  }
  ckpt.save(path);
}

TrainingState load_checkpoint(const std::filesystem::path& path) {
  const Checkpoint ckpt = Checkpoint::load(path);
  TrainingState s;
  try {
    s.config = train_config_from_json(nlohmann::ordered_json::parse(ckpt.get_text("meta.config")));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint config is not valid JSON: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint config is invalid: ") + e.what());
  }
  const auto box = ckpt.get<double>("meta.aabb");
  if (box.shape() != Shape{2, 3}) throw DataError("checkpoint aabb must be [2, 3]");
  s.scene_box = {Vec3(box[0], box[1], box[2]), Vec3(box[3], box[4], box[5])};
  const auto progress = ckpt.get_int64("meta.progress");
  if (progress.size() != 2 || progress[0] < 0 || progress[1] < 0) throw DataError("malformed checkpoint progress");
  s.progress = {static_cast<std::size_t>(progress[0]), static_cast<std::size_t>(progress[1])};
  const bool has_nerf = ckpt.contains("nerf_branch.trunk.l0.weight");
  s.model = Model<float>::create(s.config, SceneNormalization(s.scene_box).padded_box(), has_nerf);
  for (auto& p : s.model.parameters()) {
    auto value = ckpt.get<float>(p.name);
    if (value.shape() != p.value->shape()) {
      throw DataError("checkpoint record " + p.name + " has shape " + shape_string(value.shape()) + ", expected " +
                      shape_string(p.value->shape()));
    }
    *p.value = std::move(value);
    if (ckpt.contains(p.name + ".adam_m")) {
      AdamState<float> st;
      st.m = ckpt.get<float>(p.name + ".adam_m");
      st.v = ckpt.get<float>(p.name + ".adam_v");
      const auto t = ckpt.get_int64(p.name + ".adam_t");
      if (st.m.shape() != p.value->shape() || st.v.shape() != p.value->shape() || t.size() != 1) {
        throw DataError("malformed optimizer state for " + p.name);
      }
      st.step = t[0];
      s.adam.emplace(p.name, std::move(st));
    }
  }
  return s;
}

RayPool build_ray_pool(const SceneDataset& dataset, std::span<const std::size_t> frames) {
  RayPool pool;
  std::size_t total = 0;
  for (const std::size_t f : frames) total += dataset.images.at(f).width * dataset.images.at(f).height;
  pool.rays.reserve(total);
  pool.colors = Array<float>(Shape{total, 3});
  std::size_t k = 0;
  for (const std::size_t f : frames) {
    const Camera& cam = dataset.manifest.frames[f].camera;
    const Image& img = dataset.images[f];
    std::vector<std::size_t> pixels(cam.width * cam.height);
    std::iota(pixels.begin(), pixels.end(), 0);
    for (const Ray& r : generate_rays(cam, dataset.normalization, pixels)) pool.rays.push_back(r);
    std::copy(img.rgb.begin(), img.rgb.end(), pool.colors.data().begin() + static_cast<std::ptrdiff_t>(k * 3));
    k += pixels.size();
  }
  return pool;
}

EvalResult evaluate(Model<float>& model, const SceneDataset& dataset, const TrainConfig& config,
                    const std::optional<std::filesystem::path>& image_dir) {
  if (dataset.test.empty()) throw DataError("dataset has no test views");
  if (image_dir) std::filesystem::create_directories(*image_dir);
  EvalResult result;
  std::vector<Branch> branches{Branch::kGrid};
  if (model.has_nerf) branches.push_back(Branch::kNerf);
  for (const Branch b : branches) {
    BranchMetrics m;
    double seconds = 0.0;
    for (const std::size_t f : dataset.test) {
      const Frame& frame = dataset.manifest.frames[f];
      const auto start = std::chrono::steady_clock::now();
      const Image img = render_image(model, frame.camera, dataset.normalization, config, b);
      seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      m.psnr += psnr(img, dataset.images[f]);
      m.ssim += ssim(img, dataset.images[f]);
      if (image_dir) write_png(*image_dir / (std::string(branch_name(b)) + "_" + frame.file), img);
    }
    const double n = static_cast<double>(dataset.test.size());
    m.psnr /= n;
    m.ssim /= n;
    if (b == Branch::kGrid) {
      result.grid = m;
      result.grid_seconds_per_image = seconds / n;
    } else {
      result.nerf = m;
      result.nerf_seconds_per_image = seconds / n;
    }
  }
  return result;
}

std::string format_log_entry(const LogEntry& e) {
  char line[256];
  std::snprintf(line, sizeof(line), "%llu\t%s\t%.9g\t%.9g\t%.9g\t%.3f", static_cast<unsigned long long>(e.iteration),
                stage_name(e.stage), e.losses.grid, e.losses.nerf, e.losses.total, e.wall_seconds);
  return line;
}

namespace {

bool same_architecture(const TrainConfig& a, const TrainConfig& b) {
  return a.plane_resolution == b.plane_resolution && a.density_components == b.density_components &&
         a.appearance_components == b.appearance_components && a.downsample_factors == b.downsample_factors &&
         a.grid_head_width == b.grid_head_width && a.grid_head_layers == b.grid_head_layers &&
         a.nerf_width == b.nerf_width && a.nerf_depth == b.nerf_depth && a.pos_freqs == b.pos_freqs &&
         a.dir_freqs == b.dir_freqs;
}

// Global ray stream: position p of the stream is entry p % N of the epoch-(p / N) permutation.
class RaySchedule {
 public:
  RaySchedule(std::size_t pool_size, std::uint64_t seed) : size_(pool_size), seed_(seed) {}

  std::size_t at(std::uint64_t position) {
    const std::uint64_t epoch = position / size_;
    if (!perm_ready_ || epoch != epoch_) {
      perm_.resize(size_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      auto rng = stream_rng(seed_, 0x5eed, epoch);
      std::shuffle(perm_.begin(), perm_.end(), rng);
      epoch_ = epoch;
      perm_ready_ = true;
    }
    return perm_[position % size_];
  }

 private:
  std::size_t size_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  bool perm_ready_ = false;
  std::vector<std::size_t> perm_;
};

}  // namespace

TrainReport run_training(const SceneDataset& dataset, const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  if (dataset.train.empty()) throw DataError("dataset has no training views");
  std::error_code ec;
  std::filesystem::create_directories(options.output_dir, ec);
  if (ec) throw IoError("cannot create " + options.output_dir.string() + ": " + ec.message());

  TrainingState state;
  if (options.resume) {
    state = load_checkpoint(*options.resume);
    if (!same_architecture(state.config, config)) {
      throw ConfigError("model settings differ from the checkpoint being resumed");
    }
    const Aabb& a = state.scene_box;
    const Aabb& d = dataset.manifest.aabb;
    if ((a.min - d.min).cwiseAbs().maxCoeff() > 1e-9 || (a.max - d.max).cwiseAbs().maxCoeff() > 1e-9) {
      throw DataError("checkpoint scene box does not match the dataset");
    }
  } else {
    state.scene_box = dataset.manifest.aabb;
    state.model = Model<float>::create(config, dataset.normalization.padded_box(), false);
  }
  state.config = config;

  const RayPool pool = build_ray_pool(dataset, dataset.train);
  RaySchedule schedule(pool.rays.size(), config.seed);
  const std::size_t batch = config.batch_rays;
  std::vector<Ray> rays(batch);
  std::vector<std::uint64_t> ids(batch);
  Array<float> targets(Shape{batch, 3});

  const auto log_path = options.output_dir / "train_log.tsv";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw IoError("cannot open " + log_path.string());
  log << "# iteration\tstage\tgrid_loss\tnerf_loss\ttotal_loss\twall_s\n";

  TrainReport report;
  const auto start = std::chrono::steady_clock::now();
  const double total_iters = static_cast<double>(config.pretrain_iters + config.joint_iters);
  auto run_stage = [&](Stage stage, std::size_t& done, std::size_t stage_iters, std::size_t offset) {
    while (done < stage_iters) {
      const std::uint64_t iteration = offset + done;
      for (std::size_t k = 0; k < batch; ++k) {
        const std::size_t r = schedule.at(iteration * batch + k);
        rays[k] = pool.rays[r];
        ids[k] = r;
        for (std::size_t c = 0; c < 3; ++c) targets[k * 3 + c] = pool.colors[r * 3 + c];
      }
      // one exponential decay across both stages
      const double lr_scale = std::pow(config.lr_decay_factor, static_cast<double>(iteration) / total_iters);
      StepLosses losses;
      try {
        losses = train_step(state.model, state.adam, stage, rays, targets, ids, config, iteration, lr_scale);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at iteration " + std::to_string(iteration) + " (" + stage_name(stage) +
                           "): " + e.what());
      }
      const bool logged = done + 1 == stage_iters || (config.log_every > 0 && done % config.log_every == 0);
      ++done;
      if (logged) {
        LogEntry e{iteration, stage, losses,
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
        report.entries.push_back(e);
        log << format_log_entry(e) << '\n' << std::flush;
        if (options.on_log) options.on_log(e);
      }
      if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < stage_iters) {
        save_checkpoint(options.output_dir / "latest.ckpt", state);
      }
    }
  };

  if (options.run_pretrain) {
    run_stage(Stage::kPretrain, state.progress.pretrain_done, config.pretrain_iters, 0);
    save_checkpoint(options.output_dir / "pretrain.ckpt", state);
    save_checkpoint(options.output_dir / "latest.ckpt", state);
    report.checkpoint = options.output_dir / "pretrain.ckpt";
  }
  if (options.run_joint) {
    if (!state.model.has_nerf) state.model.init_nerf(config);
    run_stage(Stage::kJoint, state.progress.joint_done, config.joint_iters, state.progress.pretrain_done);
    save_checkpoint(options.output_dir / "joint.ckpt", state);
    save_checkpoint(options.output_dir / "latest.ckpt", state);
    report.checkpoint = options.output_dir / "joint.ckpt";
  }
  report.progress = state.progress;

  if (options.evaluate_at_end && !dataset.test.empty()) {
    report.final_metrics = evaluate(state.model, dataset, config);
    char line[256];
    const auto& m = report.final_metrics;
    std::snprintf(line, sizeof(line), "# final grid_psnr=%.4f grid_ssim=%.4f", m.grid->psnr, m.grid->ssim);
    log << line;
    if (m.nerf) {
      std::snprintf(line, sizeof(line), " nerf_psnr=%.4f nerf_ssim=%.4f", m.nerf->psnr, m.nerf->ssim);
      log << line;
    }
    log << '\n';
  }
  return report;
}

#define GRIDNERF_INSTANTIATE(T)                                                                                     \
  template LossVars<T> build_loss<T>(Graph<T>&, Model<T>&, Stage, std::span<const Ray>, const Array<T>&,            \
                                     std::span<const std::uint64_t>, const TrainConfig&, std::uint64_t, double);    \
  template LossVars<T> build_loss_at<T>(Graph<T>&, Model<T>&, Stage, std::span<const Ray>, const Array<T>&,         \
                                        const std::vector<std::vector<double>>&,                                    \
                                        const std::vector<std::vector<double>>&, const TrainConfig&, double);       \
  template ParameterList<T> trainable_parameters<T>(Model<T>&, Stage, const TrainConfig&);                          \
  template BatchGradients<T> batch_gradients<T>(Model<T>&, Stage, std::span<const Ray>, const Array<T>&,            \
                                                std::span<const std::uint64_t>, const TrainConfig&, std::uint64_t);

GRIDNERF_INSTANTIATE(float)
GRIDNERF_INSTANTIATE(double)

}  // namespace gridnerf
