// SPDX-License-Identifier: Apache-2.0
#include "gridnerf/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include "gridnerf/errors.hpp"
#include "gridnerf/trainer.hpp"

namespace gridnerf {

namespace {

using Json = nlohmann::ordered_json;

std::filesystem::path manifest_path(const std::filesystem::path& data) {
  return std::filesystem::is_directory(data) ? data / "manifest.json" : data;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

void make_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path.string());
  try {
    return Json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

// JSON has no infinity; PSNR of identical images is written as "inf".
Json metric_value(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

Json metrics_json(const BranchMetrics& m) { return Json{{"psnr", metric_value(m.psnr)}, {"ssim", metric_value(m.ssim)}}; }

Json eval_json(const EvalResult& r) {
  Json j = Json::object();
  if (r.grid) {
    j["grid_branch"] = metrics_json(*r.grid);
    j["grid_branch"]["seconds_per_image"] = r.grid_seconds_per_image;
  }
  if (r.nerf) {
    j["nerf_branch"] = metrics_json(*r.nerf);
    j["nerf_branch"]["seconds_per_image"] = r.nerf_seconds_per_image;
  }
  return j;
}

void require_matching_box(const TrainingState& state, const SceneDataset& data) {
  const Aabb& a = state.scene_box;
  const Aabb& d = data.manifest.aabb;
  if ((a.min - d.min).cwiseAbs().maxCoeff() > 1e-9 || (a.max - d.max).cwiseAbs().maxCoeff() > 1e-9) {
    throw DataError("checkpoint scene box does not match the dataset");
  }
}

struct SynthArgs {
  std::filesystem::path out;
  std::size_t boxes = 12;
  std::uint64_t seed = 0;
  ViewRig rig;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  make_dir(a.out);
  const SyntheticScene scene = generate_synthetic_scene(a.boxes, a.seed);
  const SceneManifest m = write_synthetic_dataset(scene, a.rig, a.out);
  Json echo{{"boxes", a.boxes},
            {"seed", a.seed},
            {"views", a.rig.views},
            {"test_stride", a.rig.test_stride},
            {"width", a.rig.width},
            {"height", a.rig.height}};
  write_text(a.out / "effective_config.json", echo.dump(2) + "\n");
  out << "wrote " << m.frames.size() << " views to " << a.out.string() << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::filesystem::path data;
  std::filesystem::path out;
  std::optional<std::filesystem::path> config;
  std::string preset = "paper";
  std::string stage = "both";
  std::optional<std::filesystem::path> resume;
  std::optional<std::size_t> iters;
  std::optional<std::size_t> threads;
  std::optional<std::uint64_t> seed;
  bool freeze = false;
  bool zero = false;
  bool no_eval = false;
};

TrainConfig resolve_config(const TrainArgs& a) {
  TrainConfig c = a.preset == "benchmark" ? benchmark_config() : TrainConfig{};
  if (a.config) c = train_config_from_json(read_json_file(*a.config), c);
  const bool pretrain = a.stage != "joint";
  const bool joint = a.stage != "pretrain";
  if (a.iters) {
    if (pretrain) c.pretrain_iters = *a.iters;
    if (joint) c.joint_iters = *a.iters;
  }
  if (a.threads) c.threads = *a.threads;
  if (a.seed) c.seed = *a.seed;
  if (a.freeze) c.freeze_grid_features = true;
  if (a.zero) c.zero_grid_features = true;
  c.validate();
  return c;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const TrainConfig config = resolve_config(a);
  const SceneDataset data = load_dataset(manifest_path(a.data));
  make_dir(a.out);
  write_text(a.out / "effective_config.json", to_json(config).dump(2) + "\n");

  TrainOptions o;
  o.output_dir = a.out;
  o.resume = a.resume;
  o.run_pretrain = a.stage != "joint";
  o.run_joint = a.stage != "pretrain";
  o.evaluate_at_end = !a.no_eval && !data.test.empty();
  o.on_log = [&out](const LogEntry& e) { out << format_log_entry(e) << "\n" << std::flush; };
  const TrainReport r = run_training(data, config, o);
  if (o.evaluate_at_end) {
    const std::string metrics = eval_json(r.final_metrics).dump(2) + "\n";
    write_text(a.out / "metrics.json", metrics);
    out << metrics;
  }
  out << "checkpoint " << r.checkpoint.string() << "\n";
  return kExitOk;
}

struct RenderArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  std::filesystem::path out;
  std::string branch = "grid";
  std::string split = "test";
  std::optional<std::size_t> threads;
};

int cmd_render(const RenderArgs& a, std::ostream& out) {
  TrainingState state = load_checkpoint(a.checkpoint);
  if (a.threads) state.config.threads = *a.threads;
  const Branch branch = a.branch == "nerf" ? Branch::kNerf : Branch::kGrid;
  if (branch == Branch::kNerf && !state.model.has_nerf) throw DataError("NeRF branch uninitialized");
  const SceneDataset data = load_dataset(manifest_path(a.data));
  require_matching_box(state, data);
  make_dir(a.out);
  write_text(a.out / "effective_config.json", to_json(state.config).dump(2) + "\n");

  std::vector<std::size_t> frames;
  if (a.split == "train" || a.split == "all") frames.insert(frames.end(), data.train.begin(), data.train.end());
  if (a.split == "test" || a.split == "all") frames.insert(frames.end(), data.test.begin(), data.test.end());
  std::sort(frames.begin(), frames.end());

  std::ostringstream log;
  log << "# file\tbranch\tseconds\n";
  for (const std::size_t f : frames) {
    const Frame& frame = data.manifest.frames[f];
    const auto start = std::chrono::steady_clock::now();
    const Image img = render_image(state.model, frame.camera, data.normalization, state.config, branch);
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const std::string name = std::string(branch_name(branch)) + "_" + frame.file;
    write_png(a.out / name, img);
    char line[256];
    std::snprintf(line, sizeof(line), "%s\t%s\t%.4f", name.c_str(), branch_name(branch), s);
    log << line << "\n";
    out << line << "\n" << std::flush;
  }
  write_text(a.out / "render_log.tsv", log.str());
  return kExitOk;
}

struct EvalArgs {
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> images;
  std::filesystem::path data;
  std::optional<std::filesystem::path> out;
  std::optional<std::size_t> threads;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const SceneDataset data = load_dataset(manifest_path(a.data));
  if (data.test.empty()) throw DataError("dataset has no test views");
  Json j;
  if (a.images) {
    // Score a directory of images named like the test frames against the dataset.
    BranchMetrics m;
    for (const std::size_t f : data.test) {
      const Image pred = read_png(*a.images / data.manifest.frames[f].file);
      m.psnr += psnr(pred, data.images[f]);
      m.ssim += ssim(pred, data.images[f]);
    }
    m.psnr /= static_cast<double>(data.test.size());
    m.ssim /= static_cast<double>(data.test.size());
    j["images"] = metrics_json(m);
  } else {
    TrainingState state = load_checkpoint(*a.checkpoint);
    if (a.threads) state.config.threads = *a.threads;
    require_matching_box(state, data);
    std::optional<std::filesystem::path> image_dir;
    if (a.out) image_dir = *a.out / "renders";
    j = eval_json(evaluate(state.model, data, state.config, image_dir));
  }
  const std::string text = j.dump(2) + "\n";
  if (a.out) {
    make_dir(*a.out);
    write_text(*a.out / "metrics.json", text);
  }
  out << text;
  return kExitOk;
}

int cmd_dump_planes(const std::filesystem::path& checkpoint, const std::filesystem::path& dir, std::ostream& out) {
  const TrainingState state = load_checkpoint(checkpoint);
  const auto written = export_plane_images(state.model.pyramid, dir);
  out << "wrote " << written.size() << " plane images to " << dir.string() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Grid-guided radiance field training and rendering"};
  app.name("gridnerf");
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate the synthetic box scene dataset");
  s->add_option("--out", synth.out, "Output dataset directory")->required();
  s->add_option("--boxes", synth.boxes, "Number of boxes")->capture_default_str();
  s->add_option("--seed", synth.seed, "Scene seed")->capture_default_str();
  s->add_option("--views", synth.rig.views, "Number of views")->capture_default_str();
  s->add_option("--test-stride", synth.rig.test_stride, "Every n-th view is held out")->capture_default_str();
  s->add_option("--width", synth.rig.width, "Image width")->capture_default_str();
  s->add_option("--height", synth.rig.height, "Image height")->capture_default_str();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Pretrain and/or jointly train on a dataset");
  t->add_option("--data", train.data, "Dataset directory or manifest")->required();
  t->add_option("--out", train.out, "Output directory")->required();
  t->add_option("--config", train.config, "JSON config file (unknown keys are errors)");
  t->add_option("--preset", train.preset, "Base configuration")
      ->check(CLI::IsMember({"paper", "benchmark"}))
      ->capture_default_str();
  t->add_option("--stage", train.stage, "Stages to run")
      ->check(CLI::IsMember({"pretrain", "joint", "both"}))
      ->capture_default_str();
  t->add_option("--resume", train.resume, "Checkpoint to resume from");
  t->add_option("--iters", train.iters, "Iterations for each selected stage");
  t->add_option("--threads", train.threads, "Worker threads (1 = deterministic)");
  t->add_option("--seed", train.seed, "Training seed");
  t->add_flag("--freeze-grid-features", train.freeze, "Do not update feature planes");
  t->add_flag("--zero-grid-features", train.zero, "Feed zeros instead of grid features to the NeRF branch");
  t->add_flag("--no-eval", train.no_eval, "Skip held-out evaluation");

  RenderArgs render;
  auto* r = app.add_subcommand("render", "Render dataset poses from a checkpoint");
  r->add_option("--checkpoint", render.checkpoint, "Checkpoint file")->required();
  r->add_option("--data", render.data, "Dataset directory or manifest with poses")->required();
  r->add_option("--out", render.out, "Output directory")->required();
  r->add_option("--branch", render.branch, "Branch to render")
      ->check(CLI::IsMember({"grid", "nerf"}))
      ->capture_default_str();
  r->add_option("--split", render.split, "Poses to render")
      ->check(CLI::IsMember({"train", "test", "all"}))
      ->capture_default_str();
  r->add_option("--threads", render.threads, "Worker threads");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Held-out PSNR/SSIM of a checkpoint or an image directory");
  auto* eck = e->add_option("--checkpoint", eval.checkpoint, "Checkpoint file");
  auto* eim = e->add_option("--images", eval.images, "Directory of images named like the test frames");
  eck->excludes(eim);
  e->add_option("--data", eval.data, "Dataset directory or manifest")->required();
  e->add_option("--out", eval.out, "Directory for metrics.json and renders");
  e->add_option("--threads", eval.threads, "Worker threads");

  std::filesystem::path dump_ckpt;
  std::filesystem::path dump_out;
  auto* d = app.add_subcommand("dump-planes", "Write feature planes as grayscale PNGs");
  d->add_option("--checkpoint", dump_ckpt, "Checkpoint file")->required();
  d->add_option("--out", dump_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
    if (e->parsed() && !eval.checkpoint && !eval.images) throw CLI::RequiredError("--checkpoint or --images");
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (s->parsed()) return cmd_synth(synth, out);
    if (t->parsed()) return cmd_train(train, out);
    if (r->parsed()) return cmd_render(render, out);
    if (e->parsed()) return cmd_eval(eval, out);
    return cmd_dump_planes(dump_ckpt, dump_out, out);
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const DataError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kExitData;
  } catch (const NumericError& ex) {
    err << "numeric error: " << ex.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace gridnerf
