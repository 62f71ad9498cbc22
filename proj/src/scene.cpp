// SPDX-License-Identifier: Apache-2.0
#include "gridnerf/scene.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "gridnerf/errors.hpp"

namespace gridnerf {

using ordered_json = nlohmann::ordered_json;

Aabb SyntheticScene::bounds() const {
  return {Vec3(-layout.half_width, -layout.half_width, 0.0), Vec3(layout.half_width, layout.half_width, layout.ceiling)};
}

SyntheticScene generate_synthetic_scene(std::size_t n_boxes, std::uint64_t seed, const SceneLayout& layout) {
  if (layout.max_height > layout.ceiling || layout.max_footprint > 2.0 * layout.half_width) {
    throw ConfigError("box size limits exceed the scene extent");
  }
  SyntheticScene scene;
  scene.seed = seed;
  scene.layout = layout;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto in = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  scene.ground_color = {in(0.3, 0.6), in(0.3, 0.6), in(0.3, 0.6)};

  std::size_t attempts = 0;
  while (scene.boxes.size() < n_boxes) {
    if (attempts++ >= layout.max_attempts) {
      throw ConfigError("could not place " + std::to_string(n_boxes) + " non-overlapping boxes in " +
                        std::to_string(layout.max_attempts) + " attempts");
    }
    const double sx = in(layout.min_footprint, layout.max_footprint);
    const double sy = in(layout.min_footprint, layout.max_footprint);
    const double h = in(layout.min_height, layout.max_height);
    const double x0 = in(-layout.half_width, layout.half_width - sx);
    const double y0 = in(-layout.half_width, layout.half_width - sy);
    SceneBox box{{Vec3(x0, y0, 0.0), Vec3(x0 + sx, y0 + sy, h)}, {in(0.1, 0.9), in(0.1, 0.9), in(0.1, 0.9)}};
    const bool clear = std::none_of(scene.boxes.begin(), scene.boxes.end(), [&](const SceneBox& other) {
      return box.bounds.min.x() < other.bounds.max.x() + layout.gap &&
             other.bounds.min.x() < box.bounds.max.x() + layout.gap &&
             box.bounds.min.y() < other.bounds.max.y() + layout.gap &&
             other.bounds.min.y() < box.bounds.max.y() + layout.gap;
    });
    if (clear) scene.boxes.push_back(box);
  }
  return scene;
}

Rgb trace_scene(const SyntheticScene& scene, const Vec3& origin, const Vec3& direction) {
  double best = std::numeric_limits<double>::infinity();
  Rgb color = scene.background;
  for (const SceneBox& box : scene.boxes) {
    const auto hit = intersect_aabb(origin, direction, box.bounds);
    if (hit && hit->second >= 0.0) {
      const double t = std::max(hit->first, 0.0);
      if (t < best) {
        best = t;
        color = box.color;
      }
    }
  }
  if (direction.z() < 0.0) {
    const double t = -origin.z() / direction.z();
    const Vec3 p = origin + t * direction;
    const double hw = scene.layout.half_width;
    if (t >= 0.0 && t < best && std::abs(p.x()) <= hw && std::abs(p.y()) <= hw) color = scene.ground_color;
  }
  return color;
}

Image oracle_render(const SyntheticScene& scene, const Camera& camera) {
  camera.validate();
  Image image(camera.width, camera.height);
  const Vec3 eye = camera.position();
  for (std::size_t y = 0; y < camera.height; ++y) {
    for (std::size_t x = 0; x < camera.width; ++x) {
      const Rgb c = trace_scene(scene, eye, camera.direction(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5));
      for (std::size_t ch = 0; ch < 3; ++ch) image.at(x, y, ch) = static_cast<float>(c[ch]);
    }
  }
  return image;
}

Camera look_at_camera(const Vec3& eye, const Vec3& target, std::size_t width, std::size_t height,
                      double fov_degrees, double near, double far) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(Vec3::UnitZ());
  if (right.norm() < 1e-9) right = Vec3::UnitX();
  right.normalize();
  const Vec3 down = forward.cross(right);
  Camera cam;
  cam.width = width;
  cam.height = height;
  cam.fx = cam.fy = 0.5 * static_cast<double>(width) / std::tan(0.5 * fov_degrees * std::numbers::pi / 180.0);
  cam.cx = 0.5 * static_cast<double>(width);
  cam.cy = 0.5 * static_cast<double>(height);
  cam.near = near;
  cam.far = far;
  for (int r = 0; r < 3; ++r) {
    cam.c2w[r * 4 + 0] = right[r];
    cam.c2w[r * 4 + 1] = down[r];
    cam.c2w[r * 4 + 2] = forward[r];
    cam.c2w[r * 4 + 3] = eye[r];
  }
  return cam;
}

std::vector<Camera> hemisphere_cameras(const ViewRig& rig) {
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  const double lo = std::sin(rig.min_elevation_deg * std::numbers::pi / 180.0);
  const double hi = std::sin(rig.max_elevation_deg * std::numbers::pi / 180.0);
  std::vector<Camera> cams;
  for (std::size_t i = 0; i < rig.views; ++i) {
    // equal-area spacing in sin(elevation)
    const double s = lo + (hi - lo) * (static_cast<double>(i) + 0.5) / static_cast<double>(rig.views);
    const double c = std::sqrt(1.0 - s * s);
    const double az = golden * static_cast<double>(i);
    const Vec3 target(0.0, 0.0, rig.target_height);
    const Vec3 eye = target + rig.radius * Vec3(c * std::cos(az), c * std::sin(az), s);
    cams.push_back(look_at_camera(eye, target, rig.width, rig.height, rig.fov_deg, rig.near, rig.far));
  }
  return cams;
}

namespace {

ordered_json vec_json(const Vec3& v) { return ordered_json::array({v.x(), v.y(), v.z()}); }

Vec3 vec_from(const ordered_json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw DataError(what + " must be an array of 3 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

template <typename T>
T required(const ordered_json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw DataError(where + " is missing \"" + key + "\"");
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + " field \"" + key + "\" has the wrong type");
  }
}

}  // namespace

std::string manifest_to_json(const SceneManifest& manifest) {
  ordered_json root;
  root["aabb"] = ordered_json::array({vec_json(manifest.aabb.min), vec_json(manifest.aabb.max)});
  root["frames"] = ordered_json::array();
  for (const Frame& f : manifest.frames) {
    ordered_json j;
    j["file"] = f.file;
    j["fx"] = f.camera.fx;
    j["fy"] = f.camera.fy;
    j["cx"] = f.camera.cx;
    j["cy"] = f.camera.cy;
    j["w"] = f.camera.width;
    j["h"] = f.camera.height;
    j["c2w"] = f.camera.c2w;
    j["near"] = f.camera.near;
    j["far"] = f.camera.far;
    j["split"] = f.split;
    root["frames"].push_back(std::move(j));
  }
  return root.dump(2) + "\n";
}

SceneManifest manifest_from_json(const std::string& text) {
  ordered_json root;
  try {
    root = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw DataError("manifest must be a JSON object");
  SceneManifest m;
  const auto aabb = required<ordered_json>(root, "aabb", "manifest");
  if (!aabb.is_array() || aabb.size() != 2) throw DataError("manifest aabb must be [[min], [max]]");
  m.aabb = {vec_from(aabb[0], "aabb min"), vec_from(aabb[1], "aabb max")};
  if (!(m.aabb.min.array() < m.aabb.max.array()).all()) throw DataError("manifest aabb min must be below max");
  const auto frames = required<ordered_json>(root, "frames", "manifest");
  if (!frames.is_array()) throw DataError("manifest frames must be an array");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const std::string where = "frame " + std::to_string(i);
    const ordered_json& j = frames[i];
    if (!j.is_object()) throw DataError(where + " must be an object");
    Frame f;
    f.file = required<std::string>(j, "file", where);
    f.camera.fx = required<double>(j, "fx", where);
    f.camera.fy = required<double>(j, "fy", where);
    f.camera.cx = required<double>(j, "cx", where);
    f.camera.cy = required<double>(j, "cy", where);
    f.camera.width = required<std::size_t>(j, "w", where);
    f.camera.height = required<std::size_t>(j, "h", where);
    const auto c2w = required<std::vector<double>>(j, "c2w", where);
    if (c2w.size() != 16) throw DataError(where + " c2w must have 16 entries");
    std::copy(c2w.begin(), c2w.end(), f.camera.c2w.begin());
    f.camera.near = required<double>(j, "near", where);
    f.camera.far = required<double>(j, "far", where);
    f.split = required<std::string>(j, "split", where);
    if (f.split != "train" && f.split != "test") throw DataError(where + " split must be \"train\" or \"test\"");
    try {
      f.camera.validate();
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    m.frames.push_back(std::move(f));
  }
  return m;
}

void write_manifest(const std::filesystem::path& path, const SceneManifest& manifest) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << manifest_to_json(manifest);
  if (!out) throw IoError("failed writing " + path.string());
}

SceneManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return manifest_from_json(buf.str());
}

SceneDataset load_dataset(const std::filesystem::path& manifest_path) {
  SceneDataset ds;
  ds.root = manifest_path.parent_path();
  ds.manifest = read_manifest(manifest_path);
  ds.normalization = SceneNormalization(ds.manifest.aabb);
  for (std::size_t i = 0; i < ds.manifest.frames.size(); ++i) {
    const Frame& f = ds.manifest.frames[i];
    Image img = read_png(ds.root / f.file);
    if (img.width != f.camera.width || img.height != f.camera.height) {
      throw DataError(f.file + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                      " but the manifest declares " + std::to_string(f.camera.width) + "x" +
                      std::to_string(f.camera.height));
    }
    ds.images.push_back(std::move(img));
    (f.split == "train" ? ds.train : ds.test).push_back(i);
  }
  return ds;
}

SceneManifest write_synthetic_dataset(const SyntheticScene& scene, const ViewRig& rig,
                                      const std::filesystem::path& directory) {
  if (rig.test_stride == 0) throw ConfigError("test stride must be positive");
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  if (ec) throw IoError("cannot create " + directory.string() + ": " + ec.message());
  SceneManifest m;
  m.aabb = scene.bounds();
  const auto cams = hemisphere_cameras(rig);
  for (std::size_t i = 0; i < cams.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "view_%03zu.png", i);
    write_png(directory / name, oracle_render(scene, cams[i]));
    m.frames.push_back({name, cams[i], i % rig.test_stride == 0 ? "test" : "train"});
  }
  write_manifest(directory / "manifest.json", m);
  return m;
}

namespace {

void check_same_shape(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height || a.rgb.size() != b.rgb.size()) {
    throw ShapeError("image shapes differ: " + std::to_string(a.width) + "x" + std::to_string(a.height) + " vs " +
                     std::to_string(b.width) + "x" + std::to_string(b.height));
  }
}

std::vector<double> luma(const Image& img) {
  std::vector<double> y(img.width * img.height);
  for (std::size_t p = 0; p < y.size(); ++p) {
    y[p] = 0.299 * img.rgb[3 * p] + 0.587 * img.rgb[3 * p + 1] + 0.114 * img.rgb[3 * p + 2];
  }
  return y;
}

// Valid-region separable filtering with a normalized 1D kernel.
std::vector<double> filter_valid(const std::vector<double>& src, std::size_t w, std::size_t h,
                                 const std::vector<double>& k) {
  const std::size_t n = k.size();
  const std::size_t ow = w - n + 1;
  const std::size_t oh = h - n + 1;
  std::vector<double> rows(ow * h, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x)
      for (std::size_t i = 0; i < n; ++i) rows[y * ow + x] += k[i] * src[y * w + x + i];
  std::vector<double> out(ow * oh, 0.0);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x)
      for (std::size_t i = 0; i < n; ++i) out[y * ow + x] += k[i] * rows[(y + i) * ow + x];
  return out;
}

}  // namespace

double psnr(const Image& pred, const Image& truth) {
  check_same_shape(pred, truth);
  if (pred.rgb.empty()) throw ShapeError("psnr of empty images");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.rgb.size(); ++i) {
    const double d = static_cast<double>(pred.rgb[i]) - static_cast<double>(truth.rgb[i]);
    sum += d * d;
  }
  const double mse = sum / static_cast<double>(pred.rgb.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

double ssim(const Image& pred, const Image& truth) {
  constexpr std::size_t kWindow = 11;
  constexpr double kSigma = 1.5;
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  check_same_shape(pred, truth);
  if (pred.width < kWindow || pred.height < kWindow) throw ShapeError("ssim needs images of at least 11x11");
  std::vector<double> kernel(kWindow);
  double ksum = 0.0;
  for (std::size_t i = 0; i < kWindow; ++i) {
    const double x = static_cast<double>(i) - 5.0;
    kernel[i] = std::exp(-x * x / (2.0 * kSigma * kSigma));
    ksum += kernel[i];
  }
  for (double& k : kernel) k /= ksum;

  const auto a = luma(pred);
  const auto b = luma(truth);
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const std::size_t w = pred.width;
  const std::size_t h = pred.height;
  const auto mu_a = filter_valid(a, w, h, kernel);
  const auto mu_b = filter_valid(b, w, h, kernel);
  const auto e_aa = filter_valid(aa, w, h, kernel);
  const auto e_bb = filter_valid(bb, w, h, kernel);
  const auto e_ab = filter_valid(ab, w, h, kernel);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double va = e_aa[i] - mu_a[i] * mu_a[i];
    const double vb = e_bb[i] - mu_b[i] * mu_b[i];
    const double cov = e_ab[i] - mu_a[i] * mu_b[i];
    total += ((2.0 * mu_a[i] * mu_b[i] + kC1) * (2.0 * cov + kC2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kC1) * (va + vb + kC2));
  }
  return total / static_cast<double>(mu_a.size());
}

}  // namespace gridnerf
