#include "unidistill/synthscene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "binary_io.hpp"
#include "unidistill/io.hpp"

namespace unidistill {

namespace {

constexpr std::string_view kMagic = "UDSTSCNS";
constexpr std::uint32_t kVersion = 1;
constexpr int kMaxPlacementAttempts = 100;

double half_diagonal(const RotatedBox& b) { return 0.5 * std::hypot(b.length, b.width); }

}  // namespace

void SceneGenParams::validate() const {
  grid.validate();
  if (classes.empty()) throw std::invalid_argument("SceneGenParams: no classes");
  double total = 0.0;
  for (const auto& c : classes) {
    if (!(c.length_min > 0.0) || c.length_max < c.length_min || !(c.width_min > 0.0) || c.width_max < c.width_min) {
      throw std::invalid_argument("SceneGenParams: class '" + c.name + "' has invalid size ranges");
    }
    if (c.weight < 0.0) throw std::invalid_argument("SceneGenParams: negative class weight");
    total += c.weight;
  }
  if (!(total > 0.0)) throw std::invalid_argument("SceneGenParams: class weights must sum to a positive value");
  if (min_boxes > max_boxes) throw std::invalid_argument("SceneGenParams: min_boxes > max_boxes");
  if (lidar_density < 0.0 || lidar_dropout < 0.0 || clutter_density < 0.0 || lidar_jitter < 0.0 ||
      camera_noise < 0.0 || intensity_noise < 0.0) {
    throw std::invalid_argument("SceneGenParams: rates and noise levels must be nonnegative");
  }
  if (camera_blur == 0 || camera_blur % 2 == 0) throw std::invalid_argument("SceneGenParams: camera_blur must be odd");
}

SceneGenParams SceneGenParams::defaults() {
  SceneGenParams p;
  p.classes = {
      {"car", 3.8, 4.8, 1.7, 2.0, 0.5, 0.6},
      {"pedestrian", 0.6, 0.9, 0.5, 0.8, 0.3, 0.3},
      {"truck", 6.0, 8.0, 2.2, 2.6, 0.2, 0.9},
  };
  return p;
}

std::vector<LidarPoint> render_lidar(std::span<const RotatedBox> boxes, const SceneGenParams& params, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, 1.0);
  std::vector<LidarPoint> points;
  auto emit = [&](double x, double y, double reflectance) {
    const double range = std::hypot(x, y);
    const double survive = std::exp(-params.lidar_dropout * range);
    const double u = unit(rng);
    const double jx = jitter(rng) * params.lidar_jitter, jy = jitter(rng) * params.lidar_jitter;
    const double in = std::max(0.0, reflectance + params.intensity_noise * jitter(rng));
    if (u < survive) points.push_back({x + jx, y + jy, in});
  };
  for (const auto& box : boxes) {
    std::poisson_distribution<int> count(params.lidar_density * box.length * box.width);
    const int n = params.lidar_density > 0.0 ? count(rng) : 0;
    const double c = std::cos(box.yaw), s = std::sin(box.yaw);
    const double refl = params.classes.at(static_cast<std::size_t>(box.class_id)).reflectance;
    for (int i = 0; i < n; ++i) {
      const double u = (unit(rng) - 0.5) * box.length, v = (unit(rng) - 0.5) * box.width;
      emit(box.cx + c * u - s * v, box.cy + s * u + c * v, refl);
    }
  }
  const auto& g = params.grid;
  const double area = (g.x_max - g.x_min) * (g.y_max - g.y_min);
  if (params.clutter_density > 0.0) {
    std::poisson_distribution<int> count(params.clutter_density * area);
    const int n = count(rng);
    for (int i = 0; i < n; ++i) {
      const double x = g.x_min + unit(rng) * (g.x_max - g.x_min);
      const double y = g.y_min + unit(rng) * (g.y_max - g.y_min);
      emit(x, y, 0.15);
    }
  }
  return points;
}

std::vector<double> rasterize_boxes(std::span<const RotatedBox> boxes, const GridSpec& grid) {
  std::vector<double> out(grid.cells(), 0.0);
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      const Point2 p = grid_to_world({static_cast<double>(r), static_cast<double>(c)}, grid);
      for (const auto& box : boxes) {
        if (point_in_box(p, box)) {
          out[r * grid.cols + c] = 1.0;
          break;
        }
      }
    }
  }
  return out;
}

std::vector<double> box_blur(std::span<const double> values, std::size_t rows, std::size_t cols, std::size_t width) {
  if (width % 2 == 0) throw std::invalid_argument("box_blur: width must be odd");
  const long half = static_cast<long>(width / 2);
  const double norm = 1.0 / static_cast<double>(width * width);
  std::vector<double> out(rows * cols, 0.0);
  // Scatter form keeps total mass exact away from the borders.
  for (long r = 0; r < static_cast<long>(rows); ++r) {
    for (long c = 0; c < static_cast<long>(cols); ++c) {
      const double v = values[static_cast<std::size_t>(r) * cols + static_cast<std::size_t>(c)];
      if (v == 0.0) continue;
      for (long dr = -half; dr <= half; ++dr) {
        const long rr = r + dr;
        if (rr < 0 || rr >= static_cast<long>(rows)) continue;
        for (long dc = -half; dc <= half; ++dc) {
          const long cc = c + dc;
          if (cc < 0 || cc >= static_cast<long>(cols)) continue;
          out[static_cast<std::size_t>(rr) * cols + static_cast<std::size_t>(cc)] += v * norm;
        }
      }
    }
  }
  return out;
}

std::vector<double> render_camera(std::span<const RotatedBox> boxes, const SceneGenParams& params, Rng& rng) {
  const auto& g = params.grid;
  std::vector<double> obs = box_blur(rasterize_boxes(boxes, g), g.rows, g.cols, params.camera_blur);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t r = 0; r < g.rows; ++r) {
    for (std::size_t c = 0; c < g.cols; ++c) {
      const Point2 p = grid_to_world({static_cast<double>(r), static_cast<double>(c)}, g);
      const double noise = normal(rng) * params.camera_noise * std::hypot(p.x, p.y);
      double& v = obs[r * g.cols + c];
      v = std::max(0.0, v + noise);
    }
  }
  return obs;
}

Scene gen_scene(const SceneGenParams& params, std::uint64_t id) {
  params.validate();
  Rng rng = make_rng(params.seed, {stream::kScene, id});
  const auto& g = params.grid;
  std::uniform_int_distribution<std::size_t> box_count(params.min_boxes, params.max_boxes);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> weights;
  for (const auto& c : params.classes) weights.push_back(c.weight);
  std::discrete_distribution<int> pick_class(weights.begin(), weights.end());

  Scene scene;
  scene.id = id;
  const std::size_t target = box_count(rng);
  for (std::size_t k = 0; k < target; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxPlacementAttempts && !placed; ++attempt) {
      RotatedBox b;
      b.class_id = pick_class(rng);
      const auto& spec = params.classes[static_cast<std::size_t>(b.class_id)];
      b.length = spec.length_min + unit(rng) * (spec.length_max - spec.length_min);
      b.width = spec.width_min + unit(rng) * (spec.width_max - spec.width_min);
      b.yaw = std::numbers::pi - unit(rng) * 2.0 * std::numbers::pi;  // (-pi, pi]
      b.cx = g.x_min + unit(rng) * (g.x_max - g.x_min);
      b.cy = g.y_min + unit(rng) * (g.y_max - g.y_min);
      placed = std::all_of(scene.boxes.begin(), scene.boxes.end(), [&](const RotatedBox& o) {
        return std::hypot(o.cx - b.cx, o.cy - b.cy) >= half_diagonal(o) + half_diagonal(b);
      });
      if (placed) scene.boxes.push_back(b);
    }
    if (!placed) {
      scene.underfilled = scene.boxes.size() < params.min_boxes;
      break;
    }
  }
  scene.lidar_points = render_lidar(scene.boxes, params, rng);
  scene.camera_rows = g.rows;
  scene.camera_cols = g.cols;
  scene.camera_obs = render_camera(scene.boxes, params, rng);
  return scene;
}

std::vector<Scene> gen_scenes(const SceneGenParams& params, std::uint64_t first_id, std::size_t count) {
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_scene(params, first_id + i));
  return out;
}

// --- serialization ---------------------------------------------------------------

std::vector<std::uint8_t> encode_scenes(std::span<const Scene> scenes) {
  detail::ByteWriter w;
  w.raw(kMagic);
  w.u32(kVersion);
  w.u64(scenes.size());
  for (const auto& s : scenes) {
    w.u64(s.id);
    w.u64(s.boxes.size());
    for (const auto& b : s.boxes) {
      for (double v : {b.cx, b.cy, b.length, b.width, b.yaw, 0.0}) w.f64(v);
      w.u32(static_cast<std::uint32_t>(b.class_id));
    }
    w.u64(s.lidar_points.size());
    for (const auto& p : s.lidar_points) {
      w.f64(p.x);
      w.f64(p.y);
      w.f64(p.intensity);
    }
    w.u64(s.camera_rows);
    w.u64(s.camera_cols);
    for (double v : s.camera_obs) w.f64(v);
  }
  return w.bytes();
}

std::vector<Scene> decode_scenes(std::span<const std::uint8_t> bytes, const std::string& source) {
  detail::ByteReader r(bytes, source);
  if (r.raw(kMagic.size()) != kMagic) r.fail("bad magic");
  if (const auto v = r.u32(); v != kVersion) r.fail("unsupported version " + std::to_string(v));
  const std::uint64_t count = r.u64();
  std::vector<Scene> scenes;
  for (std::uint64_t i = 0; i < count; ++i) {
    Scene s;
    s.id = r.u64();
    const std::uint64_t nb = r.u64();
    if (nb > r.remaining() / 52) r.fail("box count exceeds file size");
    for (std::uint64_t k = 0; k < nb; ++k) {
      RotatedBox b;
      b.cx = r.f64();
      b.cy = r.f64();
      b.length = r.f64();
      b.width = r.f64();
      b.yaw = r.f64();
      r.f64();  // reserved
      b.class_id = static_cast<int>(r.u32());
      s.boxes.push_back(b);
    }
    const std::uint64_t np = r.u64();
    if (np > r.remaining() / 24) r.fail("point count exceeds file size");
    s.lidar_points.resize(np);
    for (auto& p : s.lidar_points) {
      p.x = r.f64();
      p.y = r.f64();
      p.intensity = r.f64();
    }
    s.camera_rows = r.u64();
    s.camera_cols = r.u64();
    if (s.camera_cols != 0 && s.camera_rows > r.remaining() / 8 / s.camera_cols) r.fail("camera grid exceeds file size");
    s.camera_obs.resize(s.camera_rows * s.camera_cols);
    for (auto& v : s.camera_obs) v = r.f64();
    scenes.push_back(std::move(s));
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  return scenes;
}

void save_scenes(const std::filesystem::path& path, std::span<const Scene> scenes) {
  write_file_bytes(path, encode_scenes(scenes));
}

std::vector<Scene> load_scenes(const std::filesystem::path& path) {
  return decode_scenes(read_file_bytes(path), "scene file '" + path.string() + "'");
}

}  // namespace unidistill
