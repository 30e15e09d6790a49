#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "unidistill/geometry.hpp"
#include "unidistill/rng.hpp"
#include "unidistill/scene.hpp"

namespace unidistill {

struct ClassSpec {
  std::string name;
  double length_min = 1.0, length_max = 1.0;  // m
  double width_min = 1.0, width_max = 1.0;    // m
  double weight = 1.0;                        // relative sampling frequency
  double reflectance = 0.5;                   // mean lidar intensity of the surface
};

struct SceneGenParams {
  GridSpec grid;
  std::vector<ClassSpec> classes;
  std::size_t min_boxes = 2;
  std::size_t max_boxes = 6;
  double lidar_density = 6.0;        // points per m^2 of box footprint
  double lidar_dropout = 0.03;       // survival probability exp(-dropout * range)
  double clutter_density = 0.03;     // background points per m^2 of ROI
  double lidar_jitter = 0.05;        // m
  double intensity_noise = 0.1;
  std::size_t camera_blur = 5;       // odd box-blur width in cells
  double camera_noise = 0.02;        // per-cell noise sigma per meter of range
  std::uint64_t seed = 0;

  void validate() const;
  /// Three classes (car, pedestrian, truck) on a 32 x 32 grid of 1 m cells.
  static SceneGenParams defaults();
};

Scene gen_scene(const SceneGenParams& params, std::uint64_t id);
std::vector<Scene> gen_scenes(const SceneGenParams& params, std::uint64_t first_id, std::size_t count);

/// Uniform points inside each box footprint (count ~ Poisson(density * area)),
/// uniform background clutter, range dropout, then Gaussian position jitter.
std::vector<LidarPoint> render_lidar(std::span<const RotatedBox> boxes, const SceneGenParams& params, Rng& rng);

/// Binary footprint raster: a cell is 1 when its center lies inside a box.
std::vector<double> rasterize_boxes(std::span<const RotatedBox> boxes, const GridSpec& grid);

/// Normalized width x width box blur with zero padding.
std::vector<double> box_blur(std::span<const double> grid_values, std::size_t rows, std::size_t cols, std::size_t width);

/// Rasterize, blur, add zero-mean noise whose sigma grows linearly with range, clamp at 0.
std::vector<double> render_camera(std::span<const RotatedBox> boxes, const SceneGenParams& params, Rng& rng);

void save_scenes(const std::filesystem::path& path, std::span<const Scene> scenes);
std::vector<Scene> load_scenes(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_scenes(std::span<const Scene> scenes);
std::vector<Scene> decode_scenes(std::span<const std::uint8_t> bytes, const std::string& source = "scenes");

}  // namespace unidistill
