#pragma once

#include <cstdint>
#include <vector>

#include "unidistill/geometry.hpp"
#include "unidistill/tensor.hpp"

namespace unidistill {

struct LidarPoint {
  double x = 0.0;
  double y = 0.0;
  double intensity = 0.0;
  friend bool operator==(const LidarPoint&, const LidarPoint&) = default;
};

/// One synthetic frame: ground truth plus both sensor observations.
struct Scene {
  std::uint64_t id = 0;
  std::vector<RotatedBox> boxes;
  std::vector<LidarPoint> lidar_points;
  std::size_t camera_rows = 0;
  std::size_t camera_cols = 0;
  std::vector<double> camera_obs;  // row-major density grid
  bool underfilled = false;        // fewer boxes than requested after rejection sampling

  Tensor camera_tensor() const { return Tensor::from_data({1, camera_rows, camera_cols}, camera_obs); }
  // Compares the persisted content; the generation-time underfilled flag is not stored.
  friend bool operator==(const Scene& a, const Scene& b) {
    return a.id == b.id && a.boxes == b.boxes && a.lidar_points == b.lidar_points &&
           a.camera_rows == b.camera_rows && a.camera_cols == b.camera_cols && a.camera_obs == b.camera_obs;
  }
};

}  // namespace unidistill
