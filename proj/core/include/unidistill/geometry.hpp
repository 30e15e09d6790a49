#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "unidistill/tensor.hpp"

namespace unidistill {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

/// Continuous grid position using the cell-center convention: (0, 0) is the
/// center of the first cell.
struct GridCoord {
  double row = 0.0;
  double col = 0.0;
};

/// Ground-truth object footprint in the BEV plane. Lengths in meters, yaw in
/// radians measured from +x towards +y.
struct RotatedBox {
  double cx = 0.0;
  double cy = 0.0;
  double length = 1.0;
  double width = 1.0;
  double yaw = 0.0;
  int class_id = 0;

  void validate() const;
  friend bool operator==(const RotatedBox&, const RotatedBox&) = default;
};

/// Corners counter-clockwise from (+l/2, +w/2) in the box frame, then the
/// edge midpoints m12, m23, m34, m41, then the center.
using CrucialPoints = std::array<Point2, 9>;
CrucialPoints crucial_points(const RotatedBox& box);

/// Axis-aligned BEV region of interest rasterized into rows (y) by cols (x).
struct GridSpec {
  double x_min = -16.0;
  double x_max = 16.0;
  double y_min = -16.0;
  double y_max = 16.0;
  std::size_t rows = 32;
  std::size_t cols = 32;

  void validate() const;
  double cell_x() const { return (x_max - x_min) / static_cast<double>(cols); }
  double cell_y() const { return (y_max - y_min) / static_cast<double>(rows); }
  std::size_t cells() const { return rows * cols; }
  bool contains(Point2 p) const { return p.x >= x_min && p.x < x_max && p.y >= y_min && p.y < y_max; }
  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

struct GridProjection {
  GridCoord coord;
  bool in_bounds = false;
};

GridProjection world_to_grid(Point2 p, const GridSpec& grid);
Point2 grid_to_world(GridCoord rc, const GridSpec& grid);
GridCoord clamp_to_grid(GridCoord rc, const GridSpec& grid);

/// Nearest cell (row, col) of a continuous coordinate, clamped to the grid.
std::array<std::size_t, 2> nearest_cell(GridCoord rc, std::size_t rows, std::size_t cols);

/// Bilinear interpolation of a [C,H,W] map at one position; coordinates are
/// clamped to the grid first. Returns a [C] tensor, differentiable wrt the map.
Tensor bilinear_sample(const Tensor& map, GridCoord rc);

/// Bilinear samples at several positions as an [N,C] tensor.
Tensor sample_points(const Tensor& map, std::span<const GridCoord> coords);

/// Continuous grid positions of a box's 9 crucial points.
std::array<GridCoord, 9> crucial_grid_coords(const RotatedBox& box, const GridSpec& grid);

bool point_in_box(Point2 p, const RotatedBox& box, double margin = 0.0);

struct GaussianParams {
  double min_overlap = 0.1;
  double sigma_per_radius = 1.0 / 3.0;
  double cutoff = 1e-4;
  int min_radius = 1;
};

/// Largest radius (cells) such that a corner-shifted box of the given extents
/// keeps IoU >= min_overlap with the original, over the three shift cases.
double overlap_radius(double extent_rows, double extent_cols, double min_overlap);

/// Integer splat radius for a box: overlap_radius on the grid-projected
/// axis-aligned extent of the rotated box, floored and clamped below.
int gaussian_radius(const RotatedBox& box, const GridSpec& grid, const GaussianParams& params = {});

class GaussianMask {
 public:
  GaussianMask(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), values_(rows * cols, 0.0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  std::span<const double> values() const { return values_; }
  double total() const;
  Tensor to_tensor() const;

 private:
  std::size_t rows_, cols_;
  std::vector<double> values_;
};

/// Max-combines exp(-(dr^2 + dc^2) / (2 sigma^2)), sigma = radius * sigma_per_radius,
/// over the (2 radius + 1)^2 window around the nearest cell of `center`.
/// Values below the cutoff become 0. A center outside the grid is a no-op.
void draw_gaussian(GaussianMask& mask, GridCoord center, int radius, const GaussianParams& params = {});

/// One mask covering every box, as used by the response loss and heatmap targets.
GaussianMask boxes_mask(std::span<const RotatedBox> boxes, const GridSpec& grid, const GaussianParams& params = {});

}  // namespace unidistill
