#include "unidistill/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace unidistill {

void RotatedBox::validate() const {
  if (!(length > 0.0) || !(width > 0.0)) {
    throw std::invalid_argument("RotatedBox: length and width must be positive (got " + std::to_string(length) +
                                ", " + std::to_string(width) + ")");
  }
  if (class_id < 0) throw std::invalid_argument("RotatedBox: negative class id");
}

CrucialPoints crucial_points(const RotatedBox& box) {
  const double hl = box.length / 2.0, hw = box.width / 2.0;
  const std::array<Point2, 9> local{{
      {hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw},  // corners
      {0.0, hw}, {-hl, 0.0}, {0.0, -hw}, {hl, 0.0},  // edge midpoints
      {0.0, 0.0},
  }};
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  CrucialPoints out;
  for (std::size_t i = 0; i < local.size(); ++i) {
    out[i] = {box.cx + c * local[i].x - s * local[i].y, box.cy + s * local[i].x + c * local[i].y};
  }
  return out;
}

void GridSpec::validate() const {
  if (!(x_max > x_min) || !(y_max > y_min) || rows == 0 || cols == 0) {
    throw std::invalid_argument("GridSpec: degenerate grid");
  }
}

GridProjection world_to_grid(Point2 p, const GridSpec& grid) {
  grid.validate();
  GridProjection out;
  out.coord.row = (p.y - grid.y_min) / (grid.y_max - grid.y_min) * static_cast<double>(grid.rows) - 0.5;
  out.coord.col = (p.x - grid.x_min) / (grid.x_max - grid.x_min) * static_cast<double>(grid.cols) - 0.5;
  out.in_bounds = out.coord.row >= 0.0 && out.coord.row <= static_cast<double>(grid.rows - 1) &&
                  out.coord.col >= 0.0 && out.coord.col <= static_cast<double>(grid.cols - 1);
  return out;
}

Point2 grid_to_world(GridCoord rc, const GridSpec& grid) {
  grid.validate();
  return {grid.x_min + (rc.col + 0.5) / static_cast<double>(grid.cols) * (grid.x_max - grid.x_min),
          grid.y_min + (rc.row + 0.5) / static_cast<double>(grid.rows) * (grid.y_max - grid.y_min)};
}

GridCoord clamp_to_grid(GridCoord rc, const GridSpec& grid) {
  return {std::clamp(rc.row, 0.0, static_cast<double>(grid.rows - 1)),
          std::clamp(rc.col, 0.0, static_cast<double>(grid.cols - 1))};
}

std::array<std::size_t, 2> nearest_cell(GridCoord rc, std::size_t rows, std::size_t cols) {
  const double r = std::clamp(std::round(rc.row), 0.0, static_cast<double>(rows - 1));
  const double c = std::clamp(std::round(rc.col), 0.0, static_cast<double>(cols - 1));
  return {static_cast<std::size_t>(r), static_cast<std::size_t>(c)};
}

namespace {

struct BilinearTap {
  std::array<std::size_t, 4> cell;
  std::array<double, 4> weight;
};

BilinearTap bilinear_tap(GridCoord rc, std::size_t H, std::size_t W) {
  const double r = std::clamp(rc.row, 0.0, static_cast<double>(H - 1));
  const double c = std::clamp(rc.col, 0.0, static_cast<double>(W - 1));
  const auto r0 = static_cast<std::size_t>(std::floor(r));
  const auto c0 = static_cast<std::size_t>(std::floor(c));
  const std::size_t r1 = std::min(r0 + 1, H - 1), c1 = std::min(c0 + 1, W - 1);
  const double fr = r - static_cast<double>(r0), fc = c - static_cast<double>(c0);
  return {{r0 * W + c0, r0 * W + c1, r1 * W + c0, r1 * W + c1},
          {(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc}};
}

}  // namespace

Tensor sample_points(const Tensor& map, std::span<const GridCoord> coords) {
  if (map.rank() != 3) throw ShapeError("sample_points: expected [C,H,W], got " + shape_str(map.shape()));
  const std::size_t C = map.dim(0), H = map.dim(1), W = map.dim(2), plane = H * W;
  const std::size_t N = coords.size();
  std::vector<BilinearTap> taps;
  taps.reserve(N);
  for (const auto& rc : coords) taps.push_back(bilinear_tap(rc, H, W));
  auto v = map.data();
  std::vector<double> out(N * C, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t t = 0; t < 4; ++t) acc += taps[n].weight[t] * v[c * plane + taps[n].cell[t]];
      out[n * C + c] = acc;
    }
  }
  Tensor r = make_result({N, C}, std::move(out));
  if (Tape::should_record({&map})) {
    Tape::current()->record(r, [map, r, taps = std::move(taps), C, plane] {
      auto g = adjoint(r);
      auto gm = grad_buffer(map);
      for (std::size_t n = 0; n < taps.size(); ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          const double gn = g[n * C + c];
          for (std::size_t t = 0; t < 4; ++t) gm[c * plane + taps[n].cell[t]] += taps[n].weight[t] * gn;
        }
      }
    });
  }
  return r;
}

Tensor bilinear_sample(const Tensor& map, GridCoord rc) {
  Tensor rows = sample_points(map, std::span<const GridCoord>(&rc, 1));
  if (!rows.requires_grad()) return make_result({rows.dim(1)}, {rows.data().begin(), rows.data().end()});
  // Reshape [1,C] -> [C] through a differentiable identity gather.
  const std::size_t C = rows.dim(1);
  Tensor r = make_result({C}, {rows.data().begin(), rows.data().end()});
  Tape::current()->record(r, [rows, r] {
    auto g = adjoint(r);
    auto gr = grad_buffer(rows);
    for (std::size_t i = 0; i < g.size(); ++i) gr[i] += g[i];
  });
  return r;
}

std::array<GridCoord, 9> crucial_grid_coords(const RotatedBox& box, const GridSpec& grid) {
  const auto pts = crucial_points(box);
  std::array<GridCoord, 9> out;
  for (std::size_t i = 0; i < pts.size(); ++i) out[i] = world_to_grid(pts[i], grid).coord;
  return out;
}

bool point_in_box(Point2 p, const RotatedBox& box, double margin) {
  const double dx = p.x - box.cx, dy = p.y - box.cy;
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double u = c * dx + s * dy, v = -s * dx + c * dy;
  return std::abs(u) <= box.length / 2.0 + margin && std::abs(v) <= box.width / 2.0 + margin;
}

double overlap_radius(double h, double w, double m) {
  if (!(m > 0.0 && m < 1.0)) throw std::invalid_argument("overlap_radius: min_overlap must lie in (0,1)");
  // One corner inside, one outside: r^2 - (h+w) r + hw(1-m)/(1+m) >= 0.
  const double b1 = h + w, c1 = h * w * (1.0 - m) / (1.0 + m);
  const double r1 = (b1 - std::sqrt(std::max(0.0, b1 * b1 - 4.0 * c1))) / 2.0;
  // Both corners inside: 4r^2 - 2(h+w) r + (1-m)hw >= 0.
  const double b2 = 2.0 * (h + w), c2 = (1.0 - m) * h * w;
  const double r2 = (b2 - std::sqrt(std::max(0.0, b2 * b2 - 16.0 * c2))) / 8.0;
  // Both corners outside: 4m r^2 + 2m(h+w) r + (m-1)hw <= 0.
  const double b3 = 2.0 * m * (h + w), c3 = (m - 1.0) * h * w;
  const double r3 = (-b3 + std::sqrt(std::max(0.0, b3 * b3 - 16.0 * m * c3))) / (8.0 * m);
  return std::min({r1, r2, r3});
}

int gaussian_radius(const RotatedBox& box, const GridSpec& grid, const GaussianParams& params) {
  const double c = std::abs(std::cos(box.yaw)), s = std::abs(std::sin(box.yaw));
  const double extent_x = box.length * c + box.width * s;
  const double extent_y = box.length * s + box.width * c;
  const double r = overlap_radius(extent_y / grid.cell_y(), extent_x / grid.cell_x(), params.min_overlap);
  return std::max(params.min_radius, static_cast<int>(std::floor(r)));
}

double GaussianMask::total() const {
  double acc = 0.0;
  for (double v : values_) acc += v;
  return acc;
}

Tensor GaussianMask::to_tensor() const { return Tensor::from_data({rows_, cols_}, values_); }

void draw_gaussian(GaussianMask& mask, GridCoord center, int radius, const GaussianParams& params) {
  if (radius < 1) throw std::invalid_argument("draw_gaussian: radius must be >= 1");
  const double rr = std::round(center.row), cc = std::round(center.col);
  if (rr < 0.0 || cc < 0.0 || rr > static_cast<double>(mask.rows() - 1) || cc > static_cast<double>(mask.cols() - 1)) {
    return;
  }
  const long r0 = static_cast<long>(rr), c0 = static_cast<long>(cc);
  const double sigma = radius * params.sigma_per_radius;
  const double denom = 2.0 * sigma * sigma;
  const long H = static_cast<long>(mask.rows()), W = static_cast<long>(mask.cols());
  for (long dr = -radius; dr <= radius; ++dr) {
    const long r = r0 + dr;
    if (r < 0 || r >= H) continue;
    for (long dc = -radius; dc <= radius; ++dc) {
      const long c = c0 + dc;
      if (c < 0 || c >= W) continue;
      double v = std::exp(-static_cast<double>(dr * dr + dc * dc) / denom);
      if (v < params.cutoff) v = 0.0;
      double& cell = mask.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
      cell = std::max(cell, v);
    }
  }
}

GaussianMask boxes_mask(std::span<const RotatedBox> boxes, const GridSpec& grid, const GaussianParams& params) {
  GaussianMask mask(grid.rows, grid.cols);
  for (const auto& box : boxes) {
    const auto proj = world_to_grid({box.cx, box.cy}, grid);
    draw_gaussian(mask, proj.coord, gaussian_radius(box, grid, params), params);
  }
  return mask;
}

}  // namespace unidistill
