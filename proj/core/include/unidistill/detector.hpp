#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unidistill/geometry.hpp"
#include "unidistill/losses.hpp"
#include "unidistill/scene.hpp"
#include "unidistill/tensor.hpp"

namespace unidistill {

/// Regression channels: dx, dy (cells), log length, log width (log m), sin yaw, cos yaw.
inline constexpr std::size_t kRegTargets = 6;
inline constexpr std::size_t kLidarScatterChannels = 4;

struct HeadSpec {
  std::size_t num_classes = 3;
  std::size_t reg_targets = kRegTargets;
  void validate() const;
};

struct DetectorWidths {
  std::size_t low_channels = 16;
  std::size_t high_channels = 32;
  std::size_t num_classes = 3;
  friend bool operator==(const DetectorWidths&, const DetectorWidths&) = default;
};

/// Named trainable tensors of one detector. Names are stable and determine the
/// modality ("lidar.*", "camera.*", "fuse.*") and widths when loaded back.
class DetectorParams {
 public:
  DetectorParams() = default;
  static DetectorParams init(Modality modality, const DetectorWidths& widths, std::uint64_t seed);
  static DetectorParams from_entries(std::vector<NamedTensor> entries);

  Modality modality() const;
  DetectorWidths widths() const;
  const Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::vector<NamedTensor>& entries() { return entries_; }
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::size_t parameter_count() const;

  DetectorParams clone() const;
  void zero_grad();
  /// Same names, shapes and bit patterns.
  bool bitwise_equal(const DetectorParams& other) const;

 private:
  std::vector<NamedTensor> entries_;
};

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);
void save_detector(const std::filesystem::path& path, const DetectorParams& params);
DetectorParams load_detector(const std::filesystem::path& path);

/// Pillar scatter before any learned layer: per cell [log1p(count), mean
/// intensity, mean x offset, mean y offset] with offsets in cells from the cell
/// center. Points outside the grid are dropped.
Tensor lidar_scatter(std::span<const LidarPoint> points, const GridSpec& grid);

Tensor encode_lidar(std::span<const LidarPoint> points, const GridSpec& grid, const DetectorParams& params);
Tensor encode_camera(const Tensor& observation, const GridSpec& grid, const DetectorParams& params);
Tensor fuse_low(const Tensor& lidar_low, const Tensor& camera_low, const DetectorParams& params);
Tensor bev_encoder(const Tensor& low, const DetectorParams& params);

struct HeadOutput {
  Tensor cls;  // sigmoid probabilities [C,H,W]
  Tensor reg;  // raw regression [6,H,W]
};
HeadOutput det_head(const Tensor& high, const DetectorParams& params, const HeadSpec& spec);

/// Low-level BEV features for the detector's modality.
Tensor encode_low(const Scene& scene, const GridSpec& grid, const DetectorParams& params);

BevFeatures forward_all(const Scene& scene, const GridSpec& grid, const DetectorParams& params,
                        bool resp_use_max = true);

struct DetLossParams {
  double focal_alpha = 2.0;
  double focal_beta = 4.0;
  double prob_clamp = 1e-6;
  GaussianParams heatmap;
};

/// Class heatmap targets: one Gaussian per box on its class channel.
Tensor heatmap_targets(std::span<const RotatedBox> boxes, const GridSpec& grid, std::size_t num_classes,
                       const GaussianParams& params = {});

struct RegTargets {
  std::vector<std::size_t> cells;  // flat center cells
  std::vector<double> values;      // [N,6] row-major
};
/// Regression targets at the nearest cell of each box center inside the grid.
RegTargets regression_targets(std::span<const RotatedBox> boxes, const GridSpec& grid);

/// Penalty-reduced focal loss summed over cells, normalized by max(1, #positives).
Tensor focal_loss(const Tensor& prob, const Tensor& target, const DetLossParams& params = {});

struct DetLoss {
  Tensor cls;
  Tensor reg;
  Tensor total;
};
DetLoss detection_loss(const Tensor& cls, const Tensor& reg, std::span<const RotatedBox> boxes, const GridSpec& grid,
                       const DetLossParams& params = {});

struct Detection {
  RotatedBox box;
  double score = 0.0;
};

/// 3x3 local maxima of the channel-max heatmap above score_thresh, decoded
/// from the regression channels, sorted by descending score.
std::vector<Detection> decode(const Tensor& cls, const Tensor& reg, const GridSpec& grid, double score_thresh,
                              std::size_t max_dets);

}  // namespace unidistill
