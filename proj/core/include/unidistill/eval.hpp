#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "unidistill/detector.hpp"
#include "unidistill/scene.hpp"

namespace unidistill {

struct MatchResult {
  std::vector<int> det_to_gt;  // -1 for false positives
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

/// Greedy matching in the given (descending-score) order: each detection takes
/// the nearest unmatched same-class ground truth whose center lies within
/// dist_thresh meters; equal distances go to the lower gt index.
MatchResult match(std::span<const Detection> dets, std::span<const RotatedBox> gts, double dist_thresh);

struct ScoredHit {
  double score = 0.0;
  bool tp = false;
};

/// 101-point interpolated AP. Hits sharing a score are treated as one
/// operating point, so their relative order does not matter.
double average_precision(std::vector<ScoredHit> hits, std::size_t num_gt);

struct SceneDetections {
  std::uint64_t scene_id = 0;
  std::vector<Detection> dets;
};

struct EvalConfig {
  std::vector<double> thresholds{0.5, 1.0, 2.0, 4.0};
  double tp_threshold = 2.0;  // matching distance used for mATE / mAOE
  std::size_t num_classes = 3;
};

struct ClassThresholdAp {
  int class_id = 0;
  double threshold = 0.0;
  double ap = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0, num_gt = 0;
};

struct EvalReport {
  std::vector<ClassThresholdAp> entries;
  double mAP = 0.0;   // mean over classes with ground truth and all thresholds
  double mATE = 0.0;  // m, over true positives at tp_threshold
  double mAOE = 0.0;  // rad, over the same true positives
  std::size_t tp = 0, fp = 0, fn = 0;  // at tp_threshold
  bool empty = false;

  /// Columns: row,class,threshold,value,tp,fp,fn,num_gt. One "ap" row per
  /// (class, threshold), then mAP, mATE, mAOE and empty summary rows.
  std::string to_csv() const;
};

/// Minimal absolute angle difference on (-pi, pi]; boxes are oriented.
double angle_error(double a, double b);

EvalReport evaluate(std::span<const SceneDetections> dets, std::span<const Scene> scenes, const EvalConfig& config = {});

}  // namespace unidistill
