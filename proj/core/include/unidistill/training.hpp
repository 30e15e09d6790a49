#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "unidistill/config.hpp"
#include "unidistill/detector.hpp"
#include "unidistill/eval.hpp"

namespace unidistill {

/// Non-finite loss during training.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

struct StepMetrics {
  std::size_t step = 0;
  double l_det = 0.0;
  double l_fea = 0.0;
  double l_rel = 0.0;
  double l_resp = 0.0;
  double total = 0.0;
};

/// Columns: step,l_det,l_fea,l_rel,l_resp,total.
std::string metrics_csv(std::span<const StepMetrics> metrics);

/// Adam without weight decay over a fixed list of leaves.
class Adam {
 public:
  Adam(std::vector<Tensor> params, const OptimizerConfig& config);
  /// Applies one update from the leaves' accumulated gradients.
  void step();
  std::size_t steps_taken() const noexcept { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  OptimizerConfig config_;
  std::size_t t_ = 0;
};

struct TrainResult {
  DetectorParams params;
  std::vector<StepMetrics> metrics;
};

struct DistillResult {
  DetectorParams student;  // adaptive layers are not part of the student
  AdaptLayer adapt_low;
  AdaptLayer adapt_high;
  std::vector<StepMetrics> metrics;
};

/// Scenes used for training: all but the last `holdout`.
std::span<const Scene> train_split(std::span<const Scene> scenes, std::size_t holdout);
/// The last `holdout` scenes.
std::span<const Scene> eval_split(std::span<const Scene> scenes, std::size_t holdout);

/// Trains a detector of `modality` on the detection loss alone.
TrainResult train_detector(const RunConfig& config, Modality modality, std::span<const Scene> scenes);

/// Trains the student of config.distill.path against a frozen teacher on
/// L_Det + lambda1 L_Fea + lambda2 L_Rel + lambda3 L_Resp. With all lambdas 0
/// the student trajectory equals train_detector's bit for bit.
DistillResult distill_detector(const RunConfig& config, const DetectorParams& teacher, std::span<const Scene> scenes);

std::vector<SceneDetections> detect_scenes(const DetectorParams& params, std::span<const Scene> scenes,
                                           const GridSpec& grid, const EvalSettings& settings);

EvalReport evaluate_detector(const DetectorParams& params, std::span<const Scene> scenes, const RunConfig& config);

}  // namespace unidistill
