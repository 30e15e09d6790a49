#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "unidistill/detector.hpp"
#include "unidistill/losses.hpp"
#include "unidistill/synthscene.hpp"

namespace unidistill {

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t steps = 2000;
  std::size_t batch = 4;
  std::size_t teacher_steps = 0;  // 0: same as steps
};

struct EvalSettings {
  double score_thresh = 0.1;
  std::size_t max_dets = 64;
};

/// Everything a command needs to re-execute deterministically.
struct RunConfig {
  SceneGenParams scenes = SceneGenParams::defaults();
  std::size_t num_scenes = 512;
  std::size_t holdout = 64;  // the last `holdout` scenes are evaluation-only
  DetectorWidths widths;
  OptimizerConfig optimizer;
  DetLossParams det_loss;
  DistillConfig distill = DistillConfig::defaults(DistillPath::F2C);
  EvalSettings eval;
  std::uint64_t seed = 0;
  std::size_t seeds = 3;     // ablation sweeps use seeds [seed, seed + seeds)
  std::size_t threads = 0;   // 0: hardware concurrency
  std::string out_dir = "out";

  void validate() const;
};

/// Unknown keys are rejected; missing keys keep their defaults.
RunConfig parse_run_config(std::string_view json_text);
std::string run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& config);

}  // namespace unidistill
