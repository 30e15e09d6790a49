#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unidistill/config.hpp"
#include "unidistill/eval.hpp"
#include "unidistill/grad_check.hpp"
#include "unidistill/training.hpp"

namespace unidistill {

/// Runs fn(0..n-1) on up to `threads` workers (0: hardware concurrency). The
/// first exception by index is rethrown after all workers finish.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

/// Scenes for a config: loaded from `scenes_file` when given, else generated.
std::vector<Scene> obtain_scenes(const RunConfig& config, const std::optional<std::filesystem::path>& scenes_file);

// --- commands ----------------------------------------------------------------
// Each command writes its artifacts into config.out_dir and returns the path of
// the main one.

std::filesystem::path cmd_gen_scenes(const RunConfig& config, std::size_t count);
std::filesystem::path cmd_train(const RunConfig& config, Modality modality, const std::filesystem::path& scenes_file);
std::filesystem::path cmd_distill(const RunConfig& config, const std::filesystem::path& teacher_file,
                                  const std::filesystem::path& scenes_file);
std::filesystem::path cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint_file,
                               const std::filesystem::path& scenes_file);

struct NamedGradCheck {
  std::string name;
  GradCheckReport report;
};

/// Gradient checks of every loss wrt all student parameters on a random
/// 16 x 16 mini-fixture derived from `seed`.
std::vector<NamedGradCheck> run_grad_checks(std::uint64_t seed, const GradCheckOptions& options = {});

struct AblationRow {
  std::string study;
  std::string variant;
  std::uint64_t seed = 0;
  EvalReport report;
};

std::vector<std::string> ablation_studies();
/// Variant names of a study in row order; throws std::invalid_argument for unknown studies.
std::vector<std::string> ablation_variants(std::string_view study);
/// Distillation settings of one variant; nullopt for the undistilled baseline.
std::optional<DistillConfig> ablation_setting(std::string_view study, std::string_view variant,
                                              const DistillConfig& base);

/// For each seed in [config.seed, config.seed + config.seeds): trains (or
/// reuses) a teacher, then one student per variant, evaluated on the held-out
/// scenes. Rows are ordered by seed, then variant.
std::vector<AblationRow> run_ablation(const RunConfig& config, std::string_view study, std::span<const Scene> scenes,
                                      const DetectorParams* teacher = nullptr);
/// Columns: study,variant,seed,mAP,mATE,mAOE,tp,fp,fn.
std::string ablation_csv(std::span<const AblationRow> rows);
std::filesystem::path cmd_ablate(const RunConfig& config, std::string_view study,
                                 const std::optional<std::filesystem::path>& scenes_file,
                                 const std::optional<std::filesystem::path>& teacher_file);

/// Channel mean of a [C,H,W] tensor, row-major [H*W].
std::vector<double> channel_mean(const Tensor& resp);
/// Plain (P2) grayscale map, min-max scaled to 0..255; a constant map is all 0.
/// Row 0 of the grid is the first image row.
std::string to_pgm(std::span<const double> values, std::size_t rows, std::size_t cols);
std::filesystem::path cmd_dump_resp(const RunConfig& config, const std::filesystem::path& checkpoint_file,
                                    const std::filesystem::path& scenes_file, std::size_t scene_index);

}  // namespace unidistill
