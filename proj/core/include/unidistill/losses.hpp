#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>

#include "unidistill/geometry.hpp"
#include "unidistill/tensor.hpp"

namespace unidistill {

enum class Modality { Lidar, Camera, Fusion };

/// Teacher -> student modality pair.
enum class DistillPath { L2C, C2L, F2L, F2C };

/// Which cells a loss aligns: the 9 crucial points per box, cells weighted by
/// the Gaussian box mask, or the complete map.
enum class AlignMode { Crucial, Gaussian, Complete };

enum class FeatureLevel { Low, High };

std::string to_string(Modality m);
std::string to_string(DistillPath p);
std::string to_string(AlignMode m);
std::string to_string(FeatureLevel l);
Modality parse_modality(std::string_view s);
DistillPath parse_path(std::string_view s);
AlignMode parse_align_mode(std::string_view s);
FeatureLevel parse_level(std::string_view s);

Modality teacher_modality(DistillPath p);
Modality student_modality(DistillPath p);

/// Feature maps one detector produces for a scene. resp is
/// concat(max_over_channel(cls), reg), or concat(cls, reg) without the max.
struct BevFeatures {
  Tensor low;
  Tensor high;
  Tensor cls;
  Tensor reg;
  Tensor resp;

  void validate() const;
  BevFeatures detach() const;
};

struct DistillWeights {
  double lambda1 = 0.0;  // feature
  double lambda2 = 0.0;  // relation
  double lambda3 = 0.0;  // response
  friend bool operator==(const DistillWeights&, const DistillWeights&) = default;
};

/// Per-path loss weights: F2L (10,1,10), F2C (10,5,10), C2L (10,5,1), L2C (100,40,10).
DistillWeights default_weights(DistillPath p);
/// Adaptive layers are on by default only when the teacher is the weaker camera model.
bool default_adaptive(DistillPath p);

/// Removable 1x1 convolution applied to student features before alignment.
class AdaptLayer {
 public:
  AdaptLayer() = default;  // disabled
  AdaptLayer(Tensor kernel, Tensor bias);
  /// Identity kernel (or a truncated identity when channel counts differ), zero bias.
  static AdaptLayer identity(std::size_t in_channels, std::size_t out_channels);

  bool enabled() const { return kernel_.defined(); }
  Tensor apply(const Tensor& x) const;
  const Tensor& kernel() const { return kernel_; }
  const Tensor& bias() const { return bias_; }
  Tensor& kernel() { return kernel_; }
  Tensor& bias() { return bias_; }

 private:
  Tensor kernel_;
  Tensor bias_;
};

struct DistillConfig {
  DistillPath path = DistillPath::F2C;
  DistillWeights weights = default_weights(DistillPath::F2C);
  bool adapt_low = false;
  bool adapt_high = false;
  AlignMode fea_mode = AlignMode::Crucial;
  AlignMode rel_mode = AlignMode::Crucial;
  AlignMode resp_mode = AlignMode::Gaussian;
  FeatureLevel fea_level = FeatureLevel::Low;
  FeatureLevel rel_level = FeatureLevel::High;
  bool resp_use_max = true;
  GaussianParams mask;

  static DistillConfig defaults(DistillPath p);
};

using RelationMatrix = std::array<std::array<double, 9>, 9>;

/// Cosine similarities between features bilinearly sampled at the box's 9
/// crucial points.
RelationMatrix relation_matrix(const Tensor& high, const RotatedBox& box, const GridSpec& grid);

/// Crucial mode: per box, mean over the 9 crucial points of the channel-summed
/// |teacher - adapt(student)|, then mean over boxes (0 with no boxes).
/// Gaussian mode weights every cell by the box mask, normalized by mask mass;
/// complete mode averages over all H*W cells.
Tensor feature_distill(const Tensor& teacher, const Tensor& student, std::span<const RotatedBox> boxes,
                       const GridSpec& grid, const AdaptLayer& adapt, AlignMode mode = AlignMode::Crucial,
                       const GaussianParams& mask_params = {});

/// Crucial mode: per box, mean |RelMat_T - RelMat_S| over the 81 entries, then
/// mean over boxes. Gaussian/complete modes build one relation matrix over
/// mask-weighted / all cells, normalized by the total pair weight.
Tensor relation_distill(const Tensor& teacher, const Tensor& student, std::span<const RotatedBox> boxes,
                        const GridSpec& grid, const AdaptLayer& adapt, AlignMode mode = AlignMode::Crucial,
                        const GaussianParams& mask_params = {});

Tensor response_features(const Tensor& cls, const Tensor& reg, bool use_max = true);

/// Per-cell weights the response loss uses for a scene.
Tensor response_mask(std::span<const RotatedBox> boxes, const GridSpec& grid, AlignMode mode,
                     const GaussianParams& mask_params = {});

/// sum |teacher - student| * mask over cells and channels, divided by
/// (sum mask * channels).
Tensor response_distill(const Tensor& teacher_resp, const Tensor& student_resp, std::span<const RotatedBox> boxes,
                        const GridSpec& grid, const GaussianParams& mask_params = {},
                        AlignMode mode = AlignMode::Gaussian);

/// det + lambda1 fea + lambda2 rel + lambda3 resp.
Tensor total_loss(const Tensor& det, const Tensor& fea, const Tensor& rel, const Tensor& resp,
                  const DistillWeights& w);

struct DistillTerms {
  Tensor fea;
  Tensor rel;
  Tensor resp;
};

/// All three distillation losses for one scene under a config. adapt_fea and
/// adapt_rel act on whichever feature level the config selects for each loss.
DistillTerms distill_terms(const BevFeatures& teacher, const BevFeatures& student, std::span<const RotatedBox> boxes,
                           const GridSpec& grid, const DistillConfig& config, const AdaptLayer& adapt_fea,
                           const AdaptLayer& adapt_rel);

}  // namespace unidistill
