#include "unidistill/losses.hpp"

#include <stdexcept>
#include <vector>

namespace unidistill {

namespace {

template <typename E>
struct EnumName {
  E value;
  std::string_view name;
};

constexpr EnumName<Modality> kModalities[] = {
    {Modality::Lidar, "lidar"}, {Modality::Camera, "camera"}, {Modality::Fusion, "fusion"}};
constexpr EnumName<DistillPath> kPaths[] = {
    {DistillPath::L2C, "l2c"}, {DistillPath::C2L, "c2l"}, {DistillPath::F2L, "f2l"}, {DistillPath::F2C, "f2c"}};
constexpr EnumName<AlignMode> kModes[] = {
    {AlignMode::Crucial, "crucial"}, {AlignMode::Gaussian, "gaussian"}, {AlignMode::Complete, "complete"}};
constexpr EnumName<FeatureLevel> kLevels[] = {{FeatureLevel::Low, "low"}, {FeatureLevel::High, "high"}};

template <typename E, std::size_t N>
std::string name_of(const EnumName<E> (&table)[N], E v) {
  for (const auto& e : table) {
    if (e.value == v) return std::string(e.name);
  }
  throw std::invalid_argument("unknown enum value");
}

template <typename E, std::size_t N>
E parse_from(const EnumName<E> (&table)[N], std::string_view s, const char* what) {
  for (const auto& e : table) {
    if (e.name == s) return e.value;
  }
  throw std::invalid_argument(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

// Teacher maps are alignment targets only.
Tensor frozen(const Tensor& t) { return t.requires_grad() ? t.detach() : t; }

Tensor zero_loss() { return Tensor::scalar(0.0); }

void require_channels(const Tensor& teacher, const Tensor& student, const char* op) {
  if (teacher.shape() != student.shape()) {
    throw ShapeError(std::string(op) + ": teacher " + shape_str(teacher.shape()) + " vs student " +
                     shape_str(student.shape()) + " (enable an adaptive layer to map channels)");
  }
}

std::vector<GridCoord> all_crucial_coords(std::span<const RotatedBox> boxes, const GridSpec& grid) {
  std::vector<GridCoord> coords;
  coords.reserve(boxes.size() * 9);
  for (const auto& box : boxes) {
    const auto pts = crucial_grid_coords(box, grid);
    coords.insert(coords.end(), pts.begin(), pts.end());
  }
  return coords;
}

// Cells with positive weight under the selected mode, and their weights.
struct WeightedCells {
  std::vector<std::size_t> cells;
  std::vector<double> weights;
};

WeightedCells region_cells(std::span<const RotatedBox> boxes, const GridSpec& grid, AlignMode mode,
                           const GaussianParams& params) {
  WeightedCells out;
  if (mode == AlignMode::Complete) {
    out.cells.resize(grid.cells());
    for (std::size_t i = 0; i < out.cells.size(); ++i) out.cells[i] = i;
    out.weights.assign(grid.cells(), 1.0);
    return out;
  }
  const GaussianMask mask = boxes_mask(boxes, grid, params);
  const auto v = mask.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] > 0.0) {
      out.cells.push_back(i);
      out.weights.push_back(v[i]);
    }
  }
  return out;
}

}  // namespace

std::string to_string(Modality m) { return name_of(kModalities, m); }
std::string to_string(DistillPath p) { return name_of(kPaths, p); }
std::string to_string(AlignMode m) { return name_of(kModes, m); }
std::string to_string(FeatureLevel l) { return name_of(kLevels, l); }
Modality parse_modality(std::string_view s) { return parse_from(kModalities, s, "modality"); }
DistillPath parse_path(std::string_view s) { return parse_from(kPaths, s, "distillation path"); }
AlignMode parse_align_mode(std::string_view s) { return parse_from(kModes, s, "alignment mode"); }
FeatureLevel parse_level(std::string_view s) { return parse_from(kLevels, s, "feature level"); }

Modality teacher_modality(DistillPath p) {
  switch (p) {
    case DistillPath::L2C: return Modality::Lidar;
    case DistillPath::C2L: return Modality::Camera;
    case DistillPath::F2L:
    case DistillPath::F2C: return Modality::Fusion;
  }
  throw std::invalid_argument("unknown distillation path");
}

Modality student_modality(DistillPath p) {
  switch (p) {
    case DistillPath::L2C:
    case DistillPath::F2C: return Modality::Camera;
    case DistillPath::C2L:
    case DistillPath::F2L: return Modality::Lidar;
  }
  throw std::invalid_argument("unknown distillation path");
}

void BevFeatures::validate() const {
  const Tensor* maps[] = {&low, &high, &cls, &reg, &resp};
  for (const Tensor* m : maps) {
    if (m->rank() != 3) throw ShapeError("BevFeatures: expected [C,H,W] maps, got " + shape_str(m->shape()));
    if (m->dim(1) != low.dim(1) || m->dim(2) != low.dim(2)) {
      throw ShapeError("BevFeatures: spatial mismatch " + shape_str(low.shape()) + " vs " + shape_str(m->shape()));
    }
  }
}

BevFeatures BevFeatures::detach() const {
  return {low.detach(), high.detach(), cls.detach(), reg.detach(), resp.detach()};
}

DistillWeights default_weights(DistillPath p) {
  switch (p) {
    case DistillPath::F2L: return {10.0, 1.0, 10.0};
    case DistillPath::F2C: return {10.0, 5.0, 10.0};
    case DistillPath::C2L: return {10.0, 5.0, 1.0};
    case DistillPath::L2C: return {100.0, 40.0, 10.0};
  }
  throw std::invalid_argument("unknown distillation path");
}

bool default_adaptive(DistillPath p) { return p == DistillPath::C2L; }

DistillConfig DistillConfig::defaults(DistillPath p) {
  DistillConfig c;
  c.path = p;
  c.weights = default_weights(p);
  c.adapt_low = c.adapt_high = default_adaptive(p);
  return c;
}

AdaptLayer::AdaptLayer(Tensor kernel, Tensor bias) : kernel_(std::move(kernel)), bias_(std::move(bias)) {
  if (kernel_.rank() != 4 || kernel_.dim(2) != 1 || kernel_.dim(3) != 1) {
    throw ShapeError("AdaptLayer: expected a [C_out,C_in,1,1] kernel, got " + shape_str(kernel_.shape()));
  }
  if (bias_.rank() != 1 || bias_.dim(0) != kernel_.dim(0)) {
    throw ShapeError("AdaptLayer: bias " + shape_str(bias_.shape()) + " does not match kernel " +
                     shape_str(kernel_.shape()));
  }
}

AdaptLayer AdaptLayer::identity(std::size_t in_channels, std::size_t out_channels) {
  std::vector<double> k(out_channels * in_channels, 0.0);
  for (std::size_t i = 0; i < std::min(in_channels, out_channels); ++i) k[i * in_channels + i] = 1.0;
  return AdaptLayer(Tensor::from_data({out_channels, in_channels, 1, 1}, std::move(k), true),
                    Tensor::zeros({out_channels}, true));
}

Tensor AdaptLayer::apply(const Tensor& x) const { return enabled() ? conv2d(x, kernel_, bias_) : x; }

RelationMatrix relation_matrix(const Tensor& high, const RotatedBox& box, const GridSpec& grid) {
  Tape::NoGrad no_grad;
  const auto coords = crucial_grid_coords(box, grid);
  const Tensor sims = cosine_matrix(sample_points(high, coords));
  RelationMatrix out{};
  for (std::size_t i = 0; i < 9; ++i) {
    for (std::size_t j = 0; j < 9; ++j) out[i][j] = sims.data()[i * 9 + j];
  }
  return out;
}

Tensor feature_distill(const Tensor& teacher, const Tensor& student, std::span<const RotatedBox> boxes,
                       const GridSpec& grid, const AdaptLayer& adapt, AlignMode mode,
                       const GaussianParams& mask_params) {
  const Tensor target = frozen(teacher);
  const Tensor source = adapt.apply(student);
  require_channels(target, source, "feature_distill");
  switch (mode) {
    case AlignMode::Crucial: {
      if (boxes.empty()) return zero_loss();
      const auto coords = all_crucial_coords(boxes, grid);
      Tensor t = sample_points(target, coords);
      Tensor s = sample_points(source, coords);
      return scale(l1_sum(t, s), 1.0 / static_cast<double>(coords.size()));
    }
    case AlignMode::Gaussian: {
      const GaussianMask mask = boxes_mask(boxes, grid, mask_params);
      const double mass = mask.total();
      if (mass <= 0.0) return zero_loss();
      return scale(l1_sum(target, source, mask.to_tensor()), 1.0 / mass);
    }
    case AlignMode::Complete:
      return scale(l1_sum(target, source), 1.0 / static_cast<double>(grid.cells()));
  }
  throw std::invalid_argument("feature_distill: unknown mode");
}

Tensor relation_distill(const Tensor& teacher, const Tensor& student, std::span<const RotatedBox> boxes,
                        const GridSpec& grid, const AdaptLayer& adapt, AlignMode mode,
                        const GaussianParams& mask_params) {
  const Tensor target = frozen(teacher);
  const Tensor source = adapt.apply(student);
  require_channels(target, source, "relation_distill");
  if (mode == AlignMode::Crucial) {
    if (boxes.empty()) return zero_loss();
    Tensor acc;
    for (const auto& box : boxes) {
      const auto coords = crucial_grid_coords(box, grid);
      Tensor rel_t;
      {
        Tape::NoGrad no_grad;
        rel_t = cosine_matrix(sample_points(target, coords));
      }
      Tensor rel_s = cosine_matrix(sample_points(source, coords));
      Tensor term = l1_sum(rel_t, rel_s);
      acc = acc.defined() ? add(acc, term) : term;
    }
    return scale(acc, 1.0 / (81.0 * static_cast<double>(boxes.size())));
  }
  const WeightedCells region = region_cells(boxes, grid, mode, mask_params);
  const std::size_t n = region.cells.size();
  if (n == 0) return zero_loss();
  std::vector<double> pair_w(n * n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      pair_w[i * n + j] = region.weights[i] * region.weights[j];
      total += pair_w[i * n + j];
    }
  }
  Tensor rel_t;
  {
    Tape::NoGrad no_grad;
    rel_t = cosine_matrix(gather_cells(target, region.cells));
  }
  Tensor rel_s = cosine_matrix(gather_cells(source, region.cells));
  return scale(l1_sum(rel_t, rel_s, Tensor::from_data({n, n}, std::move(pair_w))), 1.0 / total);
}

Tensor response_features(const Tensor& cls, const Tensor& reg, bool use_max) {
  if (use_max && cls.dim(0) > 1) return concat_channels({max_over_channel(cls), reg});
  return concat_channels({cls, reg});
}

Tensor response_mask(std::span<const RotatedBox> boxes, const GridSpec& grid, AlignMode mode,
                     const GaussianParams& mask_params) {
  switch (mode) {
    case AlignMode::Gaussian: return boxes_mask(boxes, grid, mask_params).to_tensor();
    case AlignMode::Complete: return Tensor::full({grid.rows, grid.cols}, 1.0);
    case AlignMode::Crucial: {
      std::vector<double> m(grid.cells(), 0.0);
      for (const auto& rc : all_crucial_coords(boxes, grid)) {
        const auto [r, c] = nearest_cell(rc, grid.rows, grid.cols);
        m[r * grid.cols + c] = 1.0;
      }
      return Tensor::from_data({grid.rows, grid.cols}, std::move(m));
    }
  }
  throw std::invalid_argument("response_mask: unknown mode");
}

Tensor response_distill(const Tensor& teacher_resp, const Tensor& student_resp, std::span<const RotatedBox> boxes,
                        const GridSpec& grid, const GaussianParams& mask_params, AlignMode mode) {
  const Tensor target = frozen(teacher_resp);
  require_channels(target, student_resp, "response_distill");
  const Tensor mask = response_mask(boxes, grid, mode, mask_params);
  double mass = 0.0;
  for (double v : mask.data()) mass += v;
  if (mass <= 0.0) return zero_loss();
  const double channels = static_cast<double>(target.dim(0));
  return scale(l1_sum(target, student_resp, mask), 1.0 / (mass * channels));
}

Tensor total_loss(const Tensor& det, const Tensor& fea, const Tensor& rel, const Tensor& resp,
                  const DistillWeights& w) {
  for (const Tensor* t : {&det, &fea, &rel, &resp}) {
    if (t->numel() != 1) throw ShapeError("total_loss: expected scalar terms, got " + shape_str(t->shape()));
  }
  Tensor total = add(det, scale(fea, w.lambda1));
  total = add(total, scale(rel, w.lambda2));
  return add(total, scale(resp, w.lambda3));
}

DistillTerms distill_terms(const BevFeatures& teacher, const BevFeatures& student, std::span<const RotatedBox> boxes,
                           const GridSpec& grid, const DistillConfig& config, const AdaptLayer& adapt_fea,
                           const AdaptLayer& adapt_rel) {
  auto level = [](const BevFeatures& f, FeatureLevel l) -> const Tensor& {
    return l == FeatureLevel::Low ? f.low : f.high;
  };
  DistillTerms terms;
  terms.fea = feature_distill(level(teacher, config.fea_level), level(student, config.fea_level), boxes, grid,
                              adapt_fea, config.fea_mode, config.mask);
  terms.rel = relation_distill(level(teacher, config.rel_level), level(student, config.rel_level), boxes, grid,
                               adapt_rel, config.rel_mode, config.mask);
  auto resp_of = [&](const BevFeatures& f) {
    const bool stored_is_max = f.resp.dim(0) == f.reg.dim(0) + 1;
    return config.resp_use_max && stored_is_max ? f.resp : response_features(f.cls, f.reg, config.resp_use_max);
  };
  const Tensor t_resp = resp_of(teacher);
  const Tensor s_resp = resp_of(student);
  terms.resp = response_distill(t_resp, s_resp, boxes, grid, config.mask, config.resp_mode);
  return terms;
}

}  // namespace unidistill
