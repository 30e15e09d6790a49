#include "unidistill/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "unidistill/rng.hpp"

namespace unidistill {

namespace {

struct ConvSpec {
  std::string name;
  std::size_t c_out, c_in, k;
};

std::vector<ConvSpec> layer_specs(Modality modality, const DetectorWidths& w) {
  const std::size_t lo = w.low_channels, hi = w.high_channels;
  std::vector<ConvSpec> specs;
  if (modality == Modality::Lidar || modality == Modality::Fusion) {
    specs.push_back({"lidar.conv", lo, kLidarScatterChannels, 3});
  }
  if (modality == Modality::Camera || modality == Modality::Fusion) {
    specs.push_back({"camera.conv1", lo, 1, 3});
    specs.push_back({"camera.conv2", lo, lo, 3});
  }
  if (modality == Modality::Fusion) specs.push_back({"fuse.conv", lo, 2 * lo, 3});
  specs.push_back({"bev.conv1", hi, lo, 3});
  specs.push_back({"bev.conv2", hi, hi, 3});
  specs.push_back({"head.shared", hi, hi, 3});
  specs.push_back({"head.cls", w.num_classes, hi, 1});
  specs.push_back({"head.reg", kRegTargets, hi, 1});
  return specs;
}

// Initial heatmap bias so that sigmoid starts near a 0.1 foreground prior.
constexpr double kClsPriorBias = -2.19;

Tensor conv_relu(const Tensor& x, const DetectorParams& p, const std::string& layer) {
  return relu(conv2d(x, p.at(layer + ".kernel"), p.at(layer + ".bias")));
}

Tensor conv_linear(const Tensor& x, const DetectorParams& p, const std::string& layer) {
  return conv2d(x, p.at(layer + ".kernel"), p.at(layer + ".bias"));
}

}  // namespace

void HeadSpec::validate() const {
  if (num_classes < 1) throw std::invalid_argument("HeadSpec: need at least one class");
  if (reg_targets != kRegTargets) throw std::invalid_argument("HeadSpec: regression targets are fixed at 6");
}

// --- parameters ----------------------------------------------------------------

DetectorParams DetectorParams::init(Modality modality, const DetectorWidths& widths, std::uint64_t seed) {
  if (widths.low_channels == 0 || widths.high_channels == 0 || widths.num_classes == 0) {
    throw std::invalid_argument("DetectorParams: widths must be positive");
  }
  Rng rng = make_rng(seed, {stream::kInit, static_cast<std::uint64_t>(modality)});
  DetectorParams p;
  for (const auto& spec : layer_specs(modality, widths)) {
    const bool head_out = spec.name == "head.cls" || spec.name == "head.reg";
    const double fan_in = static_cast<double>(spec.c_in * spec.k * spec.k);
    const double stddev = head_out ? 0.01 : std::sqrt(2.0 / fan_in);
    std::normal_distribution<double> normal(0.0, stddev);
    std::vector<double> k(spec.c_out * spec.c_in * spec.k * spec.k);
    for (auto& v : k) v = normal(rng);
    const double bias = spec.name == "head.cls" ? kClsPriorBias : 0.0;
    p.entries_.push_back({spec.name + ".kernel", Tensor::from_data({spec.c_out, spec.c_in, spec.k, spec.k}, std::move(k), true)});
    p.entries_.push_back({spec.name + ".bias", Tensor::full({spec.c_out}, bias, true)});
  }
  return p;
}

DetectorParams DetectorParams::from_entries(std::vector<NamedTensor> entries) {
  DetectorParams p;
  p.entries_ = std::move(entries);
  const Modality m = p.modality();
  const DetectorWidths w = p.widths();
  const auto specs = layer_specs(m, w);
  if (p.entries_.size() != 2 * specs.size()) {
    throw std::invalid_argument("DetectorParams: expected " + std::to_string(2 * specs.size()) + " tensors for a " +
                                to_string(m) + " detector, got " + std::to_string(p.entries_.size()));
  }
  for (const auto& spec : specs) {
    const Shape ks{spec.c_out, spec.c_in, spec.k, spec.k};
    if (p.at(spec.name + ".kernel").shape() != ks || p.at(spec.name + ".bias").shape() != Shape{spec.c_out}) {
      throw ShapeError("DetectorParams: layer '" + spec.name + "' has unexpected shape");
    }
  }
  for (auto& e : p.entries_) e.tensor.set_requires_grad(true);
  return p;
}

Modality DetectorParams::modality() const {
  if (contains("fuse.conv.kernel")) return Modality::Fusion;
  if (contains("lidar.conv.kernel")) return Modality::Lidar;
  if (contains("camera.conv1.kernel")) return Modality::Camera;
  throw std::invalid_argument("DetectorParams: no modality encoder present");
}

DetectorWidths DetectorParams::widths() const {
  const Tensor& k = at("bev.conv1.kernel");
  return {k.dim(1), k.dim(0), at("head.cls.kernel").dim(0)};
}

const Tensor& DetectorParams::at(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw std::out_of_range("DetectorParams: no tensor named '" + std::string(name) + "'");
}

bool DetectorParams::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const NamedTensor& e) { return e.name == name; });
}

std::size_t DetectorParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

DetectorParams DetectorParams::clone() const {
  DetectorParams p;
  for (const auto& e : entries_) {
    Tensor t = e.tensor.detach();
    t.set_requires_grad(true);
    p.entries_.push_back({e.name, std::move(t)});
  }
  return p;
}

void DetectorParams::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

bool DetectorParams::bitwise_equal(const DetectorParams& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.tensor.shape() != b.tensor.shape()) return false;
    if (std::memcmp(a.tensor.data().data(), b.tensor.data().data(), a.tensor.numel() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

// --- encoders ------------------------------------------------------------------

Tensor lidar_scatter(std::span<const LidarPoint> points, const GridSpec& grid) {
  grid.validate();
  const std::size_t H = grid.rows, W = grid.cols, plane = H * W;
  std::vector<double> count(plane, 0.0), inten(plane, 0.0), off_x(plane, 0.0), off_y(plane, 0.0);
  for (const auto& p : points) {
    if (!grid.contains({p.x, p.y})) continue;
    const double u = (p.x - grid.x_min) / grid.cell_x();
    const double v = (p.y - grid.y_min) / grid.cell_y();
    const auto col = std::min(static_cast<std::size_t>(u), W - 1);
    const auto row = std::min(static_cast<std::size_t>(v), H - 1);
    const std::size_t cell = row * W + col;
    count[cell] += 1.0;
    inten[cell] += p.intensity;
    off_x[cell] += u - static_cast<double>(col) - 0.5;
    off_y[cell] += v - static_cast<double>(row) - 0.5;
  }
  std::vector<double> out(kLidarScatterChannels * plane, 0.0);
  for (std::size_t i = 0; i < plane; ++i) {
    if (count[i] == 0.0) continue;
    out[i] = std::log1p(count[i]);
    out[plane + i] = inten[i] / count[i];
    out[2 * plane + i] = off_x[i] / count[i];
    out[3 * plane + i] = off_y[i] / count[i];
  }
  return Tensor::from_data({kLidarScatterChannels, H, W}, std::move(out));
}

Tensor encode_lidar(std::span<const LidarPoint> points, const GridSpec& grid, const DetectorParams& params) {
  return conv_relu(lidar_scatter(points, grid), params, "lidar.conv");
}

Tensor encode_camera(const Tensor& observation, const GridSpec& grid, const DetectorParams& params) {
  if (observation.shape() != Shape{1, grid.rows, grid.cols}) {
    throw ShapeError("encode_camera: observation " + shape_str(observation.shape()) + " does not match grid " +
                     shape_str({1, grid.rows, grid.cols}));
  }
  return conv_relu(conv_relu(observation, params, "camera.conv1"), params, "camera.conv2");
}

Tensor fuse_low(const Tensor& lidar_low, const Tensor& camera_low, const DetectorParams& params) {
  if (lidar_low.rank() != 3 || camera_low.rank() != 3 || lidar_low.dim(1) != camera_low.dim(1) ||
      lidar_low.dim(2) != camera_low.dim(2)) {
    throw ShapeError("fuse_low: spatial mismatch " + shape_str(lidar_low.shape()) + " vs " +
                     shape_str(camera_low.shape()));
  }
  return conv_relu(concat_channels({lidar_low, camera_low}), params, "fuse.conv");
}

Tensor bev_encoder(const Tensor& low, const DetectorParams& params) {
  return conv_relu(conv_relu(low, params, "bev.conv1"), params, "bev.conv2");
}

HeadOutput det_head(const Tensor& high, const DetectorParams& params, const HeadSpec& spec) {
  spec.validate();
  const Tensor shared = conv_relu(high, params, "head.shared");
  HeadOutput out{sigmoid(conv_linear(shared, params, "head.cls")), conv_linear(shared, params, "head.reg")};
  if (out.cls.dim(0) != spec.num_classes) {
    throw ShapeError("det_head: head produces " + std::to_string(out.cls.dim(0)) + " classes, spec expects " +
                     std::to_string(spec.num_classes));
  }
  return out;
}

Tensor encode_low(const Scene& scene, const GridSpec& grid, const DetectorParams& params) {
  switch (params.modality()) {
    case Modality::Lidar: return encode_lidar(scene.lidar_points, grid, params);
    case Modality::Camera: return encode_camera(scene.camera_tensor(), grid, params);
    case Modality::Fusion:
      return fuse_low(encode_lidar(scene.lidar_points, grid, params),
                      encode_camera(scene.camera_tensor(), grid, params), params);
  }
  throw std::invalid_argument("encode_low: unknown modality");
}

BevFeatures forward_all(const Scene& scene, const GridSpec& grid, const DetectorParams& params, bool resp_use_max) {
  BevFeatures f;
  f.low = encode_low(scene, grid, params);
  f.high = bev_encoder(f.low, params);
  auto head = det_head(f.high, params, HeadSpec{params.widths().num_classes});
  f.cls = std::move(head.cls);
  f.reg = std::move(head.reg);
  f.resp = response_features(f.cls, f.reg, resp_use_max);
  return f;
}

// --- targets and detection loss ----------------------------------------------

Tensor heatmap_targets(std::span<const RotatedBox> boxes, const GridSpec& grid, std::size_t num_classes,
                       const GaussianParams& params) {
  std::vector<GaussianMask> per_class(num_classes, GaussianMask(grid.rows, grid.cols));
  for (const auto& box : boxes) {
    if (box.class_id < 0 || static_cast<std::size_t>(box.class_id) >= num_classes) {
      throw std::invalid_argument("heatmap_targets: class id " + std::to_string(box.class_id) + " out of range");
    }
    draw_gaussian(per_class[static_cast<std::size_t>(box.class_id)], world_to_grid({box.cx, box.cy}, grid).coord,
                  gaussian_radius(box, grid, params), params);
  }
  std::vector<double> out;
  out.reserve(num_classes * grid.cells());
  for (const auto& m : per_class) out.insert(out.end(), m.values().begin(), m.values().end());
  return Tensor::from_data({num_classes, grid.rows, grid.cols}, std::move(out));
}

RegTargets regression_targets(std::span<const RotatedBox> boxes, const GridSpec& grid) {
  RegTargets t;
  for (const auto& box : boxes) {
    if (!grid.contains({box.cx, box.cy})) continue;
    const GridCoord rc = world_to_grid({box.cx, box.cy}, grid).coord;
    const auto [row, col] = nearest_cell(rc, grid.rows, grid.cols);
    t.cells.push_back(row * grid.cols + col);
    t.values.insert(t.values.end(), {rc.col - static_cast<double>(col), rc.row - static_cast<double>(row),
                                     std::log(box.length), std::log(box.width), std::sin(box.yaw),
                                     std::cos(box.yaw)});
  }
  return t;
}

Tensor focal_loss(const Tensor& prob, const Tensor& target, const DetLossParams& params) {
  if (prob.shape() != target.shape()) {
    throw ShapeError("focal_loss: shape mismatch " + shape_str(prob.shape()) + " vs " + shape_str(target.shape()));
  }
  const double lo = params.prob_clamp, hi = 1.0 - params.prob_clamp;
  const double alpha = params.focal_alpha, beta = params.focal_beta;
  auto p = prob.data(), t = target.data();
  double acc = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], lo, hi);
    if (t[i] >= 1.0) {
      ++positives;
      acc -= std::pow(1.0 - q, alpha) * std::log(q);
    } else {
      acc -= std::pow(1.0 - t[i], beta) * std::pow(q, alpha) * std::log(1.0 - q);
    }
  }
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, positives));
  Tensor r = make_result({}, {acc * norm});
  if (Tape::should_record({&prob})) {
    Tape::current()->record(r, [prob, target, r, norm, lo, hi, alpha, beta] {
      const double g = adjoint(r)[0] * norm;
      auto p = prob.data(), t = target.data();
      auto gp = grad_buffer(prob);
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < lo || p[i] > hi) continue;  // clamped: zero subgradient
        const double q = p[i];
        double d;
        if (t[i] >= 1.0) {
          d = alpha * std::pow(1.0 - q, alpha - 1.0) * std::log(q) - std::pow(1.0 - q, alpha) / q;
        } else {
          const double w = std::pow(1.0 - t[i], beta);
          d = -w * (alpha * std::pow(q, alpha - 1.0) * std::log(1.0 - q) - std::pow(q, alpha) / (1.0 - q));
        }
        gp[i] += g * d;
      }
    });
  }
  return r;
}

DetLoss detection_loss(const Tensor& cls, const Tensor& reg, std::span<const RotatedBox> boxes, const GridSpec& grid,
                       const DetLossParams& params) {
  if (reg.rank() != 3 || reg.dim(0) != kRegTargets) {
    throw ShapeError("detection_loss: regression map must be [6,H,W], got " + shape_str(reg.shape()));
  }
  DetLoss out;
  out.cls = focal_loss(cls, heatmap_targets(boxes, grid, cls.dim(0), params.heatmap), params);
  const RegTargets targets = regression_targets(boxes, grid);
  if (targets.cells.empty()) {
    out.reg = Tensor::scalar(0.0);
  } else {
    const std::size_t n = targets.cells.size();
    Tensor pred = gather_cells(reg, targets.cells);
    Tensor goal = Tensor::from_data({n, kRegTargets}, targets.values);
    out.reg = scale(l1_sum(pred, goal), 1.0 / static_cast<double>(n));
  }
  out.total = add(out.cls, out.reg);
  return out;
}

// --- decoding --------------------------------------------------------------------

std::vector<Detection> decode(const Tensor& cls, const Tensor& reg, const GridSpec& grid, double score_thresh,
                              std::size_t max_dets) {
  Tape::NoGrad no_grad;
  const std::size_t C = cls.dim(0), H = cls.dim(1), W = cls.dim(2), plane = H * W;
  const Tensor peak_map = max_over_channel(cls);
  auto m = peak_map.data();
  auto c = cls.data();
  auto rv = reg.data();
  std::vector<Detection> dets;
  for (std::size_t row = 0; row < H; ++row) {
    for (std::size_t col = 0; col < W; ++col) {
      const double s = m[row * W + col];
      if (!(s > score_thresh)) continue;
      bool is_peak = true;
      for (long dr = -1; dr <= 1 && is_peak; ++dr) {
        for (long dc = -1; dc <= 1; ++dc) {
          const long r2 = static_cast<long>(row) + dr, c2 = static_cast<long>(col) + dc;
          if ((dr == 0 && dc == 0) || r2 < 0 || c2 < 0 || r2 >= static_cast<long>(H) || c2 >= static_cast<long>(W)) continue;
          if (m[static_cast<std::size_t>(r2) * W + static_cast<std::size_t>(c2)] > s) {
            is_peak = false;
            break;
          }
        }
      }
      if (!is_peak) continue;
      const std::size_t cell = row * W + col;
      int best = 0;
      for (std::size_t k = 1; k < C; ++k) {
        if (c[k * plane + cell] > c[static_cast<std::size_t>(best) * plane + cell]) best = static_cast<int>(k);
      }
      const GridCoord rc{static_cast<double>(row) + rv[plane + cell], static_cast<double>(col) + rv[cell]};
      const Point2 center = grid_to_world(rc, grid);
      Detection d;
      d.box = {center.x,
               center.y,
               std::exp(rv[2 * plane + cell]),
               std::exp(rv[3 * plane + cell]),
               std::atan2(rv[4 * plane + cell], rv[5 * plane + cell]),
               best};
      d.score = s;
      dets.push_back(d);
    }
  }
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (dets.size() > max_dets) dets.resize(max_dets);
  return dets;
}

}  // namespace unidistill
