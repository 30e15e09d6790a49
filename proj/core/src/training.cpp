#include "unidistill/training.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace unidistill {

std::string metrics_csv(std::span<const StepMetrics> metrics) {
  std::ostringstream os;
  os << "step,l_det,l_fea,l_rel,l_resp,total\n";
  char buf[256];
  for (const auto& m : metrics) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", m.step, m.l_det, m.l_fea, m.l_rel,
                  m.l_resp, m.total);
    os << buf;
  }
  return os.str();
}

Adam::Adam(std::vector<Tensor> params, const OptimizerConfig& config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    const auto g = params_[i].grad_data();
    auto x = params_[i].mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < x.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      x[k] -= config_.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.epsilon);
    }
  }
}

std::span<const Scene> train_split(std::span<const Scene> scenes, std::size_t holdout) {
  if (holdout > scenes.size()) throw std::invalid_argument("holdout exceeds the number of scenes");
  return scenes.first(scenes.size() - holdout);
}

std::span<const Scene> eval_split(std::span<const Scene> scenes, std::size_t holdout) {
  if (holdout > scenes.size()) throw std::invalid_argument("holdout exceeds the number of scenes");
  return scenes.last(holdout);
}

namespace {

struct Trainer {
  Trainer(const RunConfig& c, const DetectorParams* t) : config(c), teacher(t) {}

  const RunConfig& config;
  const DetectorParams* teacher;
  DetectorParams student;
  AdaptLayer adapt_low, adapt_high;
  std::vector<StepMetrics> metrics;

  void run(std::span<const Scene> scenes) {
    if (config.optimizer.steps > 0 && scenes.empty()) throw std::invalid_argument("training needs at least one scene");
    std::vector<Tensor> leaves;
    for (auto& e : student.entries()) leaves.push_back(e.tensor);
    for (AdaptLayer* a : {&adapt_low, &adapt_high}) {
      if (a->enabled()) {
        leaves.push_back(a->kernel());
        leaves.push_back(a->bias());
      }
    }
    Adam adam(leaves, config.optimizer);
    Rng batch_rng = make_rng(config.seed, {stream::kBatch});
    std::uniform_int_distribution<std::size_t> pick(0, scenes.empty() ? 0 : scenes.size() - 1);
    const auto& grid = config.scenes.grid;
    const auto& dc = config.distill;
    const double inv_batch = 1.0 / static_cast<double>(config.optimizer.batch);
    const AdaptLayer& adapt_fea = dc.fea_level == FeatureLevel::Low ? adapt_low : adapt_high;
    const AdaptLayer& adapt_rel = dc.rel_level == FeatureLevel::Low ? adapt_low : adapt_high;

    for (std::size_t step = 0; step < config.optimizer.steps; ++step) {
      for (auto& t : leaves) t.zero_grad();
      StepMetrics m;
      m.step = step;
      for (std::size_t b = 0; b < config.optimizer.batch; ++b) {
        const Scene& scene = scenes[pick(batch_rng)];
        Tape tape;
        Tape::Scope scope(tape);
        const BevFeatures sf = forward_all(scene, grid, student, dc.resp_use_max);
        const DetLoss det = detection_loss(sf.cls, sf.reg, scene.boxes, grid, config.det_loss);
        Tensor loss = det.total;
        m.l_det += det.total.item() * inv_batch;
        if (teacher != nullptr) {
          BevFeatures tf;
          {
            Tape::NoGrad no_grad;
            tf = forward_all(scene, grid, *teacher, dc.resp_use_max);
          }
          const DistillTerms terms = distill_terms(tf, sf, scene.boxes, grid, dc, adapt_fea, adapt_rel);
          loss = total_loss(det.total, terms.fea, terms.rel, terms.resp, dc.weights);
          m.l_fea += terms.fea.item() * inv_batch;
          m.l_rel += terms.rel.item() * inv_batch;
          m.l_resp += terms.resp.item() * inv_batch;
        }
        const double value = loss.item();
        if (!std::isfinite(value)) {
          throw NumericError("non-finite loss at step " + std::to_string(step), step);
        }
        m.total += value * inv_batch;
        tape.backward(scale(loss, inv_batch));
      }
      adam.step();
      metrics.push_back(m);
    }
  }
};

}  // namespace

TrainResult train_detector(const RunConfig& config, Modality modality, std::span<const Scene> scenes) {
  config.validate();
  Trainer t(config, nullptr);
  t.student = DetectorParams::init(modality, config.widths, config.seed);
  t.run(scenes);
  return {std::move(t.student), std::move(t.metrics)};
}

DistillResult distill_detector(const RunConfig& config, const DetectorParams& teacher, std::span<const Scene> scenes) {
  config.validate();
  const DistillConfig& dc = config.distill;
  if (teacher.modality() != teacher_modality(dc.path)) {
    throw std::invalid_argument("teacher modality " + to_string(teacher.modality()) + " does not match path " +
                                to_string(dc.path) + " (expects " + to_string(teacher_modality(dc.path)) + ")");
  }
  if (!(teacher.widths() == config.widths)) {
    throw std::invalid_argument("teacher widths differ from the configured detector widths");
  }
  const DetectorParams frozen = teacher.clone();
  Trainer t(config, &frozen);
  t.student = DetectorParams::init(student_modality(dc.path), config.widths, config.seed);
  if (dc.adapt_low) t.adapt_low = AdaptLayer::identity(config.widths.low_channels, config.widths.low_channels);
  if (dc.adapt_high) t.adapt_high = AdaptLayer::identity(config.widths.high_channels, config.widths.high_channels);
  t.run(scenes);
  return {std::move(t.student), std::move(t.adapt_low), std::move(t.adapt_high), std::move(t.metrics)};
}

std::vector<SceneDetections> detect_scenes(const DetectorParams& params, std::span<const Scene> scenes,
                                           const GridSpec& grid, const EvalSettings& settings) {
  Tape::NoGrad no_grad;
  std::vector<SceneDetections> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) {
    const BevFeatures f = forward_all(s, grid, params);
    out.push_back({s.id, decode(f.cls, f.reg, grid, settings.score_thresh, settings.max_dets)});
  }
  return out;
}

EvalReport evaluate_detector(const DetectorParams& params, std::span<const Scene> scenes, const RunConfig& config) {
  const auto dets = detect_scenes(params, scenes, config.scenes.grid, config.eval);
  EvalConfig ec;
  ec.num_classes = config.widths.num_classes;
  return evaluate(dets, scenes, ec);
}

}  // namespace unidistill
