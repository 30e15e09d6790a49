#include "unidistill/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "unidistill/io.hpp"

namespace unidistill {

namespace fs = std::filesystem;

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  std::vector<std::exception_ptr> errors(n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::mutex mu;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard lock(mu);
            if (next >= n) return;
            i = next++;
          }
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<Scene> obtain_scenes(const RunConfig& config, const std::optional<fs::path>& scenes_file) {
  if (scenes_file) return load_scenes(*scenes_file);
  return gen_scenes(config.scenes, 0, config.num_scenes);
}

fs::path cmd_gen_scenes(const RunConfig& config, std::size_t count) {
  const fs::path out = fs::path(config.out_dir) / "scenes.bin";
  save_scenes(out, gen_scenes(config.scenes, 0, count));
  return out;
}

namespace {

void write_config(const RunConfig& config) { save_run_config(fs::path(config.out_dir) / "config.json", config); }

}  // namespace

fs::path cmd_train(const RunConfig& config, Modality modality, const fs::path& scenes_file) {
  const auto scenes = load_scenes(scenes_file);
  const TrainResult r = train_detector(config, modality, train_split(scenes, config.holdout));
  const fs::path dir(config.out_dir);
  write_config(config);
  write_text_file(dir / (to_string(modality) + "_metrics.csv"), metrics_csv(r.metrics));
  const fs::path ckpt = dir / (to_string(modality) + ".ckpt");
  save_detector(ckpt, r.params);
  return ckpt;
}

fs::path cmd_distill(const RunConfig& config, const fs::path& teacher_file, const fs::path& scenes_file) {
  const DetectorParams teacher = load_detector(teacher_file);
  const auto scenes = load_scenes(scenes_file);
  const DistillResult r = distill_detector(config, teacher, train_split(scenes, config.holdout));
  const fs::path dir(config.out_dir);
  const std::string stem = "student_" + to_string(config.distill.path);
  write_config(config);
  write_text_file(dir / (stem + "_metrics.csv"), metrics_csv(r.metrics));
  const fs::path ckpt = dir / (stem + ".ckpt");
  save_detector(ckpt, r.student);
  return ckpt;
}

fs::path cmd_eval(const RunConfig& config, const fs::path& checkpoint_file, const fs::path& scenes_file) {
  const DetectorParams params = load_detector(checkpoint_file);
  const auto scenes = load_scenes(scenes_file);
  RunConfig c = config;
  c.widths = params.widths();
  const EvalReport report = evaluate_detector(params, scenes, c);
  const fs::path out = fs::path(config.out_dir) / "eval.csv";
  write_text_file(out, report.to_csv());
  return out;
}

// --- gradient checks -----------------------------------------------------------

std::vector<NamedGradCheck> run_grad_checks(std::uint64_t seed, const GradCheckOptions& options) {
  SceneGenParams sp = SceneGenParams::defaults();
  sp.grid = GridSpec{-8.0, 8.0, -8.0, 8.0, 16, 16};
  sp.min_boxes = 2;
  sp.max_boxes = 3;
  sp.seed = seed;
  const Scene scene = gen_scene(sp, 0);
  const GridSpec& grid = sp.grid;
  const DetectorWidths widths{4, 6, 3};

  const DistillPath path = DistillPath::F2C;
  const DetectorParams teacher = DetectorParams::init(teacher_modality(path), widths, derive_seed(seed, {1}));
  DetectorParams student = DetectorParams::init(student_modality(path), widths, derive_seed(seed, {2}));
  BevFeatures tf;
  {
    Tape::NoGrad no_grad;
    tf = forward_all(scene, grid, teacher);
  }
  // Adaptive layers start away from identity so their gradients are exercised.
  Rng rng = make_rng(seed, {stream::kFixture});
  std::normal_distribution<double> normal(0.0, 0.3);
  auto random_adapt = [&](std::size_t c) {
    AdaptLayer a = AdaptLayer::identity(c, c);
    for (auto& v : a.kernel().mutable_data()) v += normal(rng);
    for (auto& v : a.bias().mutable_data()) v += normal(rng);
    return a;
  };
  const AdaptLayer adapt_low = random_adapt(widths.low_channels);
  const AdaptLayer adapt_high = random_adapt(widths.high_channels);

  std::vector<NamedTensor> leaves = student.entries();
  leaves.push_back({"adapt_low.kernel", adapt_low.kernel()});
  leaves.push_back({"adapt_low.bias", adapt_low.bias()});
  leaves.push_back({"adapt_high.kernel", adapt_high.kernel()});
  leaves.push_back({"adapt_high.bias", adapt_high.bias()});

  DistillConfig base = DistillConfig::defaults(path);
  base.adapt_low = base.adapt_high = true;
  auto terms = [&](const DistillConfig& dc) {
    const BevFeatures sf = forward_all(scene, grid, student, dc.resp_use_max);
    BevFeatures t = tf;
    if (!dc.resp_use_max) t.resp = response_features(tf.cls, tf.reg, false);
    const AdaptLayer& af = dc.fea_level == FeatureLevel::Low ? adapt_low : adapt_high;
    const AdaptLayer& ar = dc.rel_level == FeatureLevel::Low ? adapt_low : adapt_high;
    return std::pair{distill_terms(t, sf, scene.boxes, grid, dc, af, ar), sf};
  };

  std::vector<NamedGradCheck> out;
  auto check = [&](const std::string& name, const std::function<Tensor()>& f) {
    out.push_back({name, grad_check(f, leaves, options)});
  };
  for (AlignMode mode : {AlignMode::Crucial, AlignMode::Gaussian, AlignMode::Complete}) {
    DistillConfig dc = base;
    dc.fea_mode = dc.rel_mode = dc.resp_mode = mode;
    check("l_fea[" + to_string(mode) + "]", [&, dc] { return terms(dc).first.fea; });
    check("l_rel[" + to_string(mode) + "]", [&, dc] { return terms(dc).first.rel; });
    check("l_resp[" + to_string(mode) + "]", [&, dc] { return terms(dc).first.resp; });
  }
  {
    DistillConfig dc = base;
    dc.fea_level = FeatureLevel::High;
    dc.rel_level = FeatureLevel::Low;
    dc.resp_use_max = false;
    check("l_fea[high]", [&, dc] { return terms(dc).first.fea; });
    check("l_rel[low]", [&, dc] { return terms(dc).first.rel; });
    check("l_resp[no-max]", [&, dc] { return terms(dc).first.resp; });
  }
  check("l_det", [&] {
    const BevFeatures sf = forward_all(scene, grid, student);
    return detection_loss(sf.cls, sf.reg, scene.boxes, grid).total;
  });
  check("l_total", [&] {
    const auto [t, sf] = terms(base);
    const Tensor det = detection_loss(sf.cls, sf.reg, scene.boxes, grid).total;
    return total_loss(det, t.fea, t.rel, t.resp, base.weights);
  });
  return out;
}

// --- ablations -------------------------------------------------------------------

std::vector<std::string> ablation_studies() {
  return {"fea-mode", "fea-level", "rel-mode", "rel-level", "resp-mode", "resp-max", "adapt", "loss-combos"};
}

std::vector<std::string> ablation_variants(std::string_view study) {
  if (study == "fea-mode" || study == "rel-mode" || study == "resp-mode") {
    return {"baseline", "complete", "gaussian", "crucial"};
  }
  if (study == "fea-level" || study == "rel-level") return {"baseline", "low", "high"};
  if (study == "resp-max") return {"baseline", "without-max", "with-max"};
  if (study == "adapt") return {"baseline", "without-adapt", "with-adapt"};
  if (study == "loss-combos") {
    std::vector<std::string> v;
    for (int i = 1; i <= 8; ++i) v.push_back("setting-" + std::to_string(i));
    return v;
  }
  throw std::invalid_argument("unknown study '" + std::string(study) + "'");
}

std::optional<DistillConfig> ablation_setting(std::string_view study, std::string_view variant,
                                              const DistillConfig& base) {
  const auto variants = ablation_variants(study);
  if (std::find(variants.begin(), variants.end(), variant) == variants.end()) {
    throw std::invalid_argument("unknown variant '" + std::string(variant) + "' for study '" + std::string(study) +
                                "'");
  }
  if (variant == "baseline" || variant == "setting-1") return std::nullopt;
  DistillConfig dc = base;
  const DistillWeights w = base.weights;
  auto only = [&](bool fea, bool rel, bool resp) {
    dc.weights = {fea ? w.lambda1 : 0.0, rel ? w.lambda2 : 0.0, resp ? w.lambda3 : 0.0};
  };
  if (study == "fea-mode") {
    only(true, false, false);
    dc.fea_mode = parse_align_mode(variant);
  } else if (study == "fea-level") {
    only(true, false, false);
    dc.fea_level = parse_level(variant);
  } else if (study == "rel-mode") {
    only(false, true, false);
    dc.rel_mode = parse_align_mode(variant);
  } else if (study == "rel-level") {
    only(false, true, false);
    dc.rel_level = parse_level(variant);
  } else if (study == "resp-mode") {
    only(false, false, true);
    dc.resp_mode = parse_align_mode(variant);
  } else if (study == "resp-max") {
    only(false, false, true);
    dc.resp_use_max = variant == "with-max";
  } else if (study == "adapt") {
    dc.adapt_low = dc.adapt_high = variant == "with-adapt";
  } else {  // loss-combos, settings 2..8
    const int s = variant.back() - '0';
    const bool fea = s == 2 || s == 5 || s == 7 || s == 8;
    const bool rel = s == 3 || s == 5 || s == 6 || s == 8;
    const bool resp = s == 4 || s == 6 || s == 7 || s == 8;
    only(fea, rel, resp);
  }
  return dc;
}

std::vector<AblationRow> run_ablation(const RunConfig& config, std::string_view study, std::span<const Scene> scenes,
                                      const DetectorParams* teacher) {
  const auto variants = ablation_variants(study);
  const std::span<const Scene> train = train_split(scenes, config.holdout);
  const std::span<const Scene> held = eval_split(scenes, config.holdout);
  const Modality tmod = teacher_modality(config.distill.path);
  if (teacher != nullptr && teacher->modality() != tmod) {
    throw std::invalid_argument("teacher modality " + to_string(teacher->modality()) + " does not match path " +
                                to_string(config.distill.path));
  }

  std::vector<DetectorParams> teachers(config.seeds);
  parallel_for(config.seeds, config.threads, [&](std::size_t i) {
    if (teacher != nullptr) {
      teachers[i] = teacher->clone();
      return;
    }
    RunConfig c = config;
    c.seed = config.seed + i;
    if (config.optimizer.teacher_steps > 0) c.optimizer.steps = config.optimizer.teacher_steps;
    teachers[i] = train_detector(c, tmod, train).params;
  });

  std::vector<AblationRow> rows(config.seeds * variants.size());
  parallel_for(rows.size(), config.threads, [&](std::size_t k) {
    const std::size_t i = k / variants.size();
    const std::string& variant = variants[k % variants.size()];
    RunConfig c = config;
    c.seed = config.seed + i;
    const auto setting = ablation_setting(study, variant, config.distill);
    DetectorParams student;
    if (setting) {
      c.distill = *setting;
      student = distill_detector(c, teachers[i], train).student;
    } else {
      student = train_detector(c, student_modality(config.distill.path), train).params;
    }
    rows[k] = {std::string(study), variant, c.seed, evaluate_detector(student, held, c)};
  });
  return rows;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os << "study,variant,seed,mAP,mATE,mAOE,tp,fp,fn\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g,%zu,%zu,%zu", r.report.mAP, r.report.mATE, r.report.mAOE,
                  r.report.tp, r.report.fp, r.report.fn);
    os << r.study << ',' << r.variant << ',' << r.seed << ',' << buf << '\n';
  }
  return os.str();
}

fs::path cmd_ablate(const RunConfig& config, std::string_view study, const std::optional<fs::path>& scenes_file,
                    const std::optional<fs::path>& teacher_file) {
  ablation_variants(study);
  const auto scenes = obtain_scenes(config, scenes_file);
  std::optional<DetectorParams> teacher;
  if (teacher_file) teacher = load_detector(*teacher_file);
  const auto rows = run_ablation(config, study, scenes, teacher ? &*teacher : nullptr);
  write_config(config);
  const fs::path out = fs::path(config.out_dir) / ("ablate_" + std::string(study) + ".csv");
  write_text_file(out, ablation_csv(rows));
  return out;
}

// --- response dumps --------------------------------------------------------------

std::vector<double> channel_mean(const Tensor& resp) {
  if (resp.rank() != 3) throw ShapeError("channel_mean: expected [C,H,W], got " + shape_str(resp.shape()));
  const std::size_t c = resp.dim(0), hw = resp.dim(1) * resp.dim(2);
  std::vector<double> out(hw, 0.0);
  const auto d = resp.data();
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < hw; ++i) out[i] += d[k * hw + i];
  }
  for (auto& v : out) v /= static_cast<double>(c);
  return out;
}

std::string to_pgm(std::span<const double> values, std::size_t rows, std::size_t cols) {
  if (values.size() != rows * cols) throw std::invalid_argument("to_pgm: value count does not match rows x cols");
  double lo = 0.0, hi = 0.0;
  if (!values.empty()) {
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    lo = *mn;
    hi = *mx;
  }
  std::ostringstream os;
  os << "P2\n" << cols << ' ' << rows << "\n255\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = values[r * cols + c];
      const long px = hi > lo ? std::lround(255.0 * (v - lo) / (hi - lo)) : 0;
      os << px << (c + 1 < cols ? ' ' : '\n');
    }
  }
  return os.str();
}

fs::path cmd_dump_resp(const RunConfig& config, const fs::path& checkpoint_file, const fs::path& scenes_file,
                       std::size_t scene_index) {
  const DetectorParams params = load_detector(checkpoint_file);
  const auto scenes = load_scenes(scenes_file);
  if (scene_index >= scenes.size()) {
    throw std::invalid_argument("scene index " + std::to_string(scene_index) + " out of range (" +
                                std::to_string(scenes.size()) + " scenes)");
  }
  const Scene& scene = scenes[scene_index];
  const GridSpec& grid = config.scenes.grid;
  Tensor resp;
  {
    Tape::NoGrad no_grad;
    resp = forward_all(scene, grid, params, config.distill.resp_use_max).resp;
  }
  const auto mean = channel_mean(resp);
  const fs::path dir(config.out_dir);
  const std::string stem = "resp_" + std::to_string(scene.id);
  std::ostringstream csv;
  csv << "row,col,value\n";
  char buf[64];
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", mean[r * grid.cols + c]);
      csv << r << ',' << c << ',' << buf << '\n';
    }
  }
  write_text_file(dir / (stem + ".csv"), csv.str());
  const fs::path pgm = dir / (stem + ".pgm");
  write_text_file(pgm, to_pgm(mean, grid.rows, grid.cols));
  return pgm;
}

}  // namespace unidistill
