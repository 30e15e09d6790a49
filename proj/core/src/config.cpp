#include "unidistill/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "unidistill/io.hpp"

namespace unidistill {

namespace {

using nlohmann::json;

class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw std::invalid_argument("config: '" + where_ + "' must be an object");
  }
  ~Reader() = default;

  template <class T>
  void get(const char* key, T& out) {
    seen_.push_back(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument("config: bad value for '" + where_ + "." + key + "': " + e.what());
    }
  }
  const json* child(const char* key) {
    seen_.push_back(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      bool known = false;
      for (const auto& s : seen_) known = known || s == k;
      if (!known) throw std::invalid_argument("config: unknown key '" + where_ + "." + k + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::vector<std::string> seen_;
};

json grid_json(const GridSpec& g) {
  return {{"x_min", g.x_min}, {"x_max", g.x_max}, {"y_min", g.y_min},
          {"y_max", g.y_max}, {"rows", g.rows},   {"cols", g.cols}};
}

void read_grid(const json& j, GridSpec& g) {
  Reader r(j, "scenes.grid");
  r.get("x_min", g.x_min);
  r.get("x_max", g.x_max);
  r.get("y_min", g.y_min);
  r.get("y_max", g.y_max);
  r.get("rows", g.rows);
  r.get("cols", g.cols);
  r.finish();
}

json gaussian_json(const GaussianParams& p) {
  return {{"min_overlap", p.min_overlap},
          {"sigma_per_radius", p.sigma_per_radius},
          {"cutoff", p.cutoff},
          {"min_radius", p.min_radius}};
}

void read_gaussian(const json& j, GaussianParams& p, const std::string& where) {
  Reader r(j, where);
  r.get("min_overlap", p.min_overlap);
  r.get("sigma_per_radius", p.sigma_per_radius);
  r.get("cutoff", p.cutoff);
  r.get("min_radius", p.min_radius);
  r.finish();
}

json scenes_json(const SceneGenParams& s) {
  json classes = json::array();
  for (const auto& c : s.classes) {
    classes.push_back({{"name", c.name},
                       {"length_min", c.length_min},
                       {"length_max", c.length_max},
                       {"width_min", c.width_min},
                       {"width_max", c.width_max},
                       {"weight", c.weight},
                       {"reflectance", c.reflectance}});
  }
  return {{"grid", grid_json(s.grid)},
          {"classes", classes},
          {"min_boxes", s.min_boxes},
          {"max_boxes", s.max_boxes},
          {"lidar_density", s.lidar_density},
          {"lidar_dropout", s.lidar_dropout},
          {"clutter_density", s.clutter_density},
          {"lidar_jitter", s.lidar_jitter},
          {"intensity_noise", s.intensity_noise},
          {"camera_blur", s.camera_blur},
          {"camera_noise", s.camera_noise},
          {"seed", s.seed}};
}

void read_scenes(const json& j, SceneGenParams& s) {
  Reader r(j, "scenes");
  if (const json* g = r.child("grid")) read_grid(*g, s.grid);
  if (const json* cs = r.child("classes")) {
    if (!cs->is_array()) throw std::invalid_argument("config: 'scenes.classes' must be an array");
    s.classes.clear();
    for (const auto& cj : *cs) {
      ClassSpec c;
      Reader cr(cj, "scenes.classes[]");
      cr.get("name", c.name);
      cr.get("length_min", c.length_min);
      cr.get("length_max", c.length_max);
      cr.get("width_min", c.width_min);
      cr.get("width_max", c.width_max);
      cr.get("weight", c.weight);
      cr.get("reflectance", c.reflectance);
      cr.finish();
      s.classes.push_back(c);
    }
  }
  r.get("min_boxes", s.min_boxes);
  r.get("max_boxes", s.max_boxes);
  r.get("lidar_density", s.lidar_density);
  r.get("lidar_dropout", s.lidar_dropout);
  r.get("clutter_density", s.clutter_density);
  r.get("lidar_jitter", s.lidar_jitter);
  r.get("intensity_noise", s.intensity_noise);
  r.get("camera_blur", s.camera_blur);
  r.get("camera_noise", s.camera_noise);
  r.get("seed", s.seed);
  r.finish();
}

json distill_json(const DistillConfig& d) {
  return {{"path", to_string(d.path)},
          {"lambda1", d.weights.lambda1},
          {"lambda2", d.weights.lambda2},
          {"lambda3", d.weights.lambda3},
          {"adapt_low", d.adapt_low},
          {"adapt_high", d.adapt_high},
          {"fea_mode", to_string(d.fea_mode)},
          {"rel_mode", to_string(d.rel_mode)},
          {"resp_mode", to_string(d.resp_mode)},
          {"fea_level", to_string(d.fea_level)},
          {"rel_level", to_string(d.rel_level)},
          {"resp_use_max", d.resp_use_max},
          {"mask", gaussian_json(d.mask)}};
}

void read_distill(const json& j, DistillConfig& d) {
  Reader r(j, "distill");
  // A path switches every other field to that path's defaults first.
  std::string text;
  r.get("path", text);
  if (!text.empty()) d = DistillConfig::defaults(parse_path(text));
  r.get("lambda1", d.weights.lambda1);
  r.get("lambda2", d.weights.lambda2);
  r.get("lambda3", d.weights.lambda3);
  r.get("adapt_low", d.adapt_low);
  r.get("adapt_high", d.adapt_high);
  auto mode = [&](const char* key, AlignMode& out) {
    std::string s;
    r.get(key, s);
    if (!s.empty()) out = parse_align_mode(s);
  };
  auto level = [&](const char* key, FeatureLevel& out) {
    std::string s;
    r.get(key, s);
    if (!s.empty()) out = parse_level(s);
  };
  mode("fea_mode", d.fea_mode);
  mode("rel_mode", d.rel_mode);
  mode("resp_mode", d.resp_mode);
  level("fea_level", d.fea_level);
  level("rel_level", d.rel_level);
  r.get("resp_use_max", d.resp_use_max);
  if (const json* m = r.child("mask")) read_gaussian(*m, d.mask, "distill.mask");
  r.finish();
}

}  // namespace

void RunConfig::validate() const {
  scenes.validate();
  if (holdout > num_scenes) throw std::invalid_argument("config: holdout exceeds num_scenes");
  if (widths.low_channels == 0 || widths.high_channels == 0 || widths.num_classes == 0) {
    throw std::invalid_argument("config: detector widths must be positive");
  }
  if (widths.num_classes != scenes.classes.size()) {
    throw std::invalid_argument("config: detector num_classes (" + std::to_string(widths.num_classes) +
                                ") differs from the scene class count (" + std::to_string(scenes.classes.size()) +
                                ")");
  }
  if (!(optimizer.learning_rate > 0.0) || optimizer.batch == 0) {
    throw std::invalid_argument("config: learning_rate and batch must be positive");
  }
  if (seeds == 0) throw std::invalid_argument("config: seeds must be positive");
}

RunConfig parse_run_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  RunConfig c;
  Reader r(j, "config");
  if (const json* s = r.child("scenes")) read_scenes(*s, c.scenes);
  r.get("num_scenes", c.num_scenes);
  r.get("holdout", c.holdout);
  if (const json* w = r.child("widths")) {
    Reader wr(*w, "widths");
    wr.get("low_channels", c.widths.low_channels);
    wr.get("high_channels", c.widths.high_channels);
    wr.get("num_classes", c.widths.num_classes);
    wr.finish();
  }
  if (const json* o = r.child("optimizer")) {
    Reader orr(*o, "optimizer");
    orr.get("learning_rate", c.optimizer.learning_rate);
    orr.get("beta1", c.optimizer.beta1);
    orr.get("beta2", c.optimizer.beta2);
    orr.get("epsilon", c.optimizer.epsilon);
    orr.get("steps", c.optimizer.steps);
    orr.get("batch", c.optimizer.batch);
    orr.get("teacher_steps", c.optimizer.teacher_steps);
    orr.finish();
  }
  if (const json* d = r.child("det_loss")) {
    Reader dr(*d, "det_loss");
    dr.get("focal_alpha", c.det_loss.focal_alpha);
    dr.get("focal_beta", c.det_loss.focal_beta);
    dr.get("prob_clamp", c.det_loss.prob_clamp);
    if (const json* h = dr.child("heatmap")) read_gaussian(*h, c.det_loss.heatmap, "det_loss.heatmap");
    dr.finish();
  }
  if (const json* d = r.child("distill")) read_distill(*d, c.distill);
  if (const json* e = r.child("eval")) {
    Reader er(*e, "eval");
    er.get("score_thresh", c.eval.score_thresh);
    er.get("max_dets", c.eval.max_dets);
    er.finish();
  }
  r.get("seed", c.seed);
  r.get("seeds", c.seeds);
  r.get("threads", c.threads);
  r.get("out_dir", c.out_dir);
  r.finish();
  c.validate();
  return c;
}

std::string run_config_to_json(const RunConfig& c) {
  const json j = {
      {"scenes", scenes_json(c.scenes)},
      {"num_scenes", c.num_scenes},
      {"holdout", c.holdout},
      {"widths",
       {{"low_channels", c.widths.low_channels},
        {"high_channels", c.widths.high_channels},
        {"num_classes", c.widths.num_classes}}},
      {"optimizer",
       {{"learning_rate", c.optimizer.learning_rate},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"epsilon", c.optimizer.epsilon},
        {"steps", c.optimizer.steps},
        {"batch", c.optimizer.batch},
        {"teacher_steps", c.optimizer.teacher_steps}}},
      {"det_loss",
       {{"focal_alpha", c.det_loss.focal_alpha},
        {"focal_beta", c.det_loss.focal_beta},
        {"prob_clamp", c.det_loss.prob_clamp},
        {"heatmap", gaussian_json(c.det_loss.heatmap)}}},
      {"distill", distill_json(c.distill)},
      {"eval", {{"score_thresh", c.eval.score_thresh}, {"max_dets", c.eval.max_dets}}},
      {"seed", c.seed},
      {"seeds", c.seeds},
      {"threads", c.threads},
      {"out_dir", c.out_dir},
  };
  return j.dump(2) + "\n";
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

void save_run_config(const std::filesystem::path& path, const RunConfig& config) {
  write_text_file(path, run_config_to_json(config));
}

}  // namespace unidistill
