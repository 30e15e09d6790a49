#include "unidistill/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace unidistill {

MatchResult match(std::span<const Detection> dets, std::span<const RotatedBox> gts, double dist_thresh) {
  MatchResult out;
  out.det_to_gt.assign(dets.size(), -1);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    int best = -1;
    double best_dist = dist_thresh;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].class_id != dets[d].box.class_id) continue;
      const double dist = std::hypot(gts[g].cx - dets[d].box.cx, gts[g].cy - dets[d].box.cy);
      if (dist < best_dist || (dist == best_dist && best < 0 && dist <= dist_thresh)) {
        best = static_cast<int>(g);
        best_dist = dist;
      }
    }
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = true;
      out.det_to_gt[d] = best;
      ++out.tp;
    } else {
      ++out.fp;
    }
  }
  out.fn = gts.size() - out.tp;
  return out;
}

double average_precision(std::vector<ScoredHit> hits, std::size_t num_gt) {
  if (num_gt == 0 || hits.empty()) return 0.0;
  std::stable_sort(hits.begin(), hits.end(), [](const ScoredHit& a, const ScoredHit& b) { return a.score > b.score; });
  std::vector<double> precision, recall;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    ++seen;
    if (hits[i].tp) ++tp;
    if (i + 1 < hits.size() && hits[i + 1].score == hits[i].score) continue;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(seen));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  // Precision envelope: best precision at any recall >= r.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double acc = 0.0;
  std::size_t k = 0;
  for (int step = 0; step <= 100; ++step) {
    const double r = step / 100.0;
    while (k < recall.size() && recall[k] < r - 1e-12) ++k;
    if (k < recall.size()) acc += precision[k];
  }
  return acc / 101.0;
}

namespace {

std::vector<Detection> by_score(std::vector<Detection> dets) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return dets;
}

}  // namespace

double angle_error(double a, double b) {
  double d = std::fmod(a - b, 2.0 * std::numbers::pi);
  if (d > std::numbers::pi) d -= 2.0 * std::numbers::pi;
  if (d <= -std::numbers::pi) d += 2.0 * std::numbers::pi;
  return std::abs(d);
}

EvalReport evaluate(std::span<const SceneDetections> dets, std::span<const Scene> scenes, const EvalConfig& config) {
  if (dets.size() != scenes.size()) {
    throw std::invalid_argument("evaluate: " + std::to_string(dets.size()) + " detection sets for " +
                                std::to_string(scenes.size()) + " scenes");
  }
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    if (dets[i].scene_id != scenes[i].id) {
      throw std::invalid_argument("evaluate: scene id mismatch at position " + std::to_string(i) + " (" +
                                  std::to_string(dets[i].scene_id) + " vs " + std::to_string(scenes[i].id) + ")");
    }
  }
  EvalReport report;
  std::vector<std::size_t> gt_per_class(config.num_classes, 0);
  for (const auto& s : scenes) {
    for (const auto& b : s.boxes) {
      if (b.class_id >= 0 && static_cast<std::size_t>(b.class_id) < config.num_classes) {
        ++gt_per_class[static_cast<std::size_t>(b.class_id)];
      }
    }
  }
  std::size_t total_gt = 0;
  for (auto n : gt_per_class) total_gt += n;
  report.empty = total_gt == 0;

  double ap_sum = 0.0;
  std::size_t ap_count = 0;
  for (double thr : config.thresholds) {
    std::vector<std::vector<ScoredHit>> hits(config.num_classes);
    std::vector<ClassThresholdAp> rows(config.num_classes);
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const auto sorted = by_score(dets[i].dets);
      const MatchResult m = match(sorted, scenes[i].boxes, thr);
      for (std::size_t d = 0; d < sorted.size(); ++d) {
        const auto cls = static_cast<std::size_t>(sorted[d].box.class_id);
        if (cls >= config.num_classes) continue;
        const bool tp = m.det_to_gt[d] >= 0;
        hits[cls].push_back({sorted[d].score, tp});
        (tp ? rows[cls].tp : rows[cls].fp)++;
      }
    }
    for (std::size_t c = 0; c < config.num_classes; ++c) {
      rows[c].class_id = static_cast<int>(c);
      rows[c].threshold = thr;
      rows[c].num_gt = gt_per_class[c];
      rows[c].fn = gt_per_class[c] - rows[c].tp;
      rows[c].ap = average_precision(hits[c], gt_per_class[c]);
      if (gt_per_class[c] > 0) {
        ap_sum += rows[c].ap;
        ++ap_count;
      }
      report.entries.push_back(rows[c]);
    }
  }

  double ate = 0.0, aoe = 0.0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto sorted = by_score(dets[i].dets);
    const MatchResult m = match(sorted, scenes[i].boxes, config.tp_threshold);
    for (std::size_t d = 0; d < sorted.size(); ++d) {
      if (m.det_to_gt[d] < 0) continue;
      const auto& g = scenes[i].boxes[static_cast<std::size_t>(m.det_to_gt[d])];
      ate += std::hypot(g.cx - sorted[d].box.cx, g.cy - sorted[d].box.cy);
      aoe += angle_error(sorted[d].box.yaw, g.yaw);
    }
    report.tp += m.tp;
    report.fp += m.fp;
    report.fn += m.fn;
  }
  if (report.tp > 0) {
    report.mATE = ate / static_cast<double>(report.tp);
    report.mAOE = aoe / static_cast<double>(report.tp);
  }
  report.mAP = ap_count > 0 ? ap_sum / static_cast<double>(ap_count) : 0.0;
  return report;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  os << "row,class,threshold,value,tp,fp,fn,num_gt\n";
  for (const auto& e : entries) {
    os << "ap," << e.class_id << ',' << num(e.threshold) << ',' << num(e.ap) << ',' << e.tp << ',' << e.fp << ','
       << e.fn << ',' << e.num_gt << '\n';
  }
  os << "mAP,,," << num(mAP) << ",,,,\n";
  os << "mATE,,," << num(mATE) << ',' << tp << ',' << fp << ',' << fn << ",\n";
  os << "mAOE,,," << num(mAOE) << ',' << tp << ',' << fp << ',' << fn << ",\n";
  os << "empty,,," << (empty ? 1 : 0) << ",,,,\n";
  return os.str();
}

}  // namespace unidistill
