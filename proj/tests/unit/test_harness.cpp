#include <atomic>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "test_support.hpp"
#include "unidistill/harness.hpp"
#include "unidistill/io.hpp"

using namespace unidistill;

namespace {

RunConfig tiny_config(const std::filesystem::path& out) {
  RunConfig c;
  c.scenes.grid = GridSpec{-8.0, 8.0, -8.0, 8.0, 16, 16};
  c.scenes.max_boxes = 3;
  c.num_scenes = 10;
  c.holdout = 4;
  c.widths = {4, 6, 3};
  c.optimizer.steps = 3;
  c.optimizer.batch = 2;
  c.seeds = 2;
  c.threads = 2;
  c.out_dir = out.string();
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("parallel_for covers every index and rethrows the first failure") {
  std::vector<std::atomic<int>> hits(50);
  parallel_for(50, 3, [&](std::size_t i) { hits[i]++; });
  for (auto& h : hits) CHECK(h.load() == 1);
  parallel_for(0, 3, [](std::size_t) { FAIL("no work expected"); });
  try {
    parallel_for(20, 4, [](std::size_t i) {
      if (i == 7 || i == 13) throw std::runtime_error("boom " + std::to_string(i));
    });
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()) == "boom 7");
  }
}

TEST_CASE("gradient checks of every loss pass") {
  const auto checks = run_grad_checks(0);
  CHECK(checks.size() >= 11);
  for (const auto& c : checks) {
    CAPTURE(c.name);
    CHECK_MESSAGE(c.report.passed, c.report.summary());
    CHECK(c.report.max_rel_error <= 1e-4);
  }
}

TEST_CASE("ablation catalogue") {
  const auto base = DistillConfig::defaults(DistillPath::F2C);
  for (const auto& study : ablation_studies()) {
    const auto variants = ablation_variants(study);
    CHECK(variants.size() >= 3);
    CHECK_FALSE(ablation_setting(study, variants.front(), base).has_value());
    for (std::size_t i = 1; i < variants.size(); ++i) CHECK(ablation_setting(study, variants[i], base).has_value());
  }
  CHECK_THROWS_AS(ablation_variants("nope"), std::invalid_argument);
  CHECK_THROWS_AS(ablation_setting("fea-mode", "low", base), std::invalid_argument);

  const auto fea = *ablation_setting("fea-mode", "gaussian", base);
  CHECK(fea.fea_mode == AlignMode::Gaussian);
  CHECK(fea.weights == DistillWeights{base.weights.lambda1, 0.0, 0.0});
  const auto rel = *ablation_setting("rel-level", "low", base);
  CHECK(rel.rel_level == FeatureLevel::Low);
  CHECK(rel.weights == DistillWeights{0.0, base.weights.lambda2, 0.0});
  CHECK_FALSE(ablation_setting("resp-max", "without-max", base)->resp_use_max);
  CHECK(ablation_setting("adapt", "with-adapt", base)->adapt_low);
  CHECK_FALSE(ablation_setting("adapt", "without-adapt", base)->adapt_high);
  CHECK(ablation_setting("loss-combos", "setting-8", base)->weights == base.weights);
  CHECK(ablation_setting("loss-combos", "setting-6", base)->weights ==
        DistillWeights{0.0, base.weights.lambda2, base.weights.lambda3});
  CHECK(ablation_setting("loss-combos", "setting-7", base)->weights ==
        DistillWeights{base.weights.lambda1, 0.0, base.weights.lambda3});
}

TEST_CASE("ablation runs are deterministic and their baseline matches plain training") {
  const auto dir = testing_support::scratch_dir("ablate");
  const auto c = tiny_config(dir);
  const auto scenes = obtain_scenes(c, std::nullopt);
  const auto rows = run_ablation(c, "resp-max", scenes);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].variant == "baseline");
  CHECK(rows[0].seed == 0);
  CHECK(rows[3].seed == 1);
  const auto again = run_ablation(c, "resp-max", scenes);
  CHECK(ablation_csv(rows) == ablation_csv(again));

  const auto plain = train_detector(c, Modality::Camera, train_split(scenes, c.holdout)).params;
  CHECK(evaluate_detector(plain, eval_split(scenes, c.holdout), c).to_csv() == rows[0].report.to_csv());

  const auto csv = ablation_csv(rows);
  CHECK(csv.rfind("study,variant,seed,mAP,mATE,mAOE,tp,fp,fn\nresp-max,baseline,0,", 0) == 0);

  const auto wrong = DetectorParams::init(Modality::Lidar, c.widths, 0);
  CHECK_THROWS_AS(run_ablation(c, "resp-max", scenes, &wrong), std::invalid_argument);
}

TEST_CASE("pgm rendering") {
  const std::vector<double> v{0.0, 1.0, 2.0, 4.0, 3.0, 0.5};
  CHECK(to_pgm(v, 2, 3) == "P2\n3 2\n255\n0 64 128\n255 191 32\n");
  CHECK(to_pgm(std::vector<double>(4, 7.0), 2, 2) == "P2\n2 2\n255\n0 0\n0 0\n");
  CHECK_THROWS_AS(to_pgm(v, 2, 2), std::invalid_argument);
  const auto t = Tensor::from_data({2, 1, 2}, {1.0, 2.0, 3.0, 6.0});
  CHECK(channel_mean(t) == std::vector<double>{2.0, 4.0});
  CHECK_THROWS_AS(channel_mean(Tensor::zeros({4})), ShapeError);

  // The brightest pixel sits at the single hot cell; a zero map is uniformly 0.
  std::vector<double> resp(3 * 4 * 5, 0.0);
  CHECK(to_pgm(channel_mean(Tensor::from_data({3, 4, 5}, resp)), 4, 5) ==
        "P2\n5 4\n255\n0 0 0 0 0\n0 0 0 0 0\n0 0 0 0 0\n0 0 0 0 0\n");
  resp[1 * 20 + 2 * 5 + 3] = 0.9;
  const auto hot = to_pgm(channel_mean(Tensor::from_data({3, 4, 5}, resp)), 4, 5);
  CHECK(hot == "P2\n5 4\n255\n0 0 0 0 0\n0 0 0 0 0\n0 0 0 255 0\n0 0 0 0 0\n");

  // Channel mean equals a per-cell loop.
  const auto r = testing_support::random_tensor({4, 3, 3}, 60);
  const auto m = channel_mean(r);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 4; ++k) acc += r.at(k, i, j);
      CHECK(m[i * 3 + j] == doctest::Approx(acc / 4.0).epsilon(1e-15));
    }
  }
}

TEST_CASE("scene generation command edge cases") {
  const auto dir = testing_support::scratch_dir("gen");
  const auto c = tiny_config(dir);
  CHECK(load_scenes(cmd_gen_scenes(c, 0)).empty());
  const auto bytes = read_file_bytes(cmd_gen_scenes(c, 5));
  CHECK(read_file_bytes(cmd_gen_scenes(c, 5)) == bytes);
}

TEST_CASE("command pipeline writes its artifacts") {
  namespace fs = std::filesystem;
  const auto dir = testing_support::scratch_dir("pipeline");
  auto c = tiny_config(dir);
  const fs::path scenes = cmd_gen_scenes(c, c.num_scenes);
  CHECK(scenes == dir / "scenes.bin");
  CHECK(load_scenes(scenes).size() == 10);

  const fs::path teacher = cmd_train(c, Modality::Fusion, scenes);
  CHECK(teacher == dir / "fusion.ckpt");
  CHECK(fs::exists(dir / "fusion_metrics.csv"));
  CHECK(fs::exists(dir / "config.json"));
  CHECK(run_config_to_json(load_run_config(dir / "config.json")) == run_config_to_json(c));

  const fs::path student = cmd_distill(c, teacher, scenes);
  CHECK(student == dir / "student_f2c.ckpt");
  CHECK(load_detector(student).modality() == Modality::Camera);
  const auto metrics = slurp(dir / "student_f2c_metrics.csv");
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 4);

  const fs::path eval = cmd_eval(c, student, scenes);
  CHECK(slurp(eval).rfind("row,class,threshold,value,tp,fp,fn,num_gt\n", 0) == 0);

  const fs::path pgm = cmd_dump_resp(c, student, scenes, 2);
  CHECK(pgm == dir / "resp_2.pgm");
  CHECK(slurp(pgm).rfind("P2\n16 16\n255\n", 0) == 0);
  const auto resp_csv = slurp(dir / "resp_2.csv");
  CHECK(std::count(resp_csv.begin(), resp_csv.end(), '\n') == 1 + 256);
  CHECK_THROWS_AS(cmd_dump_resp(c, student, scenes, 10), std::invalid_argument);

  c.seeds = 1;
  const fs::path abl = cmd_ablate(c, "adapt", scenes, teacher);
  CHECK(abl == dir / "ablate_adapt.csv");
  const auto abl_text = slurp(abl);
  CHECK(std::count(abl_text.begin(), abl_text.end(), '\n') == 4);
  CHECK_THROWS_AS(cmd_ablate(c, "nope", scenes, teacher), std::invalid_argument);
  CHECK_THROWS_AS(cmd_distill(c, student, scenes), std::invalid_argument);
}
