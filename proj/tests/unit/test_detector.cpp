#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "doctest.h"
#include "test_support.hpp"
#include "unidistill/detector.hpp"
#include "unidistill/grad_check.hpp"
#include "unidistill/io.hpp"
#include "unidistill/synthscene.hpp"
#include "unidistill/training.hpp"

using namespace unidistill;
using namespace testing_support;

namespace {

const GridSpec kGrid{-8.0, 8.0, -8.0, 8.0, 16, 16};
const DetectorWidths kSmall{4, 6, 3};

Scene small_scene(std::uint64_t id) {
  SceneGenParams p = SceneGenParams::defaults();
  p.grid = kGrid;
  p.max_boxes = 3;
  return gen_scene(p, id);
}

bool all_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST_CASE("lidar scatter") {
  const auto empty = lidar_scatter({}, kGrid);
  CHECK(empty.shape() == Shape{4, 16, 16});
  for (double v : empty.data()) CHECK(v == 0.0);

  const Point2 center = grid_to_world({3, 5}, kGrid);
  const std::vector<LidarPoint> one{{center.x, center.y, 0.8}};
  const auto s = lidar_scatter(one, kGrid);
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t i = 0; i < 256; ++i) {
      if (i != 3 * 16 + 5) CHECK(s.data()[k * 256 + i] == 0.0);
    }
  }
  CHECK(s.at(0, 3, 5) == std::log1p(1.0));
  CHECK(s.at(1, 3, 5) == 0.8);
  CHECK(std::abs(s.at(2, 3, 5)) < 1e-12);
  CHECK(std::abs(s.at(3, 3, 5)) < 1e-12);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-10, 10), ui(0, 1);
  std::vector<LidarPoint> cloud;
  for (int i = 0; i < 2000; ++i) cloud.push_back({u(rng), u(rng), ui(rng)});
  const auto got = lidar_scatter(cloud, kGrid);
  for (std::size_t r = 0; r < 16; ++r) {
    for (std::size_t c = 0; c < 16; ++c) {
      const double x0 = -8.0 + static_cast<double>(c), y0 = -8.0 + static_cast<double>(r);
      double n = 0, in = 0, ox = 0, oy = 0;
      for (const auto& p : cloud) {
        if (p.x >= x0 && p.x < x0 + 1 && p.y >= y0 && p.y < y0 + 1) {
          n += 1;
          in += p.intensity;
          ox += p.x - (x0 + 0.5);
          oy += p.y - (y0 + 0.5);
        }
      }
      CHECK(got.at(0, r, c) == doctest::Approx(std::log1p(n)).epsilon(1e-12));
      if (n > 0) {
        CHECK(got.at(1, r, c) == doctest::Approx(in / n).epsilon(1e-12));
        CHECK(std::abs(got.at(2, r, c) - ox / n) < 1e-12);
        CHECK(std::abs(got.at(3, r, c) - oy / n) < 1e-12);
      }
    }
  }
}

TEST_CASE("encoders on zero inputs give bias patterns") {
  const auto lidar = DetectorParams::init(Modality::Lidar, kSmall, 1);
  const auto low = encode_lidar({}, kGrid, lidar);
  const auto b = lidar.at("lidar.conv.bias").data();
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t i = 0; i < 256; ++i) CHECK(low.data()[k * 256 + i] == std::max(0.0, b[k]));
  }

  const auto camera = DetectorParams::init(Modality::Camera, kSmall, 2);
  const auto z = Tensor::zeros({1, 16, 16});
  CHECK(all_equal(encode_camera(z, kGrid, camera), encode_camera(z, kGrid, camera)));
  CHECK_THROWS_AS(encode_camera(Tensor::zeros({1, 8, 16}), kGrid, camera), ShapeError);

  const auto fusion = DetectorParams::init(Modality::Fusion, kSmall, 3);
  const auto fz = fuse_low(Tensor::zeros({4, 16, 16}), Tensor::zeros({4, 16, 16}), fusion);
  const auto fb = fusion.at("fuse.conv.bias").data();
  for (std::size_t k = 0; k < 4; ++k) CHECK(fz.at(k, 7, 7) == std::max(0.0, fb[k]));
  CHECK_THROWS_AS(fuse_low(Tensor::zeros({4, 16, 16}), Tensor::zeros({4, 8, 16}), fusion), ShapeError);

  const auto high = bev_encoder(Tensor::zeros({4, 16, 16}), lidar);
  CHECK(high.shape() == Shape{6, 16, 16});
  CHECK(all_equal(high, bev_encoder(Tensor::zeros({4, 16, 16}), lidar)));
  CHECK_THROWS_AS(bev_encoder(Tensor::zeros({5, 16, 16}), lidar), ShapeError);
}

TEST_CASE("fusion depends on input order and passes gradient to both inputs") {
  const auto fusion = DetectorParams::init(Modality::Fusion, kSmall, 4);
  auto a = random_tensor({4, 16, 16}, 5, 0, 1, true);
  auto b = random_tensor({4, 16, 16}, 6, 0, 1, true);
  CHECK_FALSE(all_equal(fuse_low(a, b, fusion), fuse_low(b, a, fusion)));
  backprop([&] { return sum(fuse_low(a, b, fusion)); });
  double ga = 0, gb = 0;
  for (double g : grad_values(a)) ga += std::abs(g);
  for (double g : grad_values(b)) gb += std::abs(g);
  CHECK(ga > 0);
  CHECK(gb > 0);
  GradCheckOptions opt;
  opt.max_elements_per_leaf = 64;
  CHECK(grad_check([&] { return sum(fuse_low(a, b, fusion)); }, {{"a", a}, {"b", b}}, opt).passed);
}

TEST_CASE("detection head") {
  const auto params = DetectorParams::init(Modality::Lidar, kSmall, 7);
  const auto high = random_tensor({6, 16, 16}, 8);
  const auto out = det_head(high, params, HeadSpec{3});
  CHECK(out.cls.shape() == Shape{3, 16, 16});
  CHECK(out.reg.shape() == Shape{6, 16, 16});
  for (double v : out.cls.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  CHECK_THROWS_AS(det_head(high, params, HeadSpec{2}), ShapeError);
  CHECK_THROWS_AS((HeadSpec{3, 5}.validate()), std::invalid_argument);
}

TEST_CASE("every layer's gradient checks through the detection loss") {
  const Scene scene = small_scene(9);
  for (Modality m : {Modality::Lidar, Modality::Camera, Modality::Fusion}) {
    CAPTURE(to_string(m));
    const auto params = DetectorParams::init(m, kSmall, 10);
    GradCheckOptions opt;
    opt.max_elements_per_leaf = 24;
    const auto report = grad_check(
        [&] {
          const auto f = forward_all(scene, kGrid, params);
          return detection_loss(f.cls, f.reg, scene.boxes, kGrid).total;
        },
        params.entries(), opt);
    CHECK_MESSAGE(report.passed, report.summary());
  }
}

TEST_CASE("forward_all bundles consistent features") {
  const Scene scene = small_scene(11);
  const auto params = DetectorParams::init(Modality::Fusion, kSmall, 12);
  const auto f = forward_all(scene, kGrid, params);
  CHECK_NOTHROW(f.validate());
  CHECK(f.low.shape() == Shape{4, 16, 16});
  CHECK(f.high.shape() == Shape{6, 16, 16});
  CHECK(f.resp.shape() == Shape{7, 16, 16});
  for (std::size_t r = 0; r < 16; ++r) {
    for (std::size_t c = 0; c < 16; ++c) {
      CHECK(f.resp.at(0, r, c) == std::max({f.cls.at(0, r, c), f.cls.at(1, r, c), f.cls.at(2, r, c)}));
    }
  }
  const auto g = forward_all(scene, kGrid, params);
  CHECK(all_equal(f.high, g.high));
  CHECK(all_equal(f.resp, g.resp));
}

TEST_CASE("focal loss matches a per-cell formula oracle") {
  const auto prob = random_tensor({3, 16, 16}, 13, 0.001, 0.999);
  const auto boxes = small_scene(14).boxes;
  const auto target = heatmap_targets(boxes, kGrid, 3);
  double acc = 0.0, positives = 0.0;
  for (std::size_t i = 0; i < prob.numel(); ++i) {
    const double p = prob.data()[i], t = target.data()[i];
    if (t == 1.0) {
      positives += 1;
      acc += -(1 - p) * (1 - p) * std::log(p);
    } else {
      acc += -std::pow(1 - t, 4) * p * p * std::log(1 - p);
    }
  }
  CHECK(positives == static_cast<double>(boxes.size()));
  CHECK(focal_loss(prob, target).item() == doctest::Approx(acc / std::max(1.0, positives)).epsilon(1e-12));

  auto leaf = random_tensor({3, 16, 16}, 15, 0.05, 0.95, true);
  CHECK(grad_check([&] { return focal_loss(leaf, target); }, {{"prob", leaf}}).passed);
}

TEST_CASE("detection loss at the perfect-prediction limit") {
  const Scene scene = small_scene(16);
  REQUIRE(!scene.boxes.empty());
  DetLossParams params;
  params.heatmap.sigma_per_radius = 0.1;  // neighbours fall below the cutoff: binary targets
  const auto cls = heatmap_targets(scene.boxes, kGrid, 3, params.heatmap);
  for (double v : cls.data()) CHECK((v == 0.0 || v == 1.0));
  std::vector<double> reg(6 * 256, 0.0);
  const auto targets = regression_targets(scene.boxes, kGrid);
  for (std::size_t n = 0; n < targets.cells.size(); ++n) {
    for (std::size_t k = 0; k < 6; ++k) reg[k * 256 + targets.cells[n]] = targets.values[n * 6 + k];
  }
  const auto loss = detection_loss(cls, Tensor::from_data({6, 16, 16}, reg), scene.boxes, kGrid, params);
  CHECK(loss.total.item() <= 1e-9);
  CHECK(loss.reg.item() == 0.0);
}

TEST_CASE("empty scenes only pay the background term") {
  const auto cls = random_tensor({3, 16, 16}, 17, 0.01, 0.5);
  const auto loss = detection_loss(cls, random_tensor({6, 16, 16}, 18), {}, kGrid);
  CHECK(loss.reg.item() == 0.0);
  double acc = 0.0;
  for (double p : cls.data()) acc += -p * p * std::log(1 - p);
  CHECK(loss.cls.item() == doctest::Approx(acc).epsilon(1e-12));
}

TEST_CASE("decoding") {
  CHECK(decode(Tensor::zeros({3, 16, 16}), Tensor::zeros({6, 16, 16}), kGrid, 0.1, 10).empty());

  // Encode boxes whose centers sit in distinct cells, then decode.
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> u(-7.5, 7.5), ud(0.5, 5), ua(-3.1, 3.1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<RotatedBox> boxes;
    std::vector<std::size_t> used;
    while (boxes.size() < 4) {
      RotatedBox b{u(rng), u(rng), ud(rng), ud(rng), ua(rng), static_cast<int>(boxes.size() % 3)};
      const auto t = regression_targets(std::span(&b, 1), kGrid);
      const std::size_t cell = t.cells[0];
      const auto r = static_cast<long>(cell / 16), c = static_cast<long>(cell % 16);
      bool far = true;
      for (auto o : used) far = far && (std::abs(static_cast<long>(o / 16) - r) > 1 || std::abs(static_cast<long>(o % 16) - c) > 1);
      if (!far) continue;
      used.push_back(cell);
      boxes.push_back(b);
    }
    std::vector<double> cls(3 * 256, 0.0), reg(6 * 256, 0.0);
    const auto targets = regression_targets(boxes, kGrid);
    for (std::size_t n = 0; n < boxes.size(); ++n) {
      cls[static_cast<std::size_t>(boxes[n].class_id) * 256 + targets.cells[n]] = 0.9 - 0.1 * static_cast<double>(n);
      for (std::size_t k = 0; k < 6; ++k) reg[k * 256 + targets.cells[n]] = targets.values[n * 6 + k];
    }
    const auto dets =
        decode(Tensor::from_data({3, 16, 16}, cls), Tensor::from_data({6, 16, 16}, reg), kGrid, 0.1, 10);
    REQUIRE(dets.size() == boxes.size());
    for (std::size_t n = 0; n < boxes.size(); ++n) {
      CHECK(dets[n].box.class_id == boxes[n].class_id);
      CHECK(std::abs(dets[n].box.cx - boxes[n].cx) < 1e-6);
      CHECK(std::abs(dets[n].box.cy - boxes[n].cy) < 1e-6);
      CHECK(std::abs(dets[n].box.length - boxes[n].length) < 1e-6);
      CHECK(std::abs(dets[n].box.width - boxes[n].width) < 1e-6);
      CHECK(std::abs(dets[n].box.yaw - boxes[n].yaw) < 1e-6);
    }
  }
}

TEST_CASE("two separated peaks decode in score order and respect max_dets") {
  std::vector<double> cls(3 * 256, 0.0);
  cls[1 * 256 + 2 * 16 + 2] = 0.4;
  cls[2 * 256 + 10 * 16 + 12] = 0.8;
  const auto c = Tensor::from_data({3, 16, 16}, cls);
  const auto dets = decode(c, Tensor::zeros({6, 16, 16}), kGrid, 0.1, 10);
  REQUIRE(dets.size() == 2);
  CHECK(dets[0].score == 0.8);
  CHECK(dets[0].box.class_id == 2);
  CHECK(dets[1].box.class_id == 1);
  CHECK(decode(c, Tensor::zeros({6, 16, 16}), kGrid, 0.1, 1).size() == 1);
  CHECK(decode(c, Tensor::zeros({6, 16, 16}), kGrid, 0.5, 10).size() == 1);
}

TEST_CASE("parameters: init, names and checkpoint round trip") {
  const auto dir = scratch_dir("detector");
  for (Modality m : {Modality::Lidar, Modality::Camera, Modality::Fusion}) {
    const auto p = DetectorParams::init(m, {5, 7, 2}, 21);
    CHECK(p.modality() == m);
    CHECK(p.widths() == DetectorWidths{5, 7, 2});
    CHECK(p.bitwise_equal(DetectorParams::init(m, {5, 7, 2}, 21)));
    CHECK_FALSE(p.bitwise_equal(DetectorParams::init(m, {5, 7, 2}, 22)));
    const auto path = dir / (to_string(m) + ".ckpt");
    save_detector(path, p);
    const auto q = load_detector(path);
    CHECK(q.bitwise_equal(p));
    CHECK(q.modality() == m);
  }
  CHECK(DetectorParams::init(Modality::Fusion, kSmall, 1).contains("fuse.conv.kernel"));
  CHECK(DetectorParams::init(Modality::Camera, kSmall, 1).contains("camera.conv2.bias"));
  CHECK_FALSE(DetectorParams::init(Modality::Camera, kSmall, 1).contains("lidar.conv.kernel"));
}

TEST_CASE("corrupted checkpoints raise format errors") {
  const auto dir = scratch_dir("detector_bad");
  const auto p = DetectorParams::init(Modality::Lidar, kSmall, 23);
  save_detector(dir / "ok.ckpt", p);
  auto bytes = read_file_bytes(dir / "ok.ckpt");

  auto bad = bytes;
  bad[0] = 'X';
  write_file_bytes(dir / "magic.ckpt", bad);
  CHECK_THROWS_AS(load_detector(dir / "magic.ckpt"), FormatError);

  bad = bytes;
  bad[8] = 9;  // version
  write_file_bytes(dir / "version.ckpt", bad);
  CHECK_THROWS_AS(load_detector(dir / "version.ckpt"), FormatError);

  bad.assign(bytes.begin(), bytes.end() - 5);
  write_file_bytes(dir / "short.ckpt", bad);
  CHECK_THROWS_AS(load_detector(dir / "short.ckpt"), FormatError);

  bad = bytes;
  bad.push_back(0);
  write_file_bytes(dir / "long.ckpt", bad);
  CHECK_THROWS_AS(load_detector(dir / "long.ckpt"), FormatError);

  CHECK_THROWS(load_detector(dir / "missing.ckpt"));
}

TEST_CASE("200 steps on a fixed batch of 8 scenes halve the detection loss") {
  const SceneGenParams sp = SceneGenParams::defaults();
  const auto scenes = gen_scenes(sp, 0, 8);
  auto params = DetectorParams::init(Modality::Lidar, DetectorWidths{}, 24);
  std::vector<Tensor> leaves;
  for (auto& e : params.entries()) leaves.push_back(e.tensor);
  Adam adam(leaves, OptimizerConfig{});
  auto batch_loss = [&](bool train) {
    double total = 0.0;
    for (const auto& s : scenes) {
      Tape tape;
      Tape::Scope scope(tape);
      const auto f = forward_all(s, sp.grid, params);
      const auto loss = scale(detection_loss(f.cls, f.reg, s.boxes, sp.grid).total, 1.0 / 8.0);
      total += loss.item();
      if (train) tape.backward(loss);
    }
    return total;
  };
  const double initial = batch_loss(false);
  for (int step = 0; step < 200; ++step) {
    params.zero_grad();
    batch_loss(true);
    adam.step();
  }
  const double final_loss = batch_loss(false);
  MESSAGE("L_Det " << initial << " -> " << final_loss);
  CHECK(final_loss < 0.5 * initial);
}
