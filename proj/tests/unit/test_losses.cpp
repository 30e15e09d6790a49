#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "loss_oracles.hpp"
#include "test_support.hpp"
#include "unidistill/grad_check.hpp"
#include "unidistill/losses.hpp"

using namespace unidistill;
using namespace testing_support;

namespace {

const GridSpec kGrid{-8.0, 8.0, -8.0, 8.0, 16, 16};

std::vector<RotatedBox> random_boxes(std::uint64_t seed, int n) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(-9, 9), len(0.5, 5), ang(-3.14159, 3.14159);
  std::vector<RotatedBox> out;
  for (int i = 0; i < n; ++i) out.push_back({pos(rng), pos(rng), len(rng), len(rng), ang(rng), i % 3});
  return out;
}

}  // namespace

TEST_CASE("feature distillation: zero, constant offset and enumeration oracle") {
  const auto t = random_tensor({4, 16, 16}, 1);
  const auto boxes = random_boxes(2, 1);
  CHECK(feature_distill(t, t, boxes, kGrid, {}).item() == 0.0);
  CHECK(feature_distill(add_scalar(t, 1.0), t, boxes, kGrid, {}).item() == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(feature_distill(t, random_tensor({4, 16, 16}, 3), {}, kGrid, {}).item() == 0.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = random_tensor({4, 16, 16}, 100 + seed), b = random_tensor({4, 16, 16}, 200 + seed);
    const auto bx = random_boxes(300 + seed, 1 + static_cast<int>(seed % 4));
    CHECK(std::abs(feature_distill(a, b, bx, kGrid, {}).item() - oracle::feature_crucial(a, b, bx, kGrid)) < 1e-10);
  }
  CHECK_THROWS_AS(feature_distill(t, random_tensor({3, 16, 16}, 4), boxes, kGrid, {}), ShapeError);
}

TEST_CASE("feature distillation: gaussian and complete modes") {
  const auto a = random_tensor({3, 16, 16}, 5), b = random_tensor({3, 16, 16}, 6);
  const auto boxes = random_boxes(7, 3);
  const auto mask = boxes_mask(boxes, kGrid);
  std::vector<double> ones(256, 1.0);
  // Both modes are the masked L1 sum without the channel division.
  CHECK(std::abs(feature_distill(a, b, boxes, kGrid, {}, AlignMode::Gaussian).item() -
                 3.0 * oracle::masked_response(a, b, {mask.values().begin(), mask.values().end()})) < 1e-10);
  CHECK(std::abs(feature_distill(a, b, boxes, kGrid, {}, AlignMode::Complete).item() -
                 3.0 * oracle::masked_response(a, b, ones)) < 1e-10);
}

TEST_CASE("relation matrices") {
  const auto constant = Tensor::full({3, 16, 16}, 0.7);
  const auto box = random_boxes(8, 1)[0];
  for (const auto& row : relation_matrix(constant, box, kGrid)) {
    for (double v : row) CHECK(v == doctest::Approx(1.0).epsilon(1e-14));
  }

  // Features that differ in which channel is active are orthogonal.
  std::vector<double> v(2 * 16 * 16, 0.0);
  for (std::size_t r = 0; r < 16; ++r) {
    for (std::size_t c = 0; c < 16; ++c) v[(c < 8 ? 0 : 1) * 256 + r * 16 + c] = 1.0;
  }
  const auto halves = Tensor::from_data({2, 16, 16}, v);
  const RotatedBox wide{0.0, 0.0, 10.0, 2.0, 0.0, 0};  // corner 1 at x=+5, corner 2 at x=-5
  const auto m = relation_matrix(halves, wide, kGrid);
  CHECK(m[0][1] == doctest::Approx(0.0));
  CHECK(m[0][3] == doctest::Approx(1.0));

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto map = random_tensor({5, 16, 16}, 400 + seed);
    const auto b = random_boxes(500 + seed, 1)[0];
    const auto got = relation_matrix(map, b, kGrid);
    const auto want = oracle::relation(map, b, kGrid);
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(std::abs(got[i][i] - 1.0) < 1e-12);
      for (std::size_t j = 0; j < 9; ++j) {
        CHECK(std::abs(got[i][j] - want[i][j]) < 1e-12);
        CHECK(got[i][j] == got[j][i]);
        CHECK(std::abs(got[i][j]) <= 1.0 + 1e-15);
      }
    }
  }
}

TEST_CASE("relation distillation") {
  const auto t = random_tensor({5, 16, 16}, 9);
  const auto boxes = random_boxes(10, 2);
  CHECK(relation_distill(t, t, boxes, kGrid, {}).item() == 0.0);
  CHECK(relation_distill(t, scale(t, 3.5), boxes, kGrid, {}).item() < 1e-15);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = random_tensor({5, 16, 16}, 600 + seed), b = random_tensor({5, 16, 16}, 700 + seed);
    const auto bx = random_boxes(800 + seed, 2);
    CHECK(std::abs(relation_distill(a, b, bx, kGrid, {}).item() - oracle::relation_crucial(a, b, bx, kGrid)) <
          1e-10);
  }
}

TEST_CASE("relation distillation over mask-weighted cells") {
  const auto a = random_tensor({3, 16, 16}, 11), b = random_tensor({3, 16, 16}, 12);
  const auto boxes = random_boxes(13, 2);
  const auto mask = boxes_mask(boxes, kGrid);
  std::vector<std::size_t> cells;
  for (std::size_t i = 0; i < 256; ++i) {
    if (mask.values()[i] > 0) cells.push_back(i);
  }
  auto feat = [](const Tensor& m, std::size_t cell) {
    std::vector<double> v(3);
    for (std::size_t k = 0; k < 3; ++k) v[k] = m.data()[k * 256 + cell];
    return v;
  };
  double num = 0.0, den = 0.0;
  for (auto i : cells) {
    for (auto j : cells) {
      const double w = mask.values()[i] * mask.values()[j];
      num += w * std::abs(oracle::cosine(feat(a, i), feat(a, j)) - oracle::cosine(feat(b, i), feat(b, j)));
      den += w;
    }
  }
  CHECK(std::abs(relation_distill(a, b, boxes, kGrid, {}, AlignMode::Gaussian).item() - num / den) < 1e-10);
}

TEST_CASE("response features") {
  const auto cls1 = random_tensor({1, 4, 4}, 14), reg = random_tensor({2, 4, 4}, 15);
  const auto r1 = response_features(cls1, reg, true), r2 = response_features(cls1, reg, false);
  CHECK(r1.shape() == r2.shape());
  CHECK(std::equal(r1.data().begin(), r1.data().end(), r2.data().begin()));

  const auto z = response_features(Tensor::zeros({3, 4, 4}), Tensor::zeros({2, 4, 4}), true);
  for (double v : z.data()) CHECK(v == 0.0);

  const auto cls = random_tensor({3, 4, 4}, 16);
  const auto r = response_features(cls, reg, true);
  CHECK(r.shape() == Shape{3, 4, 4});
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(r.at(0, i, j) == std::max({cls.at(0, i, j), cls.at(1, i, j), cls.at(2, i, j)}));
      CHECK(r.at(2, i, j) == reg.at(1, i, j));
    }
  }
  CHECK(response_features(cls, reg, false).shape() == Shape{5, 4, 4});
}

TEST_CASE("response distillation") {
  const auto t = random_tensor({7, 16, 16}, 17);
  const auto boxes = random_boxes(18, 3);
  CHECK(response_distill(t, t, boxes, kGrid).item() == 0.0);
  CHECK(response_distill(add_scalar(t, 1.0), t, boxes, kGrid).item() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(response_distill(t, add_scalar(t, 1.0), {}, kGrid).item() == 0.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = random_tensor({7, 16, 16}, 900 + seed), b = random_tensor({7, 16, 16}, 950 + seed);
    const auto bx = random_boxes(990 + seed, 1);
    const auto mask = boxes_mask(bx, kGrid);
    CHECK(std::abs(response_distill(a, b, bx, kGrid).item() -
                   oracle::masked_response(a, b, {mask.values().begin(), mask.values().end()})) < 1e-10);
  }

  // Crucial mode puts unit weight on the rounded crucial cells.
  const auto a = random_tensor({7, 16, 16}, 19), b = random_tensor({7, 16, 16}, 20);
  std::vector<double> m(256, 0.0);
  for (const auto& rc : oracle::crucial_rc(boxes[0], kGrid)) {
    m[static_cast<std::size_t>(std::lround(rc[0])) * 16 + static_cast<std::size_t>(std::lround(rc[1]))] = 1.0;
  }
  CHECK(std::abs(response_distill(a, b, std::span(boxes).first(1), kGrid, {}, AlignMode::Crucial).item() -
                 oracle::masked_response(a, b, m)) < 1e-12);
  CHECK(std::abs(response_distill(a, b, boxes, kGrid, {}, AlignMode::Complete).item() -
                 oracle::masked_response(a, b, std::vector<double>(256, 1.0))) < 1e-12);
}

TEST_CASE("total loss and default weights") {
  const auto det = Tensor::scalar(1.0), fea = Tensor::scalar(0.1), rel = Tensor::scalar(0.2),
             resp = Tensor::scalar(0.3);
  CHECK(total_loss(det, fea, rel, resp, {0, 0, 0}).item() == 1.0);
  CHECK(total_loss(det, fea, rel, resp, {10, 5, 10}).item() == doctest::Approx(6.0).epsilon(1e-14));
  const auto zero = Tensor::scalar(0.0);
  CHECK(total_loss(Tensor::scalar(2.5), zero, zero, zero, default_weights(DistillPath::F2L)).item() == 2.5);

  CHECK(default_weights(DistillPath::F2L) == DistillWeights{10, 1, 10});
  CHECK(default_weights(DistillPath::F2C) == DistillWeights{10, 5, 10});
  CHECK(default_weights(DistillPath::C2L) == DistillWeights{10, 5, 1});
  CHECK(default_weights(DistillPath::L2C) == DistillWeights{100, 40, 10});
  CHECK(default_adaptive(DistillPath::C2L));
  CHECK_FALSE(default_adaptive(DistillPath::F2C));
  CHECK_FALSE(default_adaptive(DistillPath::F2L));
  CHECK_FALSE(default_adaptive(DistillPath::L2C));
  const auto c2l = DistillConfig::defaults(DistillPath::C2L);
  CHECK(c2l.adapt_low);
  CHECK(c2l.adapt_high);
  CHECK(c2l.fea_mode == AlignMode::Crucial);
  CHECK(c2l.rel_mode == AlignMode::Crucial);
  CHECK(c2l.resp_mode == AlignMode::Gaussian);
  CHECK(c2l.fea_level == FeatureLevel::Low);
  CHECK(c2l.rel_level == FeatureLevel::High);
  CHECK(c2l.resp_use_max);
  CHECK(teacher_modality(DistillPath::C2L) == Modality::Camera);
  CHECK(student_modality(DistillPath::F2C) == Modality::Camera);
  CHECK(parse_path("l2c") == DistillPath::L2C);
  CHECK_THROWS_AS(parse_path("x2y"), std::invalid_argument);
}

TEST_CASE("teacher receives no gradient and student gradients check") {
  auto t_low = random_tensor({4, 16, 16}, 21, -1, 1, true);
  auto s_low = random_tensor({4, 16, 16}, 22, -1, 1, true);
  auto t_resp = random_tensor({7, 16, 16}, 23, -1, 1, true);
  auto s_resp = random_tensor({7, 16, 16}, 24, -1, 1, true);
  const auto boxes = random_boxes(25, 2);
  backprop([&] {
    return add(add(feature_distill(t_low, s_low, boxes, kGrid, {}), relation_distill(t_low, s_low, boxes, kGrid, {})),
               response_distill(t_resp, s_resp, boxes, kGrid));
  });
  for (double g : grad_values(t_low)) CHECK(g == 0.0);
  for (double g : grad_values(t_resp)) CHECK(g == 0.0);
  double mass = 0.0;
  for (double g : grad_values(s_low)) mass += std::abs(g);
  CHECK(mass > 0.0);

  for (AlignMode mode : {AlignMode::Crucial, AlignMode::Gaussian, AlignMode::Complete}) {
    CAPTURE(to_string(mode));
    CHECK(grad_check([&] { return feature_distill(t_low, s_low, boxes, kGrid, {}, mode); }, {{"s_low", s_low}})
              .passed);
    CHECK(grad_check([&] { return relation_distill(t_low, s_low, boxes, kGrid, {}, mode); }, {{"s_low", s_low}})
              .passed);
    CHECK(grad_check([&] { return response_distill(t_resp, s_resp, boxes, kGrid, {}, mode); }, {{"s_resp", s_resp}})
              .passed);
  }
}

TEST_CASE("box permutation invariance and scaling properties") {
  const auto a = random_tensor({4, 16, 16}, 26), b = random_tensor({4, 16, 16}, 27);
  auto boxes = random_boxes(28, 4);
  const double f0 = feature_distill(a, b, boxes, kGrid, {}).item();
  const double r0 = relation_distill(a, b, boxes, kGrid, {}).item();
  const double p0 = response_distill(a, b, boxes, kGrid).item();
  std::reverse(boxes.begin(), boxes.end());
  std::swap(boxes[0], boxes[2]);
  CHECK(std::abs(feature_distill(a, b, boxes, kGrid, {}).item() - f0) < 1e-12);
  CHECK(std::abs(relation_distill(a, b, boxes, kGrid, {}).item() - r0) < 1e-12);
  CHECK(std::abs(response_distill(a, b, boxes, kGrid).item() - p0) < 1e-12);

  CHECK(feature_distill(scale(a, 2.5), scale(b, 2.5), boxes, kGrid, {}).item() ==
        doctest::Approx(2.5 * f0).epsilon(1e-12));
  CHECK(std::abs(relation_distill(scale(a, 2.5), scale(b, 0.3), boxes, kGrid, {}).item() - r0) < 1e-12);
}

TEST_CASE("identity adapt layer reproduces the disabled loss") {
  const auto a = random_tensor({4, 16, 16}, 29), b = random_tensor({4, 16, 16}, 30);
  const auto boxes = random_boxes(31, 3);
  const auto id = AdaptLayer::identity(4, 4);
  CHECK(id.enabled());
  CHECK_FALSE(AdaptLayer{}.enabled());
  CHECK(feature_distill(a, b, boxes, kGrid, id).item() == feature_distill(a, b, boxes, kGrid, {}).item());
  CHECK(relation_distill(a, b, boxes, kGrid, id).item() == relation_distill(a, b, boxes, kGrid, {}).item());
  const auto out = AdaptLayer{}.apply(b);
  CHECK(out.same_storage(b));
  // Channel adaptation: a 6 -> 4 layer lets differently sized students align.
  const auto wide = random_tensor({6, 16, 16}, 32);
  CHECK_NOTHROW(feature_distill(a, wide, boxes, kGrid, AdaptLayer::identity(6, 4)));
  CHECK_THROWS_AS(feature_distill(a, wide, boxes, kGrid, {}), ShapeError);
}

TEST_CASE("self-distillation gives exact zeros for every mode") {
  const auto low = random_tensor({4, 16, 16}, 33), high = random_tensor({6, 16, 16}, 34);
  const auto cls = random_tensor({3, 16, 16}, 35, 0, 1), reg = random_tensor({6, 16, 16}, 36);
  const BevFeatures f{low, high, cls, reg, response_features(cls, reg)};
  const auto boxes = random_boxes(37, 3);
  for (AlignMode mode : {AlignMode::Crucial, AlignMode::Gaussian, AlignMode::Complete}) {
    for (bool use_max : {true, false}) {
      DistillConfig dc = DistillConfig::defaults(DistillPath::F2C);
      dc.fea_mode = dc.rel_mode = dc.resp_mode = mode;
      dc.resp_use_max = use_max;
      const auto t = distill_terms(f, f, boxes, kGrid, dc, {}, {});
      CHECK(t.fea.item() == 0.0);
      CHECK(t.rel.item() == 0.0);
      CHECK(t.resp.item() == 0.0);
    }
  }
}
