#include <benchmark/benchmark.h>

#include "unidistill/detector.hpp"
#include "unidistill/losses.hpp"
#include "unidistill/synthscene.hpp"

namespace ud = unidistill;

namespace {

ud::Tensor random_map(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed, bool grad = false) {
  ud::Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(c * h * w);
  for (auto& x : v) x = n(rng);
  return ud::Tensor::from_data({c, h, w}, std::move(v), grad);
}

void BM_Conv2dForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = random_map(c, 32, 32, 1);
  const auto k = ud::Tensor::from_data({c, c, 3, 3}, std::vector<double>(c * c * 9, 0.01));
  const auto b = ud::Tensor::zeros({c});
  for (auto _ : state) benchmark::DoNotOptimize(ud::conv2d(x, k, b));
}
BENCHMARK(BM_Conv2dForward)->Arg(8)->Arg(16)->Arg(32);

void BM_Conv2dBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = random_map(c, 32, 32, 1, true);
  const auto k = ud::Tensor::from_data({c, c, 3, 3}, std::vector<double>(c * c * 9, 0.01), true);
  const auto b = ud::Tensor::zeros({c}, true);
  for (auto _ : state) {
    ud::Tape tape;
    ud::Tape::Scope scope(tape);
    tape.backward(ud::sum(ud::conv2d(x, k, b)));
  }
}
BENCHMARK(BM_Conv2dBackward)->Arg(8)->Arg(16)->Arg(32);

struct Fixture {
  ud::SceneGenParams sp = ud::SceneGenParams::defaults();
  ud::Scene scene = ud::gen_scene(sp, 0);
};

void BM_TrainStep(benchmark::State& state) {
  const Fixture f;
  const auto mod = static_cast<ud::Modality>(state.range(0));
  const auto params = ud::DetectorParams::init(mod, {16, 32, 3}, 1);
  for (auto _ : state) {
    ud::Tape tape;
    ud::Tape::Scope scope(tape);
    const auto feats = ud::forward_all(f.scene, f.sp.grid, params);
    tape.backward(ud::detection_loss(feats.cls, feats.reg, f.scene.boxes, f.sp.grid).total);
  }
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_DistillLosses(benchmark::State& state) {
  const Fixture f;
  const auto teacher = ud::DetectorParams::init(ud::Modality::Fusion, {16, 32, 3}, 1);
  const auto student = ud::DetectorParams::init(ud::Modality::Camera, {16, 32, 3}, 2);
  ud::BevFeatures tf;
  {
    ud::Tape::NoGrad ng;
    tf = ud::forward_all(f.scene, f.sp.grid, teacher);
  }
  const auto sf = ud::forward_all(f.scene, f.sp.grid, student);
  const auto dc = ud::DistillConfig::defaults(ud::DistillPath::F2C);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ud::distill_terms(tf, sf, f.scene.boxes, f.sp.grid, dc, {}, {}));
  }
}
BENCHMARK(BM_DistillLosses)->Unit(benchmark::kMicrosecond);

void BM_GenScene(benchmark::State& state) {
  const auto sp = ud::SceneGenParams::defaults();
  std::uint64_t id = 0;
  for (auto _ : state) benchmark::DoNotOptimize(ud::gen_scene(sp, id++));
}
BENCHMARK(BM_GenScene)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
