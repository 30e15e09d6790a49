#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <vector>

#include <unistd.h>

#include "unidistill/tensor.hpp"

namespace testing_support {

inline unidistill::Tensor random_tensor(unidistill::Shape shape, std::uint64_t seed, double lo = -1.0,
                                        double hi = 1.0, bool requires_grad = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(unidistill::shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return unidistill::Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

/// Central differences of a scalar function of one leaf, written independently of grad_check.
inline std::vector<double> numeric_grad(const std::function<double()>& f, unidistill::Tensor& leaf, double h) {
  auto values = leaf.mutable_data();
  std::vector<double> g(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x0 = values[i];
    values[i] = x0 + h;
    const double fp = f();
    values[i] = x0 - h;
    const double fm = f();
    values[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Runs f on a fresh tape and backpropagates its scalar result.
inline void backprop(const std::function<unidistill::Tensor()>& f) {
  unidistill::Tape tape;
  unidistill::Tape::Scope scope(tape);
  tape.backward(f());
}

/// Owned copy of a tensor's accumulated gradient (zeros when none reached it).
inline std::vector<double> grad_values(const unidistill::Tensor& t) {
  const auto g = t.grad();
  return {g.data().begin(), g.data().end()};
}

inline double value_of(const std::function<unidistill::Tensor()>& f) {
  unidistill::Tape::NoGrad no_grad;
  return f().item();
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Fresh per-process scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("unidistill_" + name + "_" + std::to_string(static_cast<long>(::getpid())));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing_support
