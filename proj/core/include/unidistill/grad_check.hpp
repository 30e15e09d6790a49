#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "unidistill/tensor.hpp"

namespace unidistill {

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, denom_floor).
  double denom_floor = 1e-3;
  // 0 checks every element; otherwise an evenly strided subset of this size per leaf.
  std::size_t max_elements_per_leaf = 0;
};

struct LeafCheck {
  std::string name;
  std::size_t checked = 0;
  std::size_t kinks = 0;  // elements where one-sided slopes disagree; excluded from the error
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<LeafCheck> leaves;
  double max_rel_error = 0.0;
  std::size_t kinks = 0;
  bool passed = true;

  std::string summary() const;
};

/// Compares reverse-mode gradients of the scalar produced by `f` with central
/// differences, one leaf element at a time. `f` must rebuild its expression
/// from the leaves on every call and be deterministic. Leaf grads are cleared
/// before the analytic pass and hold the analytic gradient afterwards.
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& leaves,
                           const GradCheckOptions& options = {});

}  // namespace unidistill
