#pragma once

#include <functional>
#include <vector>

#include "endonet/tensor/tensor.hpp"

namespace endonet::tensor {

struct GradCheckReport {
  // relative_error[i][j]: input i, element j
  std::vector<std::vector<double>> relative_error;
  std::vector<std::vector<double>> analytic;
  std::vector<std::vector<double>> numeric;
  double max_relative_error = 0.0;
  double mean_relative_error = 0.0;
  bool passed = false;
};

/// Builds a scalar from the given inputs using graph ops.
using GradFn = std::function<TensorD(const std::vector<TensorD>&)>;

/// Compares reverse-mode gradients of `fn` against central differences
/// (f(x+h) - f(x-h)) / 2h, element by element. Relative error is
/// |a - n| / max(|a|, |n|, 1e-6). Passes iff the maximum is below `tol`.
/// Throws NonDeterministic if two evaluations at the same point disagree.
GradCheckReport grad_check(const GradFn& fn, const std::vector<TensorD>& inputs,
                           double h = 1e-5, double tol = 1e-4);

}  // namespace endonet::tensor
