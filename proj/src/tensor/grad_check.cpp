#include "endonet/tensor/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "endonet/common/error.hpp"
#include "endonet/tensor/graph.hpp"

namespace endonet::tensor {
namespace {

std::vector<TensorD> detached_copies(const std::vector<TensorD>& inputs) {
  std::vector<TensorD> out;
  out.reserve(inputs.size());
  for (const auto& t : inputs) out.push_back(t.clone().set_requires_grad(false));
  return out;
}

double evaluate(const GradFn& fn, const std::vector<TensorD>& inputs) {
  TensorD y = fn(inputs);
  if (y.numel() != 1) {
    throw Error(ErrorCode::NonScalarLoss,
                "grad_check: function must return a scalar, got " + shape_string(y.shape()));
  }
  return y.item();
}

}  // namespace

GradCheckReport grad_check(const GradFn& fn, const std::vector<TensorD>& inputs, double h,
                           double tol) {
  if (!(h > 0.0)) throw Error(ErrorCode::InvalidArgument, "grad_check: step must be positive");

  auto probe = detached_copies(inputs);
  const double f0 = evaluate(fn, probe);
  const double f1 = evaluate(fn, probe);
  if (std::memcmp(&f0, &f1, sizeof f0) != 0) {
    throw Error(ErrorCode::NonDeterministic,
                "grad_check: function returned different values for identical inputs");
  }

  GradCheckReport report;
  std::vector<TensorD> leaves = detached_copies(inputs);
  for (auto& t : leaves) t.set_requires_grad(true);
  {
    Graph<double> graph;
    GraphScope<double> scope(graph);
    TensorD y = fn(leaves);
    if (y.numel() != 1) {
      throw Error(ErrorCode::NonScalarLoss,
                  "grad_check: function must return a scalar, got " + shape_string(y.shape()));
    }
    if (y.requires_grad()) graph.backward(y);
  }

  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::size_t n = inputs[i].numel();
    std::vector<double> analytic(n, 0.0), numeric(n), rel(n);
    if (leaves[i].has_grad()) {
      auto g = leaves[i].grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    for (std::size_t j = 0; j < n; ++j) {
      auto work = detached_copies(inputs);
      const double x0 = work[i][j];
      work[i][j] = x0 + h;
      const double fp = evaluate(fn, work);
      work[i][j] = x0 - h;
      const double fm = evaluate(fn, work);
      numeric[j] = (fp - fm) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[j]), std::abs(numeric[j]), 1e-6});
      rel[j] = std::abs(analytic[j] - numeric[j]) / denom;
      report.max_relative_error = std::max(report.max_relative_error, rel[j]);
      total += rel[j];
      ++count;
    }
    report.analytic.push_back(std::move(analytic));
    report.numeric.push_back(std::move(numeric));
    report.relative_error.push_back(std::move(rel));
  }
  report.mean_relative_error = count ? total / static_cast<double>(count) : 0.0;
  report.passed = report.max_relative_error < tol;
  return report;
}

}  // namespace endonet::tensor
