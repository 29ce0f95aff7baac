#pragma once

#include <vector>

#include "endonet/common/rng.hpp"
#include "endonet/tensor/tensor.hpp"

namespace endonet::testing {

template <typename T = double>
tensor::Tensor<T> random_tensor(Rng& rng, tensor::Shape shape, double lo = -1.0, double hi = 1.0) {
  tensor::Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Values bounded away from zero (for relu/max-pool kinks).
template <typename T = double>
tensor::Tensor<T> random_away_from_zero(Rng& rng, tensor::Shape shape, double margin = 0.05) {
  tensor::Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) {
    double x = rng.uniform(margin, 1.0);
    v = static_cast<T>(rng.below(2) ? x : -x);
  }
  return t;
}

}  // namespace endonet::testing
