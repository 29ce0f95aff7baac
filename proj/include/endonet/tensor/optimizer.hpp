#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "endonet/tensor/tensor.hpp"

namespace endonet::tensor {

enum class OptimizerKind : std::uint8_t { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  OptimizerConfig config;
  std::uint64_t step_count = 0;
  // Adam first/second moments keyed by parameter name.
  std::map<std::string, std::vector<float>> first_moment;
  std::map<std::string, std::vector<float>> second_moment;
};

/// In-place SGD/Adam update of every parameter that carries a gradient
/// buffer; parameters without one (frozen or unreached) are left untouched.
/// step_count advances by exactly one per call. NaN/inf in a gradient
/// raises NaNDetected naming the parameter, before anything is modified.
void optimizer_step(OptimizerState& state, TensorList& params);

/// Same update with gradients supplied explicitly (grads[i] pairs params[i];
/// an empty span skips that parameter).
void optimizer_step(OptimizerState& state, TensorList& params,
                    const std::vector<std::span<const float>>& grads);

/// Moments as named tensors ("optim.m.<name>", "optim.v.<name>") plus a
/// one-element "optim.step" tensor, for checkpointing.
TensorList optimizer_tensors(const OptimizerState& state);
void restore_optimizer(OptimizerState& state, const TensorList& tensors);

void zero_grads(TensorList& params);

std::string optimizer_kind_name(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(const std::string& name);

}  // namespace endonet::tensor
