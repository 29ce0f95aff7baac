#include "endonet/tensor/optimizer.hpp"

#include <cmath>
#include <cstring>

#include "endonet/common/error.hpp"

namespace endonet::tensor {

void optimizer_step(OptimizerState& state, TensorList& params,
                    const std::vector<std::span<const float>>& grads) {
  if (grads.size() != params.size()) {
    throw Error(ErrorCode::ShapeMismatch, "optimizer_step: " + std::to_string(grads.size()) +
                                              " gradients for " + std::to_string(params.size()) +
                                              " parameters");
  }
  const auto& cfg = state.config;
  if (!(cfg.learning_rate > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "optimizer_step: learning rate must be positive");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].empty()) continue;
    if (grads[i].size() != params[i].tensor.numel()) {
      throw Error(ErrorCode::ShapeMismatch, "optimizer_step: gradient of '" + params[i].name +
                                                "' has " + std::to_string(grads[i].size()) +
                                                " elements, parameter has " +
                                                std::to_string(params[i].tensor.numel()));
    }
    for (float g : grads[i]) {
      if (!std::isfinite(g)) {
        throw Error(ErrorCode::NaNDetected,
                    "optimizer_step: non-finite gradient in parameter '" + params[i].name + "'");
      }
    }
  }

  state.step_count += 1;
  const auto t = static_cast<double>(state.step_count);
  const float lr = static_cast<float>(cfg.learning_rate);
  const float b1 = static_cast<float>(cfg.beta1);
  const float b2 = static_cast<float>(cfg.beta2);
  const float eps = static_cast<float>(cfg.epsilon);
  const float bc1 = static_cast<float>(1.0 - std::pow(cfg.beta1, t));
  const float bc2 = static_cast<float>(1.0 - std::pow(cfg.beta2, t));

  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].empty()) continue;
    auto p = params[i].tensor.data();
    const auto g = grads[i];
    if (cfg.kind == OptimizerKind::sgd) {
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
      continue;
    }
    auto& m = state.first_moment[params[i].name];
    auto& v = state.second_moment[params[i].name];
    if (m.size() != p.size()) m.assign(p.size(), 0.0f);
    if (v.size() != p.size()) v.assign(p.size(), 0.0f);
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (1.0f - b1) * g[j];
      v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
      const float m_hat = m[j] / bc1;
      const float v_hat = v[j] / bc2;
      p[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

void optimizer_step(OptimizerState& state, TensorList& params) {
  std::vector<std::span<const float>> grads;
  grads.reserve(params.size());
  for (auto& p : params) {
    if (p.tensor.requires_grad() && p.tensor.has_grad()) {
      grads.emplace_back(p.tensor.grad());
    } else {
      grads.emplace_back();
    }
  }
  optimizer_step(state, params, grads);
}

TensorList optimizer_tensors(const OptimizerState& state) {
  TensorList out;
  out.push_back({"optim.step", TensorF({2}, std::vector<float>{
                                                static_cast<float>(state.step_count & 0xffffff),
                                                static_cast<float>(state.step_count >> 24)})});
  for (const auto& [name, m] : state.first_moment) {
    out.push_back({"optim.m." + name, TensorF({m.size()}, m)});
  }
  for (const auto& [name, v] : state.second_moment) {
    out.push_back({"optim.v." + name, TensorF({v.size()}, v)});
  }
  return out;
}

void restore_optimizer(OptimizerState& state, const TensorList& tensors) {
  state.first_moment.clear();
  state.second_moment.clear();
  for (const auto& t : tensors) {
    if (t.name == "optim.step") {
      state.step_count = static_cast<std::uint64_t>(t.tensor[0]) |
                         (static_cast<std::uint64_t>(t.tensor[1]) << 24);
    } else if (t.name.rfind("optim.m.", 0) == 0) {
      state.first_moment[t.name.substr(8)] = t.tensor.values();
    } else if (t.name.rfind("optim.v.", 0) == 0) {
      state.second_moment[t.name.substr(8)] = t.tensor.values();
    }
  }
}

void zero_grads(TensorList& params) {
  for (auto& p : params) p.tensor.clear_grad();
}

std::string optimizer_kind_name(OptimizerKind kind) {
  return kind == OptimizerKind::sgd ? "sgd" : "adam";
}

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw Error(ErrorCode::InvalidArgument, "unknown optimizer '" + name + "'");
}

}  // namespace endonet::tensor
