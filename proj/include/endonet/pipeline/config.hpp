#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "endonet/model/transformer.hpp"
#include "endonet/tensor/optimizer.hpp"

// Stage configs. JSON files mirror the field names; absent keys keep the
// defaults, unknown keys are rejected.
namespace endonet::pipeline {

struct PretrainConfig {
  model::EncoderConfig encoder;
  std::size_t epochs = 5;
  std::size_t regions_per_slide_per_epoch = 1;
  double mask_ratio = 0.5;
  bool standardize_features = true;
  tensor::OptimizerConfig optimizer;
  std::uint64_t seed = 0;

  void validate() const;
};

struct FinetuneConfig {
  std::size_t epochs = 20;
  std::size_t regions_per_slide_train = 8;
  std::size_t regions_per_slide_eval = 25;
  bool freeze_encoder = false;
  bool train_projection = false;  // with freeze_encoder: also train encoder.proj.*
  std::optional<std::array<double, 2>> class_weights;  // (Low, High); default inverse frequency
  std::size_t patience = 5;
  tensor::OptimizerConfig optimizer;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const tensor::OptimizerConfig& c);
tensor::OptimizerConfig optimizer_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PretrainConfig& c);
nlohmann::json to_json(const FinetuneConfig& c);
/// Throws MalformedInput on type errors or unknown keys.
PretrainConfig pretrain_config_from_json(const nlohmann::json& j);
FinetuneConfig finetune_config_from_json(const nlohmann::json& j);

/// 16 hex digits of FNV-1a over the compact JSON dump.
std::string config_hash(const nlohmann::json& j);

}  // namespace endonet::pipeline
