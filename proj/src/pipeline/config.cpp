#include "endonet/pipeline/config.hpp"

#include <cstdio>
#include <set>

#include "endonet/common/error.hpp"
#include "endonet/common/rng.hpp"

namespace endonet::pipeline {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& what) {
  if (!j.is_object()) throw Error(ErrorCode::MalformedInput, what + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw Error(ErrorCode::MalformedInput, what + ": unknown key '" + key + "'");
  }
}

template <typename F>
auto guarded(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedInput, what + ": " + e.what());
  }
}

}  // namespace

tensor::OptimizerConfig optimizer_config_from_json(const json& j) {
  reject_unknown(j, {"kind", "learning_rate", "beta1", "beta2", "epsilon"}, "optimizer");
  tensor::OptimizerConfig c;
  try {
    if (j.contains("kind")) c.kind = tensor::parse_optimizer_kind(j.at("kind").get<std::string>());
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedInput, std::string("optimizer: ") + e.what());
  }
  if (!(c.learning_rate > 0)) throw Error(ErrorCode::InvalidArgument, "learning_rate must be > 0");
  return c;
}

void PretrainConfig::validate() const {
  encoder.validate();
  if (epochs < 1) throw Error(ErrorCode::InvalidArgument, "pretrain epochs must be >= 1");
  if (regions_per_slide_per_epoch < 1) throw Error(ErrorCode::InvalidArgument, "regions_per_slide_per_epoch must be >= 1");
  if (!(mask_ratio >= 0 && mask_ratio <= 1)) throw Error(ErrorCode::InvalidArgument, "mask_ratio must lie in [0,1]");
}

void FinetuneConfig::validate() const {
  if (epochs < 1) throw Error(ErrorCode::InvalidArgument, "finetune epochs must be >= 1");
  if (regions_per_slide_train < 1 || regions_per_slide_eval < 1) {
    throw Error(ErrorCode::InvalidArgument, "regions per slide must be >= 1");
  }
  if (patience < 1) throw Error(ErrorCode::InvalidArgument, "patience must be >= 1");
  if (class_weights && (!((*class_weights)[0] > 0) || !((*class_weights)[1] > 0))) {
    throw Error(ErrorCode::InvalidArgument, "class weights must be > 0");
  }
}

json to_json(const tensor::OptimizerConfig& c) {
  return {{"kind", tensor::optimizer_kind_name(c.kind)},
          {"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon}};
}

json to_json(const PretrainConfig& c) {
  return {{"encoder", json::parse(c.encoder.to_json())},
          {"epochs", c.epochs},
          {"regions_per_slide_per_epoch", c.regions_per_slide_per_epoch},
          {"mask_ratio", c.mask_ratio},
          {"standardize_features", c.standardize_features},
          {"optimizer", to_json(c.optimizer)},
          {"seed", c.seed}};
}

json to_json(const FinetuneConfig& c) {
  json j{{"epochs", c.epochs},
         {"regions_per_slide_train", c.regions_per_slide_train},
         {"regions_per_slide_eval", c.regions_per_slide_eval},
         {"freeze_encoder", c.freeze_encoder},
         {"train_projection", c.train_projection},
         {"class_weights", nullptr},
         {"patience", c.patience},
         {"optimizer", to_json(c.optimizer)},
         {"seed", c.seed}};
  if (c.class_weights) j["class_weights"] = *c.class_weights;
  return j;
}

PretrainConfig pretrain_config_from_json(const json& j) {
  return guarded("pretrain config", [&] {
    reject_unknown(j, {"encoder", "epochs", "regions_per_slide_per_epoch", "mask_ratio", "standardize_features",
                       "optimizer", "seed"},
                   "pretrain config");
    PretrainConfig c;
    if (j.contains("encoder")) c.encoder = model::EncoderConfig::from_json(j.at("encoder").dump());
    c.epochs = j.value("epochs", c.epochs);
    c.regions_per_slide_per_epoch = j.value("regions_per_slide_per_epoch", c.regions_per_slide_per_epoch);
    c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
    c.standardize_features = j.value("standardize_features", c.standardize_features);
    if (j.contains("optimizer")) c.optimizer = optimizer_config_from_json(j.at("optimizer"));
    c.seed = j.value("seed", c.seed);
    c.encoder.mask_ratio = c.mask_ratio;
    c.validate();
    return c;
  });
}

FinetuneConfig finetune_config_from_json(const json& j) {
  return guarded("finetune config", [&] {
    reject_unknown(j, {"epochs", "regions_per_slide_train", "regions_per_slide_eval", "freeze_encoder",
                       "train_projection", "class_weights", "patience", "optimizer", "seed"},
                   "finetune config");
    FinetuneConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.regions_per_slide_train = j.value("regions_per_slide_train", c.regions_per_slide_train);
    c.regions_per_slide_eval = j.value("regions_per_slide_eval", c.regions_per_slide_eval);
    c.freeze_encoder = j.value("freeze_encoder", c.freeze_encoder);
    c.train_projection = j.value("train_projection", c.train_projection);
    if (j.contains("class_weights") && !j.at("class_weights").is_null()) {
      c.class_weights = j.at("class_weights").get<std::array<double, 2>>();
    }
    c.patience = j.value("patience", c.patience);
    if (j.contains("optimizer")) c.optimizer = optimizer_config_from_json(j.at("optimizer"));
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  });
}

std::string config_hash(const json& j) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

}  // namespace endonet::pipeline
