#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "endonet/features/cnn.hpp"
#include "endonet/tensor/optimizer.hpp"
#include "endonet/wsi/regions.hpp"

namespace endonet::features {

struct PatchTrainConfig {
  CnnConfig cnn;
  std::size_t epochs = 5;
  std::size_t batch_size = 16;
  double split_fraction = 0.8;  // training share
  bool augment = true;          // random horizontal/vertical flips
  tensor::OptimizerConfig optimizer;
  std::uint64_t seed = 0;
};

struct PatchEpoch {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_auc = 0;
  double val_f1 = 0;
};

struct PatchClassifierReport {
  std::vector<PatchEpoch> epochs;
  std::size_t selected_epoch = 0;
  std::size_t parameter_count = 0;
  std::vector<std::string> train_slides, val_slides;
  std::size_t train_patches = 0, val_patches = 0;
};

/// Slide-grouped, class-stratified partition of patch indices. A slide's
/// class is the majority label of its patches.
struct PatchSplit {
  std::vector<std::size_t> train, val;
  std::vector<std::string> train_slides, val_slides;
};

/// Each class needs at least two slides so both partitions see it;
/// otherwise SingleClass.
PatchSplit split_patches(const std::vector<wsi::LabeledPatch>& patches, double train_fraction,
                         std::size_t num_classes, std::uint64_t seed);

struct PatchClassifierResult {
  ResNet model;  // weights of the selected epoch
  PatchClassifierReport report;
};

/// 1-based index of the maximum; the earliest wins ties.
std::size_t select_best_epoch(const std::vector<double>& val_auc);

using PatchEpochCallback = std::function<void(const PatchEpoch&)>;

/// Trains with cross-entropy on grade (2 classes) or subtype (5 classes)
/// targets and keeps the epoch with the best validation AUC of P(High);
/// ties go to the earlier epoch.
PatchClassifierResult train_patch_classifier(const std::vector<wsi::LabeledPatch>& patches,
                                             const PatchTrainConfig& config,
                                             const PatchEpochCallback& on_epoch = {});

/// Eval-mode P(High) for each patch.
std::vector<float> predict_patches(ResNet& model, const std::vector<const wsi::Image*>& images,
                                   std::size_t batch_size = 32);

}  // namespace endonet::features
