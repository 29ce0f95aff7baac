#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "endonet/common/rng.hpp"
#include "endonet/features/feature_store.hpp"
#include "endonet/model/transformer.hpp"
#include "endonet/pipeline/config.hpp"
#include "endonet/pipeline/runlog.hpp"
#include "endonet/tensor/checkpoint.hpp"
#include "endonet/wsi/manifest.hpp"

namespace endonet::pipeline {

using features::FeatureBundle;
using model::EndoNet;

/// Every extracted region of one slide, sorted by region id.
struct SlideFeatures {
  std::string slide_id;
  wsi::Subtype subtype = wsi::Subtype::EndometrioidG1;
  wsi::Grade grade = wsi::Grade::Low;
  std::vector<FeatureBundle> regions;
};

/// Joins manifest entries (optionally only one split) with their bundles,
/// sorted by slide id. Slides without bundles are skipped and reported in
/// `missing`; bundles of slides outside the selection are ignored.
std::vector<SlideFeatures> assemble_slides(const wsi::Manifest& manifest, const std::vector<FeatureBundle>& bundles,
                                           std::optional<wsi::Split> split = std::nullopt,
                                           std::vector<std::string>* missing = nullptr);

struct PretrainOptions {
  std::filesystem::path checkpoint_path;  // written after every epoch when set
  const tensor::Checkpoint* resume = nullptr;
  std::size_t max_steps = 0;  // stop (and checkpoint) after this many steps in this call; 0 = no limit
  std::function<void(std::size_t epoch, std::size_t step, double loss)> on_step;
};

struct PretrainResult {
  EndoNet model;
  tensor::Checkpoint checkpoint;
  std::vector<double> epoch_losses;  // mean reconstruction loss per completed epoch
  std::vector<double> step_losses;   // steps run by this call
  bool finished = false;
};

/// Masked-reconstruction pre-training. Epoch e visits every training slide
/// regions_per_slide_per_epoch times in an order drawn from (seed, e); step
/// j of epoch e draws its region and mask from (seed, e, j), so a resumed
/// run replays the exact remaining schedule.
PretrainResult pretrain(const std::vector<SlideFeatures>& train, const PretrainConfig& config, RunLog& log,
                        const PretrainOptions& options = {});

/// Rebuilds the model stored in a "pretrain" or "finetune" checkpoint.
EndoNet model_from_checkpoint(const tensor::Checkpoint& ckpt);

struct FinetuneEpoch {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_auc = 0;
  double val_f1 = 0;
};

struct FinetuneResult {
  EndoNet model;  // weights of the selected epoch
  tensor::Checkpoint checkpoint;
  std::vector<FinetuneEpoch> epochs;
  std::size_t best_epoch = 0;
  std::array<double, 2> class_weights{1.0, 1.0};
};

/// Slide-level fine-tuning from a pre-training checkpoint. Each step samples
/// regions_per_slide_train regions of one slide, encodes them unmasked,
/// averages their class tokens and applies the class-weighted cross-entropy.
/// The epoch with the best validation AUC is kept (ties: higher validation
/// F1, then the earlier epoch); training stops after `patience` epochs
/// without improvement.
FinetuneResult finetune(const tensor::Checkpoint& pretrained, const std::vector<SlideFeatures>& train,
                        const std::vector<SlideFeatures>& val, const FinetuneConfig& config, RunLog& log,
                        const std::filesystem::path& checkpoint_path = {});

/// Names of the parameters a frozen-encoder fine-tune may update.
bool trainable_when_frozen(const std::string& name, bool train_projection);

struct RegionInference {
  std::size_t region_index = 0;  // into SlideFeatures::regions
  tensor::TensorF class_token;   // [1, d_model]
  model::AttentionTrace trace;
};

struct SlideInference {
  std::string slide_id;
  float prob_high = 0.5f;
  std::vector<std::size_t> sampled;     // region indices in draw order (size k)
  tensor::TensorF class_tokens;         // [k, d_model], one row per draw
  std::vector<RegionInference> unique;  // each distinct region once, ascending index
};

/// Draws k regions with sample_indices under Rng(derive_key(seed,
/// fnv1a64(slide_id))) (with replacement when fewer exist), encodes each
/// distinct region once without masking and averages the k class tokens.
/// Throws NoTissue for a slide without regions.
SlideInference predict_slide(const EndoNet& model, const SlideFeatures& slide, std::size_t k, std::uint64_t seed,
                             model::TraceMode trace = model::TraceMode::none);

/// Slide probability for an explicit list of region draws.
float classify_regions(const EndoNet& model, const SlideFeatures& slide, const std::vector<std::size_t>& regions);

/// Seed used for validation and test inference under a fine-tune seed.
inline std::uint64_t inference_seed(std::uint64_t seed) { return derive_key(seed, 0xE7A1); }

}  // namespace endonet::pipeline
