#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "endonet/wsi/split.hpp"

// Subcommand implementations behind the endonet executable. Each returns a
// JSON summary and writes its artifacts plus runlog.jsonl into its output
// directory.
namespace endonet::app {

namespace fs = std::filesystem;

struct CommonOptions {
  std::uint64_t seed = 0;
  bool deterministic = false;  // serializes all work (jobs = 1)
  int jobs = 1;
  fs::path out;  // empty: <data root>/runs/<timestamp>-<config hash>
};

int effective_jobs(const CommonOptions& c);
/// ENDONET_DATA_DIR, or the working directory.
fs::path data_root();
/// Relative inputs that do not exist from the working directory are looked
/// up under the data root.
fs::path resolve_input(const fs::path& p);
/// Creates and returns the output directory for a run.
fs::path prepare_run_dir(const CommonOptions& c, const std::string& command, const nlohmann::json& config);

struct SynthOptions {
  CommonOptions common;
  std::size_t n = 100;
  double high_fraction = 0.3;
  double side_um = 4480.0;
  double mpp = 1.0;
};
nlohmann::json run_synth(const SynthOptions& o);

struct SplitOptions {
  CommonOptions common;
  fs::path manifest;
  wsi::SplitFractions fractions;
};
nlohmann::json run_split(const SplitOptions& o);

struct TileOptions {
  CommonOptions common;
  fs::path manifest;
  fs::path annotations;  // empty: annotations.jsonl next to the manifest, if present
  double min_tissue = 0.25;
  std::vector<std::string> patch_splits;  // harvest annotation patches only here; empty = every slide
};
nlohmann::json run_tile(const TileOptions& o);

struct TrainCnnOptions {
  CommonOptions common;
  fs::path patches;  // patches.jsonl written by tile
  fs::path manifest;  // when set, only train-split slides are used
  fs::path config;    // optional JSON {cnn, epochs, batch_size, split_fraction, augment, optimizer}
  std::optional<double> width;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> classes;
};
nlohmann::json run_train_cnn(const TrainCnnOptions& o);

struct ExtractOptions {
  CommonOptions common;
  fs::path manifest;
  fs::path regions;  // regions.jsonl written by tile
  fs::path cnn;
  std::size_t batch = 25;
};
nlohmann::json run_extract(const ExtractOptions& o);

struct PretrainOptions {
  CommonOptions common;
  fs::path manifest;
  fs::path features;
  fs::path config;
  fs::path resume;
  std::optional<std::size_t> epochs;
  std::optional<double> mask_ratio;
  std::optional<double> learning_rate;
};
nlohmann::json run_pretrain(const PretrainOptions& o);

struct FinetuneOptions {
  CommonOptions common;
  fs::path manifest;
  fs::path features;
  fs::path pretrained;
  fs::path config;
  std::optional<std::size_t> epochs;
  std::optional<bool> freeze_encoder;
  std::optional<double> learning_rate;
};
nlohmann::json run_finetune(const FinetuneOptions& o);

struct PredictOptions {
  CommonOptions common;
  fs::path manifest;
  fs::path features;
  fs::path model;
  std::string split = "test";  // "all" for every slide
  std::size_t k = 25;
};
nlohmann::json run_predict(const PredictOptions& o);

struct EvaluateOptions {
  CommonOptions common;  // out is the report JSON path
  fs::path predictions;
  std::size_t iterations = 10000;
  double threshold = 0.5;
};
nlohmann::json run_evaluate(const EvaluateOptions& o);

struct VisualizeOptions {
  CommonOptions common;
  fs::path manifest;
  fs::path features;
  fs::path model;
  std::vector<std::string> slides;  // empty: every slide of `split`
  std::string split = "test";
  std::size_t k = 25;
  double alpha = 0.45;
  std::string aggregation = "last_layer";
};
nlohmann::json run_visualize(const VisualizeOptions& o);

}  // namespace endonet::app
