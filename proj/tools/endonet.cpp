#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "endonet/app/commands.hpp"
#include "endonet/common/error.hpp"

using namespace endonet;
using namespace endonet::app;

namespace {

void add_common(CLI::App* cmd, CommonOptions& c) {
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_flag("--deterministic", c.deterministic, "Serialize all work for bit-exact reruns");
  cmd->add_option("--jobs", c.jobs, "Worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--out", c.out, "Output directory (default: $ENDONET_DATA_DIR/runs/<timestamp>-<hash>)");
}

int report_error(const std::string& command, const std::string& code, const std::string& message) {
  std::cerr << nlohmann::json{{"error", code}, {"message", message}, {"command", command}}.dump() << std::endl;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Endometrial cancer grading pipeline on whole-slide images"};
  app.require_subcommand(1);

  SynthOptions synth;
  auto* c_synth = app.add_subcommand("synth", "Generate synthetic slides, manifest and annotations");
  add_common(c_synth, synth.common);
  c_synth->add_option("--n", synth.n, "Number of slides");
  c_synth->add_option("--high-fraction", synth.high_fraction, "Fraction of High-grade slides");
  c_synth->add_option("--side-um", synth.side_um, "Slide side in um (>= 4480)");
  c_synth->add_option("--mpp", synth.mpp, "Level-0 microns per pixel");

  SplitOptions split;
  auto* c_split = app.add_subcommand("split", "Patient-grouped train/val/test split");
  add_common(c_split, split.common);
  c_split->add_option("--manifest", split.manifest)->required();
  c_split->add_option("--train", split.fractions.train);
  c_split->add_option("--val", split.fractions.val);
  c_split->add_option("--test", split.fractions.test);

  TileOptions tile;
  auto* c_tile = app.add_subcommand("tile", "Tissue regions and annotation patches");
  add_common(c_tile, tile.common);
  c_tile->add_option("--manifest", tile.manifest)->required();
  c_tile->add_option("--annotations", tile.annotations);
  c_tile->add_option("--min-tissue", tile.min_tissue);
  c_tile->add_option("--patch-splits", tile.patch_splits, "Splits whose annotation patches are harvested");

  TrainCnnOptions cnn;
  std::optional<double> cnn_width;
  std::optional<std::size_t> cnn_epochs, cnn_classes;
  auto* c_cnn = app.add_subcommand("train-cnn", "Train the patch classifier");
  add_common(c_cnn, cnn.common);
  c_cnn->add_option("--patches", cnn.patches)->required();
  c_cnn->add_option("--manifest", cnn.manifest, "Restrict to train-split slides of this manifest");
  c_cnn->add_option("--config", cnn.config);
  c_cnn->add_option("--width", cnn_width, "Channel width multiplier");
  c_cnn->add_option("--epochs", cnn_epochs);
  c_cnn->add_option("--classes", cnn_classes, "2 (grade) or 5 (subtype)");

  ExtractOptions extract;
  auto* c_extract = app.add_subcommand("extract-features", "CNN features for every tissue region");
  add_common(c_extract, extract.common);
  c_extract->add_option("--manifest", extract.manifest)->required();
  c_extract->add_option("--regions", extract.regions)->required();
  c_extract->add_option("--cnn", extract.cnn)->required();
  c_extract->add_option("--batch", extract.batch);

  PretrainOptions pre;
  std::optional<std::size_t> pre_epochs;
  std::optional<double> pre_mask, pre_lr;
  auto* c_pre = app.add_subcommand("pretrain", "Masked-reconstruction pre-training");
  add_common(c_pre, pre.common);
  c_pre->add_option("--manifest", pre.manifest)->required();
  c_pre->add_option("--features", pre.features)->required();
  c_pre->add_option("--config", pre.config);
  c_pre->add_option("--resume", pre.resume);
  c_pre->add_option("--epochs", pre_epochs);
  c_pre->add_option("--mask-ratio", pre_mask);
  c_pre->add_option("--lr", pre_lr);

  FinetuneOptions fine;
  std::optional<std::size_t> fine_epochs;
  std::optional<double> fine_lr;
  bool freeze = false;
  auto* c_fine = app.add_subcommand("finetune", "Slide-level fine-tuning");
  add_common(c_fine, fine.common);
  c_fine->add_option("--manifest", fine.manifest)->required();
  c_fine->add_option("--features", fine.features)->required();
  c_fine->add_option("--pretrained", fine.pretrained)->required();
  c_fine->add_option("--config", fine.config);
  c_fine->add_option("--epochs", fine_epochs);
  c_fine->add_option("--lr", fine_lr);
  c_fine->add_flag("--freeze-encoder", freeze);

  PredictOptions pred;
  auto* c_pred = app.add_subcommand("predict", "Slide probabilities from 25 sampled regions");
  add_common(c_pred, pred.common);
  c_pred->add_option("--manifest", pred.manifest)->required();
  c_pred->add_option("--features", pred.features)->required();
  c_pred->add_option("--model", pred.model)->required();
  c_pred->add_option("--split", pred.split, "train, val, test, external or all");
  c_pred->add_option("--k", pred.k, "Regions per slide");

  EvaluateOptions eval;
  auto* c_eval = app.add_subcommand("evaluate", "Weighted F1 and AUC with bootstrap CIs");
  add_common(c_eval, eval.common);
  c_eval->add_option("--pred", eval.predictions)->required();
  c_eval->add_option("--iterations", eval.iterations);
  c_eval->add_option("--threshold", eval.threshold);

  VisualizeOptions vis;
  auto* c_vis = app.add_subcommand("visualize", "Attention overlays");
  add_common(c_vis, vis.common);
  c_vis->add_option("--manifest", vis.manifest)->required();
  c_vis->add_option("--features", vis.features)->required();
  c_vis->add_option("--model", vis.model)->required();
  c_vis->add_option("--slide", vis.slides, "Slide id (repeatable)");
  c_vis->add_option("--split", vis.split);
  c_vis->add_option("--k", vis.k);
  c_vis->add_option("--alpha", vis.alpha);
  c_vis->add_option("--aggregation", vis.aggregation, "last_layer or rollout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    nlohmann::json summary;
    if (command == "synth") {
      summary = run_synth(synth);
    } else if (command == "split") {
      summary = run_split(split);
    } else if (command == "tile") {
      summary = run_tile(tile);
    } else if (command == "train-cnn") {
      cnn.width = cnn_width;
      cnn.epochs = cnn_epochs;
      cnn.classes = cnn_classes;
      summary = run_train_cnn(cnn);
    } else if (command == "extract-features") {
      summary = run_extract(extract);
    } else if (command == "pretrain") {
      pre.epochs = pre_epochs;
      pre.mask_ratio = pre_mask;
      pre.learning_rate = pre_lr;
      summary = run_pretrain(pre);
    } else if (command == "finetune") {
      fine.epochs = fine_epochs;
      fine.learning_rate = fine_lr;
      if (freeze) fine.freeze_encoder = true;
      summary = run_finetune(fine);
    } else if (command == "predict") {
      summary = run_predict(pred);
    } else if (command == "evaluate") {
      summary = run_evaluate(eval);
      std::cout << summary["tables"].get<std::string>();
      summary.erase("tables");
    } else if (command == "visualize") {
      summary = run_visualize(vis);
    }
    std::cout << summary.dump() << std::endl;
    return 0;
  } catch (const Error& e) {
    return report_error(command, std::string(e.code_name()), e.detail());
  } catch (const std::filesystem::filesystem_error& e) {
    return report_error(command, "Io", e.what());
  } catch (const std::exception& e) {
    return report_error(command, "Internal", e.what());
  }
}
