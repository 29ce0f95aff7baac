#include "endonet/features/patch_classifier.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "endonet/common/error.hpp"
#include "endonet/common/rng.hpp"
#include "endonet/metrics/metrics.hpp"
#include "endonet/tensor/checkpoint.hpp"
#include "endonet/tensor/graph.hpp"
#include "endonet/tensor/ops.hpp"

namespace endonet::features {

namespace {

constexpr std::size_t kPixels = 3 * kInputPx * kInputPx;

std::size_t target_of(const wsi::LabeledPatch& p, std::size_t num_classes) {
  return num_classes == 2 ? static_cast<std::size_t>(p.grade) : static_cast<std::size_t>(p.subtype);
}

}  // namespace

std::size_t select_best_epoch(const std::vector<double>& val_auc) {
  if (val_auc.empty()) throw Error(ErrorCode::EmptyInput, "no epochs to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < val_auc.size(); ++i) {
    if (val_auc[i] > val_auc[best]) best = i;
  }
  return best + 1;
}

PatchSplit split_patches(const std::vector<wsi::LabeledPatch>& patches, double train_fraction,
                         std::size_t num_classes, std::uint64_t seed) {
  if (patches.empty()) throw Error(ErrorCode::EmptyInput, "no labeled patches");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "split fraction must lie in (0,1)");
  }
  // slide -> label histogram; std::map keeps slide order independent of input order
  std::map<std::string, std::vector<std::size_t>> hist;
  for (const auto& p : patches) {
    auto& h = hist[p.slide_id];
    h.resize(num_classes, 0);
    h[target_of(p, num_classes)]++;
  }
  std::vector<std::vector<std::string>> by_class(num_classes);
  for (const auto& [slide, h] : hist) {
    const auto majority = static_cast<std::size_t>(std::max_element(h.begin(), h.end()) - h.begin());
    by_class[majority].push_back(slide);
  }
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (by_class[c].empty()) continue;
    ++present;
    if (by_class[c].size() < 2) {
      throw Error(ErrorCode::SingleClass, "class " + std::to_string(c) +
                                              " has a single slide; both partitions need every present class");
    }
  }
  if (present < 2) throw Error(ErrorCode::SingleClass, "patch labels contain a single class");

  std::map<std::string, bool> in_val;
  PatchSplit split;
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& slides = by_class[c];
    if (slides.empty()) continue;
    Rng rng(derive_key(seed, 0x5A11 + c));
    rng.shuffle(std::span<std::string>(slides));
    const auto n = static_cast<double>(slides.size());
    auto n_val = static_cast<std::size_t>(std::llround(n * (1.0 - train_fraction)));
    n_val = std::clamp<std::size_t>(n_val, 1, slides.size() - 1);
    for (std::size_t i = 0; i < slides.size(); ++i) in_val[slides[i]] = i < n_val;
  }
  for (const auto& [slide, v] : in_val) (v ? split.val_slides : split.train_slides).push_back(slide);
  for (std::size_t i = 0; i < patches.size(); ++i) (in_val[patches[i].slide_id] ? split.val : split.train).push_back(i);
  return split;
}

std::vector<float> predict_patches(ResNet& model, const std::vector<const wsi::Image*>& images,
                                   std::size_t batch_size) {
  std::vector<float> out;
  out.reserve(images.size());
  for (std::size_t b = 0; b < images.size(); b += batch_size) {
    const std::size_t n = std::min(batch_size, images.size() - b);
    TensorF x({n, 3, kInputPx, kInputPx});
    for (std::size_t i = 0; i < n; ++i) preprocess_into(*images[b + i], x.data().data() + i * kPixels);
    const TensorF z = model.logits(x, false);
    for (std::size_t i = 0; i < n; ++i) out.push_back(prob_high(z, i));
  }
  return out;
}

PatchClassifierResult train_patch_classifier(const std::vector<wsi::LabeledPatch>& patches,
                                             const PatchTrainConfig& config, const PatchEpochCallback& on_epoch) {
  if (config.epochs == 0) throw Error(ErrorCode::InvalidArgument, "epochs must be >= 1");
  if (config.batch_size == 0) throw Error(ErrorCode::InvalidArgument, "batch size must be >= 1");
  config.cnn.validate();
  const std::size_t classes = config.cnn.num_classes;
  const PatchSplit split = split_patches(patches, config.split_fraction, classes, config.seed);

  ResNet model(config.cnn, derive_key(config.seed, 0xC22));
  PatchClassifierReport report;
  report.parameter_count = model.parameter_count();
  report.train_slides = split.train_slides;
  report.val_slides = split.val_slides;
  report.train_patches = split.train.size();
  report.val_patches = split.val.size();

  tensor::OptimizerState opt;
  opt.config = config.optimizer;
  std::vector<const wsi::Image*> val_images;
  std::vector<metrics::ScoredSlide> val_scored;
  for (auto i : split.val) {
    val_images.push_back(&patches[i].pixels);
    val_scored.push_back({patches[i].slide_id, patches[i].subtype, patches[i].grade, 0.0});
  }

  Rng order_rng(derive_key(config.seed, 0x0DE));
  Rng aug_rng(derive_key(config.seed, 0xA06));
  std::vector<std::size_t> order = split.train;
  tensor::TensorList best_state;
  std::vector<double> aucs;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    order_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - b);
      TensorF x({n, 3, kInputPx, kInputPx});
      std::vector<std::size_t> targets(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& p = patches[order[b + i]];
        const bool fh = config.augment && aug_rng.below(2) == 1;
        const bool fv = config.augment && aug_rng.below(2) == 1;
        preprocess_into(p.pixels, x.data().data() + i * kPixels, fh, fv);
        targets[i] = target_of(p, classes);
      }
      tensor::Graph<float> graph;
      TensorF loss;
      {
        tensor::GraphScope<float> scope(graph);
        loss = tensor::ops::cross_entropy(model.logits(x, true), targets);
      }
      tensor::zero_grads(model.parameters());
      graph.backward(loss);
      tensor::optimizer_step(opt, model.parameters());
      loss_sum += loss.item();
      ++batches;
    }
    PatchEpoch rec;
    rec.epoch = epoch;
    rec.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    const auto probs = predict_patches(model, val_images);
    for (std::size_t i = 0; i < probs.size(); ++i) val_scored[i].prob_high = probs[i];
    rec.val_auc = metrics::auc(val_scored);
    rec.val_f1 = metrics::weighted_f1(val_scored);
    report.epochs.push_back(rec);
    aucs.push_back(rec.val_auc);
    if (select_best_epoch(aucs) == epoch) {
      report.selected_epoch = epoch;
      best_state = tensor::clone_tensors(model.state());
    }
    if (on_epoch) on_epoch(rec);
  }
  model.load_state(best_state);
  return {std::move(model), std::move(report)};
}

}  // namespace endonet::features
