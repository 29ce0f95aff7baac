#include "endonet/pipeline/training.hpp"

#include <algorithm>
#include <numeric>

#include "endonet/common/error.hpp"
#include "endonet/metrics/metrics.hpp"
#include "endonet/tensor/graph.hpp"
#include "endonet/tensor/ops.hpp"
#include "endonet/tensor/optimizer.hpp"
#include "endonet/wsi/regions.hpp"

namespace endonet::pipeline {

using nlohmann::json;
using tensor::TensorF;
using tensor::TensorList;
namespace ops = tensor::ops;

std::vector<SlideFeatures> assemble_slides(const wsi::Manifest& manifest, const std::vector<FeatureBundle>& bundles,
                                           std::optional<wsi::Split> split, std::vector<std::string>* missing) {
  std::map<std::string, std::vector<const FeatureBundle*>> by_slide;
  for (const auto& b : bundles) by_slide[b.slide_id].push_back(&b);
  std::vector<SlideFeatures> out;
  for (const auto& e : manifest) {
    if (split && e.split != split) continue;
    auto it = by_slide.find(e.slide_id);
    if (it == by_slide.end()) {
      if (missing) missing->push_back(e.slide_id);
      continue;
    }
    SlideFeatures s{e.slide_id, e.subtype, e.grade, {}};
    auto regions = it->second;
    std::sort(regions.begin(), regions.end(),
              [](const FeatureBundle* a, const FeatureBundle* b) { return a->region_id < b->region_id; });
    for (const auto* r : regions) s.regions.push_back(*r);
    out.push_back(std::move(s));
  }
  std::sort(out.begin(), out.end(), [](const SlideFeatures& a, const SlideFeatures& b) { return a.slide_id < b.slide_id; });
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].slide_id == out[i - 1].slide_id) {
      throw Error(ErrorCode::MalformedInput, "duplicate manifest entry for slide " + out[i].slide_id);
    }
  }
  return out;
}

namespace {

std::size_t feature_dim_of(const std::vector<SlideFeatures>& slides) {
  std::size_t d = 0;
  for (const auto& s : slides) {
    for (const auto& r : s.regions) {
      if (d == 0) d = r.d;
      if (r.d != d) throw Error(ErrorCode::ShapeMismatch, "mixed feature dimensions in " + s.slide_id);
    }
  }
  if (d == 0) throw Error(ErrorCode::EmptyInput, "no feature bundles");
  return d;
}

std::vector<std::size_t> epoch_schedule(std::uint64_t seed, std::size_t epoch, std::size_t slides, std::size_t reps) {
  std::vector<std::size_t> out;
  out.reserve(slides * reps);
  const std::uint64_t epoch_key = derive_key(seed, 0x100 + epoch);
  for (std::size_t rep = 0; rep < reps; ++rep) {
    std::vector<std::size_t> perm(slides);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng(derive_key(epoch_key, rep)).shuffle(std::span<std::size_t>(perm));
    out.insert(out.end(), perm.begin(), perm.end());
  }
  return out;
}

PretrainConfig effective_pretrain_config(PretrainConfig c, std::size_t feature_dim) {
  c.encoder.feature_dim = feature_dim;
  c.encoder.mask_ratio = c.mask_ratio;
  return c;
}

json checkpoint_config(const model::EncoderConfig& encoder, const json& config, const json& progress) {
  return {{"encoder", json::parse(encoder.to_json())}, {"config", config}, {"progress", progress}};
}

struct EncodedRegions {
  std::map<std::size_t, RegionInference> by_index;
};

EncodedRegions encode_unique(const EndoNet& net, const SlideFeatures& slide, const std::vector<std::size_t>& draws,
                             model::TraceMode trace) {
  EncodedRegions out;
  for (std::size_t idx : draws) {
    if (out.by_index.count(idx)) continue;
    auto enc = net.encode(net.embed_region(slide.regions.at(idx)), trace);
    out.by_index.emplace(idx, RegionInference{idx, enc.class_token(), std::move(enc.trace)});
  }
  return out;
}

TensorF gather_tokens(const EncodedRegions& enc, const std::vector<std::size_t>& draws) {
  std::vector<TensorF> rows;
  rows.reserve(draws.size());
  for (std::size_t idx : draws) rows.push_back(enc.by_index.at(idx).class_token);
  return rows.size() == 1 ? rows.front() : ops::concat<float>(rows, 0);
}

std::size_t target_of(const SlideFeatures& s) { return s.grade == wsi::Grade::High ? 1 : 0; }

}  // namespace

EndoNet model_from_checkpoint(const tensor::Checkpoint& ckpt) {
  json cfg;
  try {
    cfg = json::parse(ckpt.config_json);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Corrupt, std::string("checkpoint config: ") + e.what());
  }
  if (!cfg.contains("encoder")) throw Error(ErrorCode::Corrupt, "checkpoint has no encoder config");
  EndoNet net(model::EncoderConfig::from_json(cfg.at("encoder").dump()), 0);
  net.load_state(ckpt.segment("model"));
  return net;
}

PretrainResult pretrain(const std::vector<SlideFeatures>& train, const PretrainConfig& config_in, RunLog& log,
                        const PretrainOptions& options) {
  config_in.validate();
  std::vector<const SlideFeatures*> slides;
  for (const auto& s : train) {
    if (!s.regions.empty()) slides.push_back(&s);
  }
  if (slides.empty()) throw Error(ErrorCode::EmptyInput, "training split has no slides with tissue regions");
  const PretrainConfig config = effective_pretrain_config(config_in, feature_dim_of(train));
  const json config_json = to_json(config);

  EndoNet net(config.encoder, derive_key(config.seed, 0xE0C));
  tensor::OptimizerState opt;
  opt.config = config.optimizer;
  std::size_t epoch = 0, step = 0;
  double loss_sum = 0.0;
  std::vector<double> epoch_losses;

  if (options.resume) {
    const auto& ck = *options.resume;
    if (ck.stage != "pretrain") throw Error(ErrorCode::InvalidArgument, "resume needs a pretrain checkpoint, got " + ck.stage);
    const json saved = json::parse(ck.config_json);
    if (saved.at("config") != config_json) {
      throw Error(ErrorCode::InvalidArgument, "resume config differs from the checkpoint config");
    }
    net.load_state(ck.segment("model"));
    tensor::restore_optimizer(opt, ck.segment("optimizer"));
    epoch = ck.epoch;
    step = ck.step;
    loss_sum = saved.at("progress").at("loss_sum").get<double>();
    epoch_losses = saved.at("progress").at("epoch_losses").get<std::vector<double>>();
  } else if (config.standardize_features) {
    std::vector<const FeatureBundle*> all;
    for (const auto* s : slides) {
      for (const auto& r : s->regions) all.push_back(&r);
    }
    net.fit_normalization(all);
  }

  log.begin("pretrain", config.seed, config_json);
  log.append({{"event", "data"},
              {"train_slides", slides.size()},
              {"parameters", net.parameter_count()},
              {"resumed_epoch", epoch},
              {"resumed_step", step}});

  const std::size_t steps_per_epoch = slides.size() * config.regions_per_slide_per_epoch;
  std::vector<double> step_losses;
  std::vector<double> epoch_step_losses;
  std::size_t run = 0;
  bool stopped = false;

  auto make_checkpoint = [&] {
    tensor::Checkpoint ck;
    ck.stage = "pretrain";
    ck.config_json =
        checkpoint_config(config.encoder, config_json, {{"loss_sum", loss_sum}, {"epoch_losses", epoch_losses}}).dump();
    ck.rng_state = config.seed;
    ck.epoch = static_cast<std::uint32_t>(epoch);
    ck.step = static_cast<std::uint32_t>(step);
    ck.set_segment("model", net.state());
    ck.set_segment("optimizer", tensor::optimizer_tensors(opt));
    return ck;
  };

  while (epoch < config.epochs && !stopped) {
    const auto schedule = epoch_schedule(config.seed, epoch, slides.size(), config.regions_per_slide_per_epoch);
    const std::uint64_t step_key = derive_key(config.seed, 0x200 + epoch);
    while (step < steps_per_epoch) {
      if (options.max_steps && run == options.max_steps) {
        stopped = true;
        break;
      }
      const SlideFeatures& slide = *slides[schedule[step]];
      Rng rng(derive_key(step_key, step));
      const FeatureBundle& bundle = slide.regions[rng.below(slide.regions.size())];
      const std::uint64_t mask_seed = rng.next();

      tensor::Graph<float> graph;
      TensorF loss;
      {
        tensor::GraphScope<float> scope(graph);
        auto masked = net.apply_mask(net.embed_region(bundle), config.mask_ratio, mask_seed);
        loss = net.reconstruction_loss(net.encode(masked.seq).hidden, masked.masked, bundle);
      }
      tensor::zero_grads(net.parameters());
      graph.backward(loss);
      tensor::optimizer_step(opt, net.parameters());

      const double l = static_cast<double>(loss[0]);
      loss_sum += l;
      step_losses.push_back(l);
      epoch_step_losses.push_back(l);
      if (options.on_step) options.on_step(epoch + 1, step + 1, l);
      ++step;
      ++run;
    }
    if (stopped) break;
    epoch_losses.push_back(loss_sum / static_cast<double>(steps_per_epoch));
    log.append({{"event", "epoch"},
                {"epoch", epoch + 1},
                {"mean_loss", epoch_losses.back()},
                {"steps", steps_per_epoch},
                {"step_losses", epoch_step_losses}});
    epoch_step_losses.clear();
    loss_sum = 0.0;
    step = 0;
    ++epoch;
    if (!options.checkpoint_path.empty()) tensor::save_checkpoint(options.checkpoint_path, make_checkpoint());
  }

  tensor::Checkpoint ck = make_checkpoint();
  if (stopped && !options.checkpoint_path.empty()) tensor::save_checkpoint(options.checkpoint_path, ck);
  const bool finished = epoch >= config.epochs;
  json summary{{"finished", finished}, {"epoch_losses", epoch_losses}};
  if (finished) summary["checksum"] = tensor::tensors_checksum(net.state());
  log.end(summary);
  return PretrainResult{std::move(net), std::move(ck), std::move(epoch_losses), std::move(step_losses), finished};
}

bool trainable_when_frozen(const std::string& name, bool train_projection) {
  if (name.rfind("heads.cls.", 0) == 0) return true;
  return train_projection && name.rfind("encoder.proj.", 0) == 0;
}

FinetuneResult finetune(const tensor::Checkpoint& pretrained, const std::vector<SlideFeatures>& train_in,
                        const std::vector<SlideFeatures>& val_in, const FinetuneConfig& config, RunLog& log,
                        const std::filesystem::path& checkpoint_path) {
  config.validate();
  if (pretrained.stage != "pretrain") {
    throw Error(ErrorCode::InvalidArgument, "fine-tuning needs a pretrain checkpoint, got " + pretrained.stage);
  }
  std::vector<const SlideFeatures*> train, val;
  for (const auto& s : train_in) {
    if (!s.regions.empty()) train.push_back(&s);
  }
  for (const auto& s : val_in) {
    if (!s.regions.empty()) val.push_back(&s);
  }
  if (train.empty()) throw Error(ErrorCode::EmptyInput, "training split has no slides with tissue regions");
  if (val.empty()) throw Error(ErrorCode::EmptyInput, "validation split is empty");
  std::array<std::size_t, 2> counts{0, 0};
  for (const auto* s : train) ++counts[target_of(*s)];
  if (counts[0] == 0 || counts[1] == 0) {
    throw Error(ErrorCode::SingleClass, "training split holds a single grade");
  }

  EndoNet net = model_from_checkpoint(pretrained);
  if (feature_dim_of(train_in) != net.config().feature_dim) {
    throw Error(ErrorCode::ShapeMismatch, "feature dimension differs from the pre-trained model");
  }
  if (config.freeze_encoder) {
    for (auto& p : net.parameters()) {
      if (!trainable_when_frozen(p.name, config.train_projection)) p.tensor.set_requires_grad(false);
    }
  }
  std::array<double, 2> weights{};
  if (config.class_weights) {
    weights = *config.class_weights;
  } else {
    const double n = static_cast<double>(train.size());
    weights = {n / (2.0 * static_cast<double>(counts[0])), n / (2.0 * static_cast<double>(counts[1]))};
  }

  json config_json = to_json(config);
  config_json["class_weights"] = weights;
  log.begin("finetune", config.seed, config_json);
  log.append({{"event", "data"},
              {"train_slides", train.size()},
              {"val_slides", val.size()},
              {"train_low", counts[0]},
              {"train_high", counts[1]},
              {"pretrain_checksum", tensor::tensors_checksum(pretrained.segment("model"))}});

  tensor::OptimizerState opt;
  opt.config = config.optimizer;
  std::vector<FinetuneEpoch> epochs;
  TensorList best_state = tensor::clone_tensors(net.state());
  std::size_t best_epoch = 0;
  const std::uint64_t eval_seed = inference_seed(config.seed);

  for (std::size_t e = 0; e < config.epochs; ++e) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng(derive_key(derive_key(config.seed, 0x300), e)).shuffle(std::span<std::size_t>(order));
    const std::uint64_t step_key = derive_key(config.seed, 0x400 + e);
    double loss_sum = 0.0;
    for (std::size_t j = 0; j < order.size(); ++j) {
      const SlideFeatures& slide = *train[order[j]];
      Rng rng(derive_key(step_key, j));
      const auto draws = wsi::sample_indices(slide.regions.size(), config.regions_per_slide_train, rng);
      const std::size_t target = target_of(slide);
      tensor::Graph<float> graph;
      TensorF loss;
      {
        tensor::GraphScope<float> scope(graph);
        const auto enc = encode_unique(net, slide, draws, model::TraceMode::none);
        const auto pred = net.classify_slide(gather_tokens(enc, draws));
        loss = ops::scale(ops::cross_entropy(pred.logits, {target}), static_cast<float>(weights[target]));
      }
      tensor::zero_grads(net.parameters());
      graph.backward(loss);
      tensor::optimizer_step(opt, net.parameters());
      loss_sum += static_cast<double>(loss[0]);
    }

    std::vector<metrics::ScoredSlide> scored;
    for (const auto* s : val) {
      const auto inf = predict_slide(net, *s, config.regions_per_slide_eval, eval_seed);
      scored.push_back({s->slide_id, s->subtype, s->grade, static_cast<double>(inf.prob_high)});
    }
    FinetuneEpoch rec{e + 1, loss_sum / static_cast<double>(order.size()), metrics::auc(scored),
                      metrics::weighted_f1(scored)};
    epochs.push_back(rec);
    const bool improved = best_epoch == 0 || rec.val_auc > epochs[best_epoch - 1].val_auc ||
                          (rec.val_auc == epochs[best_epoch - 1].val_auc && rec.val_f1 > epochs[best_epoch - 1].val_f1);
    if (improved) {
      best_state = tensor::clone_tensors(net.state());
      best_epoch = e + 1;
    }
    log.append({{"event", "epoch"},
                {"epoch", rec.epoch},
                {"train_loss", rec.train_loss},
                {"val_auc", rec.val_auc},
                {"val_f1", rec.val_f1},
                {"best_epoch", best_epoch}});
    if (e + 1 - best_epoch >= config.patience) break;
  }

  net.load_state(best_state);
  tensor::Checkpoint ck;
  ck.stage = "finetune";
  json pre = json::parse(pretrained.config_json);
  ck.config_json = checkpoint_config(net.config(), config_json,
                                     {{"best_epoch", best_epoch}, {"pretrain_config", pre.at("config")}})
                       .dump();
  ck.rng_state = config.seed;
  ck.epoch = static_cast<std::uint32_t>(best_epoch);
  ck.set_segment("model", net.state());
  if (!checkpoint_path.empty()) tensor::save_checkpoint(checkpoint_path, ck);
  log.end({{"best_epoch", best_epoch},
           {"best_val_auc", epochs.at(best_epoch - 1).val_auc},
           {"epochs_run", epochs.size()},
           {"checksum", tensor::tensors_checksum(net.state())}});
  return FinetuneResult{std::move(net), std::move(ck), std::move(epochs), best_epoch, weights};
}

float classify_regions(const EndoNet& model, const SlideFeatures& slide, const std::vector<std::size_t>& regions) {
  if (regions.empty()) throw Error(ErrorCode::EmptyInput, "no regions to classify");
  const auto enc = encode_unique(model, slide, regions, model::TraceMode::none);
  return model.classify_slide(gather_tokens(enc, regions)).prob_high;
}

SlideInference predict_slide(const EndoNet& model, const SlideFeatures& slide, std::size_t k, std::uint64_t seed,
                             model::TraceMode trace) {
  if (slide.regions.empty()) throw Error(ErrorCode::NoTissue, "slide " + slide.slide_id + " has no tissue regions");
  if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be >= 1");
  Rng rng(derive_key(seed, fnv1a64(slide.slide_id)));
  SlideInference out;
  out.slide_id = slide.slide_id;
  out.sampled = wsi::sample_indices(slide.regions.size(), k, rng);
  auto enc = encode_unique(model, slide, out.sampled, trace);
  out.class_tokens = gather_tokens(enc, out.sampled);
  out.prob_high = model.classify_slide(out.class_tokens).prob_high;
  for (auto& [idx, r] : enc.by_index) out.unique.push_back(std::move(r));
  return out;
}

}  // namespace endonet::pipeline
