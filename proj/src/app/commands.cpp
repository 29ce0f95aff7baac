#include "endonet/app/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <set>

#include "endonet/common/error.hpp"
#include "endonet/common/rng.hpp"
#include "endonet/features/cnn.hpp"
#include "endonet/features/feature_store.hpp"
#include "endonet/features/patch_classifier.hpp"
#include "endonet/metrics/metrics.hpp"
#include "endonet/pipeline/config.hpp"
#include "endonet/pipeline/runlog.hpp"
#include "endonet/pipeline/training.hpp"
#include "endonet/tensor/checkpoint.hpp"
#include "endonet/viz/attention.hpp"
#include "endonet/wsi/manifest.hpp"
#include "endonet/wsi/regions.hpp"
#include "endonet/wsi/slide.hpp"
#include "endonet/wsi/synthetic.hpp"
#include "endonet/wsi/tissue.hpp"

namespace endonet::app {

using nlohmann::json;

int effective_jobs(const CommonOptions& c) { return c.deterministic ? 1 : std::max(1, c.jobs); }

fs::path data_root() {
  const char* env = std::getenv("ENDONET_DATA_DIR");
  return (env && *env) ? fs::path(env) : fs::current_path();
}

fs::path resolve_input(const fs::path& p) {
  if (p.empty()) return p;
  fs::path out = p;
  if (!p.is_absolute() && !fs::exists(p) && fs::exists(data_root() / p)) out = data_root() / p;
  return fs::absolute(out).lexically_normal();
}

fs::path prepare_run_dir(const CommonOptions& c, const std::string& command, const json& config) {
  fs::path dir = c.out;
  if (dir.empty()) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
    dir = data_root() / "runs" / (std::string(stamp) + "-" + command + "-" + pipeline::config_hash(config));
  }
  fs::create_directories(dir);
  return fs::absolute(dir).lexically_normal();
}

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::Io, "cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedInput, path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorCode::Io, "cannot write " + path.string());
  os << text;
}

/// Calls fn(json, line) for every non-empty line; parse errors carry the line number.
template <typename F>
void for_each_line(const fs::path& path, F&& fn) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      fn(json::parse(line), n);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::MalformedInput, path.string() + " line " + std::to_string(n) + ": " + e.what());
    }
  }
}

json common_json(const CommonOptions& c) {
  return {{"seed", c.seed}, {"deterministic", c.deterministic}, {"jobs", effective_jobs(c)}};
}

/// Inverse of RegionSpec::id().
wsi::RegionSpec parse_region_id(const std::string& id) {
  long x = 0, y = 0;
  char tail = 0;
  if (std::sscanf(id.c_str(), "x%ld_y%ld%c", &x, &y, &tail) != 2) {
    throw Error(ErrorCode::MalformedInput, "bad region id '" + id + "'");
  }
  wsi::RegionSpec r;
  r.origin_x = x;
  r.origin_y = y;
  return r;
}

std::optional<wsi::Split> split_filter(const std::string& name) {
  if (name == "all") return std::nullopt;
  return wsi::parse_split(name);
}

std::vector<pipeline::SlideFeatures> load_slides(const fs::path& manifest, const fs::path& features,
                                                 std::optional<wsi::Split> split) {
  const auto m = wsi::read_manifest(resolve_input(manifest));
  const auto bundles = features::read_feature_store(resolve_input(features));
  return pipeline::assemble_slides(m, bundles, split);
}

struct Run {
  fs::path dir;
  pipeline::RunLog log;
};

Run start_run(const CommonOptions& c, const std::string& command, const json& config, bool begin = true) {
  Run r;
  r.dir = prepare_run_dir(c, command, config);
  r.log = pipeline::RunLog(r.dir / "runlog.jsonl");
  if (begin) r.log.begin(command, c.seed, config);
  return r;
}

features::PatchTrainConfig patch_config_from_json(const json& j) {
  static const std::set<std::string> known{"cnn", "epochs", "batch_size", "split_fraction", "augment", "optimizer"};
  features::PatchTrainConfig c;
  try {
    for (const auto& [k, v] : j.items()) {
      if (!known.count(k)) throw Error(ErrorCode::MalformedInput, "cnn config: unknown key '" + k + "'");
    }
    if (j.contains("cnn")) c.cnn = features::CnnConfig::from_json(j.at("cnn").dump());
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.split_fraction = j.value("split_fraction", c.split_fraction);
    c.augment = j.value("augment", c.augment);
    if (j.contains("optimizer")) c.optimizer = pipeline::optimizer_config_from_json(j.at("optimizer"));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedInput, std::string("cnn config: ") + e.what());
  }
  return c;
}

json patch_config_json(const features::PatchTrainConfig& c) {
  return {{"cnn", json::parse(c.cnn.to_json())},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"split_fraction", c.split_fraction},
          {"augment", c.augment},
          {"optimizer", pipeline::to_json(c.optimizer)},
          {"seed", c.seed}};
}

}  // namespace

json run_synth(const SynthOptions& o) {
  if (o.n == 0) throw Error(ErrorCode::InvalidArgument, "--n must be >= 1");
  if (!(o.high_fraction >= 0 && o.high_fraction <= 1)) {
    throw Error(ErrorCode::InvalidArgument, "--high-fraction must lie in [0,1]");
  }
  json config = common_json(o.common);
  config.update({{"n", o.n}, {"high_fraction", o.high_fraction}, {"side_um", o.side_um}, {"mpp", o.mpp}});
  Run run = start_run(o.common, "synth", config);

  const std::size_t n_high = static_cast<std::size_t>(std::llround(o.high_fraction * static_cast<double>(o.n)));
  std::vector<std::size_t> order(o.n);
  for (std::size_t i = 0; i < o.n; ++i) order[i] = i;
  Rng(derive_key(o.common.seed, 0x6AD)).shuffle(std::span<std::size_t>(order));
  std::vector<bool> high(o.n, false);
  for (std::size_t i = 0; i < n_high; ++i) high[order[i]] = true;

  wsi::Manifest manifest;
  std::vector<wsi::AnnotationBox> boxes;
  for (std::size_t i = 0; i < o.n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "%03zu", i);
    wsi::SyntheticSlideSpec spec;
    spec.slide_id = std::string("synth_") + id;
    spec.patient_id = std::string("patient_") + id;
    spec.side_um = o.side_um;
    spec.mpp = o.mpp;
    spec.grade = high[i] ? wsi::Grade::High : wsi::Grade::Low;
    spec.seed = derive_key(o.common.seed, i);
    auto slide = wsi::generate_synthetic_slide(spec, run.dir / "slides" / spec.slide_id, effective_jobs(o.common));
    manifest.push_back(slide.entry);
    boxes.insert(boxes.end(), slide.annotations.begin(), slide.annotations.end());
  }
  wsi::write_manifest(run.dir / "manifest.jsonl", manifest);
  wsi::write_annotations(run.dir / "annotations.jsonl", boxes);
  json summary{{"out", run.dir.string()}, {"slides", o.n}, {"high", n_high}, {"low", o.n - n_high},
               {"manifest", (run.dir / "manifest.jsonl").string()}};
  run.log.end(summary);
  return summary;
}

json run_split(const SplitOptions& o) {
  json config = common_json(o.common);
  config.update({{"manifest", o.manifest.string()},
                 {"train", o.fractions.train},
                 {"val", o.fractions.val},
                 {"test", o.fractions.test}});
  const auto manifest = wsi::read_manifest(resolve_input(o.manifest));
  Run run = start_run(o.common, "split", config);
  const auto result = wsi::split_dataset(manifest, o.fractions, o.common.seed);
  wsi::write_manifest(run.dir / "manifest.jsonl", result.manifest);
  json counts = json::object();
  for (auto s : {wsi::Split::train, wsi::Split::val, wsi::Split::test, wsi::Split::external}) {
    std::size_t total = 0, high = 0;
    for (const auto& e : result.manifest) {
      if (e.split != s) continue;
      ++total;
      high += e.grade == wsi::Grade::High;
    }
    if (total) counts[std::string(wsi::split_name(s))] = {{"slides", total}, {"high", high}};
  }
  json summary{{"out", run.dir.string()},
               {"manifest", (run.dir / "manifest.jsonl").string()},
               {"splits", counts},
               {"attempts", result.attempts},
               {"composition_ok", result.composition_ok},
               {"warnings", result.warnings}};
  run.log.end(summary);
  return summary;
}

json run_tile(const TileOptions& o) {
  json config = common_json(o.common);
  config.update({{"manifest", o.manifest.string()},
                 {"annotations", o.annotations.string()},
                 {"min_tissue", o.min_tissue},
                 {"patch_splits", o.patch_splits}});
  const fs::path manifest_path = resolve_input(o.manifest);
  const auto manifest = wsi::read_manifest(manifest_path);
  fs::path ann_path = o.annotations.empty() ? manifest_path.parent_path() / "annotations.jsonl" : resolve_input(o.annotations);
  std::vector<wsi::AnnotationBox> boxes;
  if (fs::exists(ann_path)) {
    boxes = wsi::read_annotations(ann_path);
  } else if (!o.annotations.empty()) {
    throw Error(ErrorCode::Io, "cannot open " + ann_path.string());
  }
  // synth writes annotations next to the slides, split writes the manifest elsewhere
  if (boxes.empty() && o.annotations.empty() && !manifest.empty()) {
    const fs::path alt = manifest.front().path.parent_path().parent_path() / "annotations.jsonl";
    if (fs::exists(alt)) boxes = wsi::read_annotations(alt);
  }
  std::set<wsi::Split> harvest;
  for (const auto& s : o.patch_splits) harvest.insert(wsi::parse_split(s));

  Run run = start_run(o.common, "tile", config);
  const int jobs = effective_jobs(o.common);
  fs::create_directories(run.dir / "patches");
  std::string patch_lines, region_lines;
  std::size_t total_patches = 0, total_regions = 0;
  std::vector<std::string> no_tissue;
  for (const auto& e : manifest) {
    const auto slide = wsi::load_slide(e.path);
    const wsi::Image plane = wsi::downsample_to_target(slide, 1.0);
    const auto mask = wsi::compute_tissue_mask(plane, {}, jobs);
    std::size_t kept = 0;
    for (const auto& r : wsi::candidate_regions(mask)) {
      if (r.tissue_fraction < o.min_tissue) continue;
      region_lines += json{{"slide_id", e.slide_id},
                           {"region_id", r.id()},
                           {"origin_x", r.origin_x},
                           {"origin_y", r.origin_y},
                           {"side_um", r.side_um},
                           {"tissue_fraction", r.tissue_fraction}}
                          .dump() +
                      "\n";
      ++kept;
    }
    total_regions += kept;
    if (!kept) no_tissue.push_back(e.slide_id);

    const bool wanted = harvest.empty() || (e.split && harvest.count(*e.split));
    if (!wanted) continue;
    auto ann = wsi::extract_annotation_patches(e.slide_id, slide.mpp, slide.width, slide.height, plane, boxes);
    for (const auto& w : ann.warnings) run.log.append({{"event", "warning"}, {"slide_id", e.slide_id}, {"message", w}});
    if (ann.patches.empty()) continue;
    // one vertical mosaic per slide keeps the patch set to a single PNG
    wsi::Image mosaic(wsi::kPatchPx, wsi::kPatchPx * ann.patches.size());
    const std::string file = "patches/" + e.slide_id + ".png";
    for (std::size_t i = 0; i < ann.patches.size(); ++i) {
      const auto& p = ann.patches[i];
      std::copy(p.pixels.pixels.begin(), p.pixels.pixels.end(),
                mosaic.pixels.begin() + static_cast<std::ptrdiff_t>(i * p.pixels.pixels.size()));
      patch_lines += json{{"slide_id", p.slide_id},
                          {"subtype", wsi::subtype_name(p.subtype)},
                          {"grade", wsi::grade_name(p.grade)},
                          {"x", p.x},
                          {"y", p.y},
                          {"file", file},
                          {"index", i}}
                         .dump() +
                     "\n";
    }
    wsi::write_png(run.dir / file, mosaic);
    total_patches += ann.patches.size();
  }
  write_text(run.dir / "patches.jsonl", patch_lines);
  write_text(run.dir / "regions.jsonl", region_lines);
  json summary{{"out", run.dir.string()},
               {"slides", manifest.size()},
               {"regions", total_regions},
               {"patches", total_patches},
               {"slides_without_tissue", no_tissue}};
  run.log.end(summary);
  return summary;
}

json run_train_cnn(const TrainCnnOptions& o) {
  features::PatchTrainConfig cfg;
  if (!o.config.empty()) cfg = patch_config_from_json(read_json_file(resolve_input(o.config)));
  if (o.width) cfg.cnn.width_multiplier = *o.width;
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.classes) cfg.cnn.num_classes = *o.classes;
  cfg.seed = o.common.seed;
  cfg.cnn.validate();
  json config = common_json(o.common);
  config.update({{"patches", o.patches.string()}, {"manifest", o.manifest.string()}, {"train", patch_config_json(cfg)}});

  std::optional<std::set<std::string>> allowed;
  if (!o.manifest.empty()) {
    allowed.emplace();
    for (const auto& e : wsi::read_manifest(resolve_input(o.manifest))) {
      if (e.split == wsi::Split::train) allowed->insert(e.slide_id);
    }
  }
  const fs::path index = resolve_input(o.patches);
  std::map<std::string, wsi::Image> mosaics;
  std::vector<wsi::LabeledPatch> patches;
  for_each_line(index, [&](const json& j, std::size_t line) {
    const std::string slide = j.at("slide_id").get<std::string>();
    if (allowed && !allowed->count(slide)) return;
    const std::string file = j.at("file").get<std::string>();
    auto it = mosaics.find(file);
    if (it == mosaics.end()) it = mosaics.emplace(file, wsi::read_png(index.parent_path() / file)).first;
    const std::size_t i = j.at("index").get<std::size_t>();
    if ((i + 1) * wsi::kPatchPx > it->second.height || it->second.width != wsi::kPatchPx) {
      throw Error(ErrorCode::MalformedInput, index.string() + " line " + std::to_string(line) + ": patch outside mosaic");
    }
    wsi::LabeledPatch p;
    p.slide_id = slide;
    p.subtype = wsi::parse_subtype(j.at("subtype").get<std::string>());
    p.grade = wsi::grade_of(p.subtype);
    p.x = j.at("x").get<long>();
    p.y = j.at("y").get<long>();
    p.pixels = it->second.crop(0, i * wsi::kPatchPx, wsi::kPatchPx, wsi::kPatchPx);
    patches.push_back(std::move(p));
  });
  if (patches.empty()) throw Error(ErrorCode::EmptyInput, "no training patches in " + index.string());
  mosaics.clear();

  Run run = start_run(o.common, "train-cnn", config);
  auto result = features::train_patch_classifier(patches, cfg, [&](const features::PatchEpoch& e) {
    run.log.append({{"event", "epoch"},
                    {"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"val_auc", e.val_auc},
                    {"val_f1", e.val_f1}});
  });
  features::save_cnn(run.dir / "cnn.endc", result.model);
  const auto& r = result.report;
  json summary{{"out", run.dir.string()},
               {"checkpoint", (run.dir / "cnn.endc").string()},
               {"selected_epoch", r.selected_epoch},
               {"val_auc", r.epochs.at(r.selected_epoch - 1).val_auc},
               {"parameters", r.parameter_count},
               {"feature_dim", result.model.config().feature_dim()},
               {"train_patches", r.train_patches},
               {"val_patches", r.val_patches},
               {"checksum", tensor::tensors_checksum(result.model.state())}};
  write_text(run.dir / "cnn_report.json", summary.dump(2) + "\n");
  run.log.end(summary);
  return summary;
}

json run_extract(const ExtractOptions& o) {
  json config = common_json(o.common);
  config.update({{"manifest", o.manifest.string()},
                 {"regions", o.regions.string()},
                 {"cnn", o.cnn.string()},
                 {"batch", o.batch}});
  const auto manifest = wsi::read_manifest(resolve_input(o.manifest));
  std::map<std::string, std::vector<wsi::RegionSpec>> regions;
  for_each_line(resolve_input(o.regions), [&](const json& j, std::size_t) {
    wsi::RegionSpec r;
    r.origin_x = j.at("origin_x").get<long>();
    r.origin_y = j.at("origin_y").get<long>();
    r.tissue_fraction = j.value("tissue_fraction", 0.0);
    regions[j.at("slide_id").get<std::string>()].push_back(r);
  });
  const auto model = features::load_cnn(resolve_input(o.cnn));
  Run run = start_run(o.common, "extract-features", config);
  const int jobs = effective_jobs(o.common);
  std::vector<features::FeatureBundle> bundles;
  std::size_t patches = 0;
  for (const auto& e : manifest) {
    auto it = regions.find(e.slide_id);
    if (it == regions.end()) continue;
    const wsi::Image plane = wsi::downsample_to_target(wsi::load_slide(e.path), 1.0);
    for (const auto& r : it->second) {
      const auto grid = wsi::extract_patches(plane, r, jobs);
      bundles.push_back(features::extract_features(model, grid, e.slide_id, jobs, o.batch));
      patches += bundles.back().real_count();
    }
  }
  features::write_feature_store(run.dir / "features.endf", bundles);
  json summary{{"out", run.dir.string()},
               {"features", (run.dir / "features.endf").string()},
               {"bundles", bundles.size()},
               {"patches", patches},
               {"feature_dim", model.config().feature_dim()}};
  run.log.end(summary);
  return summary;
}

json run_pretrain(const PretrainOptions& o) {
  pipeline::PretrainConfig cfg;
  if (!o.config.empty()) cfg = pipeline::pretrain_config_from_json(read_json_file(resolve_input(o.config)));
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.mask_ratio) cfg.mask_ratio = *o.mask_ratio;
  if (o.learning_rate) cfg.optimizer.learning_rate = *o.learning_rate;
  cfg.seed = o.common.seed;
  cfg.validate();
  const auto train = load_slides(o.manifest, o.features, wsi::Split::train);

  json config = common_json(o.common);
  config.update({{"manifest", o.manifest.string()}, {"features", o.features.string()}, {"pretrain", pipeline::to_json(cfg)}});
  Run run = start_run(o.common, "pretrain", config, false);
  std::optional<tensor::Checkpoint> resume;
  pipeline::PretrainOptions popt;
  popt.checkpoint_path = run.dir / "pretrain.endc";
  if (!o.resume.empty()) {
    resume = tensor::load_checkpoint(resolve_input(o.resume));
    popt.resume = &*resume;
  }
  const auto r = pipeline::pretrain(train, cfg, run.log, popt);
  return {{"out", run.dir.string()},
          {"checkpoint", popt.checkpoint_path.string()},
          {"train_slides", train.size()},
          {"epoch_losses", r.epoch_losses},
          {"parameters", r.model.parameter_count()}};
}

json run_finetune(const FinetuneOptions& o) {
  pipeline::FinetuneConfig cfg;
  if (!o.config.empty()) cfg = pipeline::finetune_config_from_json(read_json_file(resolve_input(o.config)));
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.freeze_encoder) cfg.freeze_encoder = *o.freeze_encoder;
  if (o.learning_rate) cfg.optimizer.learning_rate = *o.learning_rate;
  cfg.seed = o.common.seed;
  cfg.validate();
  const auto train = load_slides(o.manifest, o.features, wsi::Split::train);
  const auto val = load_slides(o.manifest, o.features, wsi::Split::val);
  const auto pre = tensor::load_checkpoint(resolve_input(o.pretrained));

  json config = common_json(o.common);
  config.update({{"manifest", o.manifest.string()},
                 {"features", o.features.string()},
                 {"pretrained", o.pretrained.string()},
                 {"finetune", pipeline::to_json(cfg)}});
  Run run = start_run(o.common, "finetune", config, false);
  const auto r = pipeline::finetune(pre, train, val, cfg, run.log, run.dir / "finetune.endc");
  json epochs = json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_auc", e.val_auc}, {"val_f1", e.val_f1}});
  }
  return {{"out", run.dir.string()},
          {"checkpoint", (run.dir / "finetune.endc").string()},
          {"best_epoch", r.best_epoch},
          {"best_val_auc", r.epochs.at(r.best_epoch - 1).val_auc},
          {"epochs", epochs}};
}

json run_predict(const PredictOptions& o) {
  if (o.k == 0) throw Error(ErrorCode::InvalidArgument, "--k must be >= 1");
  json config = common_json(o.common);
  config.update({{"manifest", o.manifest.string()},
                 {"features", o.features.string()},
                 {"model", o.model.string()},
                 {"split", o.split},
                 {"k", o.k}});
  const auto split = split_filter(o.split);
  const auto manifest = wsi::read_manifest(resolve_input(o.manifest));
  const auto bundles = features::read_feature_store(resolve_input(o.features));
  std::vector<std::string> missing;
  const auto slides = pipeline::assemble_slides(manifest, bundles, split, &missing);
  if (!missing.empty()) throw Error(ErrorCode::NoTissue, "slide " + missing.front() + " has no tissue regions");
  if (slides.empty()) throw Error(ErrorCode::EmptyInput, "no slides in split " + o.split);
  const auto ck = tensor::load_checkpoint(resolve_input(o.model));
  if (ck.stage != "finetune") throw Error(ErrorCode::InvalidArgument, "predict needs a finetune checkpoint, got " + ck.stage);
  const auto model = pipeline::model_from_checkpoint(ck);

  Run run = start_run(o.common, "predict", config);
  std::vector<metrics::ScoredSlide> scored;
  for (const auto& s : slides) {
    const auto inf = pipeline::predict_slide(model, s, o.k, o.common.seed);
    scored.push_back({s.slide_id, s.subtype, s.grade, static_cast<double>(inf.prob_high)});
    run.log.append({{"event", "slide"}, {"slide_id", s.slide_id}, {"prob_high", inf.prob_high}, {"regions", inf.sampled}});
  }
  metrics::write_predictions(run.dir / "predictions.jsonl", scored);
  json summary{{"out", run.dir.string()},
               {"predictions", (run.dir / "predictions.jsonl").string()},
               {"slides", scored.size()}};
  run.log.end(summary);
  return summary;
}

json run_evaluate(const EvaluateOptions& o) {
  json config = common_json(o.common);
  config.update({{"predictions", o.predictions.string()}, {"iterations", o.iterations}, {"threshold", o.threshold}});
  const auto scored = metrics::read_predictions(resolve_input(o.predictions));
  if (scored.empty()) throw Error(ErrorCode::EmptyInput, "no predictions in " + o.predictions.string());
  fs::path report_path;
  CommonOptions c = o.common;
  if (!c.out.empty() && c.out.extension() == ".json") {
    report_path = c.out;
    c.out = c.out.has_parent_path() ? c.out.parent_path() : fs::path(".");
  }
  Run run = start_run(c, "evaluate", config);
  if (report_path.empty()) report_path = run.dir / "report.json";
  const auto report = metrics::evaluate(scored, o.iterations, o.common.seed, o.threshold, effective_jobs(o.common));
  write_text(report_path, report_json(report) + "\n");
  fs::path stem = report_path;
  stem.replace_extension();
  const std::string tables = report_tables(report);
  write_text(stem.string() + "_tables.txt", tables);
  metrics::write_roc_csv(stem.string() + "_roc.csv", metrics::roc_points(scored));
  json summary = json::parse(report_json(report));
  summary["report"] = report_path.string();
  summary["tables"] = tables;
  run.log.end(summary);
  return summary;
}

json run_visualize(const VisualizeOptions& o) {
  const auto aggregation = viz::parse_aggregation(o.aggregation);
  if (!(o.alpha >= 0 && o.alpha <= 1)) throw Error(ErrorCode::InvalidArgument, "--alpha must lie in [0,1]");
  json config = common_json(o.common);
  config.update({{"manifest", o.manifest.string()},
                 {"features", o.features.string()},
                 {"model", o.model.string()},
                 {"slides", o.slides},
                 {"split", o.split},
                 {"k", o.k},
                 {"alpha", o.alpha},
                 {"aggregation", o.aggregation}});
  const auto manifest = wsi::read_manifest(resolve_input(o.manifest));
  const auto bundles = features::read_feature_store(resolve_input(o.features));
  const auto all = pipeline::assemble_slides(manifest, bundles, o.slides.empty() ? split_filter(o.split) : std::nullopt);
  std::vector<const pipeline::SlideFeatures*> chosen;
  if (o.slides.empty()) {
    for (const auto& s : all) chosen.push_back(&s);
  } else {
    for (const auto& id : o.slides) {
      auto it = std::find_if(all.begin(), all.end(), [&](const auto& s) { return s.slide_id == id; });
      if (it == all.end()) {
        const bool known = std::any_of(manifest.begin(), manifest.end(), [&](const auto& e) { return e.slide_id == id; });
        throw Error(known ? ErrorCode::NoTissue : ErrorCode::InvalidArgument,
                    known ? "slide " + id + " has no tissue regions" : "unknown slide " + id);
      }
      chosen.push_back(&*it);
    }
  }
  if (chosen.empty()) throw Error(ErrorCode::EmptyInput, "no slides to visualize");
  const auto ck = tensor::load_checkpoint(resolve_input(o.model));
  const auto model = pipeline::model_from_checkpoint(ck);
  const auto trace_mode = aggregation == viz::Aggregation::rollout ? model::TraceMode::all : model::TraceMode::last;

  Run run = start_run(o.common, "visualize", config);
  const int jobs = effective_jobs(o.common);
  json outputs = json::array();
  for (const auto* s : chosen) {
    const auto entry = std::find_if(manifest.begin(), manifest.end(), [&](const auto& e) { return e.slide_id == s->slide_id; });
    const auto inf = pipeline::predict_slide(model, *s, o.k, o.common.seed, trace_mode);
    std::vector<viz::RegionAttention> maps;
    std::size_t layer = 0;
    for (const auto& u : inf.unique) {
      const auto& bundle = s->regions[u.region_index];
      viz::RegionAttention ra;
      ra.region = parse_region_id(bundle.region_id);
      ra.scores = viz::class_token_attention(u.trace, bundle, aggregation);
      layer = ra.scores.layer;
      maps.push_back(std::move(ra));
    }
    const wsi::Image plane = wsi::downsample_to_target(wsi::load_slide(entry->path), 1.0);
    const auto mask = wsi::compute_tissue_mask(plane, {}, jobs);
    const auto canvas = viz::normalize_and_stitch(maps, plane.width, plane.height);
    const auto overlay = viz::render_heatmap(plane, canvas, o.alpha, &mask, jobs);
    const fs::path png = run.dir / (s->slide_id + "_overlay.png");
    const fs::path side = run.dir / (s->slide_id + "_attention.json");
    wsi::write_png(png, overlay);
    viz::write_sidecar(side, s->slide_id, canvas, layer, aggregation, o.alpha, maps.size());
    outputs.push_back({{"slide_id", s->slide_id},
                       {"overlay", png.string()},
                       {"sidecar", side.string()},
                       {"prob_high", inf.prob_high},
                       {"regions", maps.size()}});
  }
  json summary{{"out", run.dir.string()}, {"slides", outputs}};
  run.log.end(summary);
  return summary;
}

}  // namespace endonet::app
