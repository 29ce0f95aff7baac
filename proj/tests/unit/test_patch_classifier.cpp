#include <doctest.h>

#include "endonet/features/patch_classifier.hpp"
#include "endonet/metrics/metrics.hpp"
#include "endonet/wsi/synthetic.hpp"

using namespace endonet;
using namespace endonet::features;

namespace {

// 5 Low + 5 High synthetic slides, 16 patches each from the slide centre.
std::vector<wsi::LabeledPatch> synthetic_patches(std::uint64_t seed) {
  std::vector<wsi::LabeledPatch> out;
  for (int s = 0; s < 10; ++s) {
    wsi::SyntheticSlideSpec spec;
    spec.slide_id = "p" + std::to_string(seed) + "_" + std::to_string(s);
    spec.side_um = 4480;
    spec.grade = s % 2 ? wsi::Grade::High : wsi::Grade::Low;
    spec.seed = seed * 100 + static_cast<std::uint64_t>(s);
    spec = wsi::resolve_defaults(spec);
    const wsi::Image plane = wsi::render_synthetic_plane(spec);
    const wsi::AnnotationBox box{spec.slide_id, 1792, 1792, 896, 896, *spec.subtype};
    auto got = wsi::extract_annotation_patches(spec.slide_id, 1.0, plane.width, plane.height, plane, {box});
    for (auto& p : got.patches) out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

TEST_CASE("patch classifier separates synthetic grades within 5 epochs") {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto patches = synthetic_patches(seed);
    REQUIRE(patches.size() == 160);
    PatchTrainConfig cfg;
    cfg.cnn.width_multiplier = 0.125;
    cfg.epochs = 5;
    cfg.seed = seed;
    const auto result = train_patch_classifier(patches, cfg);
    const auto& r = result.report;
    REQUIRE(r.epochs.size() == 5);
    double best = 0;
    for (const auto& e : r.epochs) best = std::max(best, e.val_auc);
    MESSAGE("seed " << seed << ": best val AUC " << best << " at epoch " << r.selected_epoch);
    CHECK(best >= 0.95);
    CHECK(r.epochs[r.selected_epoch - 1].val_auc == best);
    CHECK(r.val_patches + r.train_patches == 160);

    // the returned model is the selected epoch's: re-scoring reproduces its AUC
    ResNet model = result.model;
    std::vector<const wsi::Image*> imgs;
    std::vector<metrics::ScoredSlide> scored;
    const auto split = split_patches(patches, cfg.split_fraction, 2, seed);
    for (auto i : split.val) {
      imgs.push_back(&patches[i].pixels);
      scored.push_back({patches[i].slide_id, patches[i].subtype, patches[i].grade, 0});
    }
    const auto probs = predict_patches(model, imgs);
    for (std::size_t i = 0; i < probs.size(); ++i) scored[i].prob_high = probs[i];
    CHECK(metrics::auc(scored) == best);
  }
}
