#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "endonet/features/feature_store.hpp"
#include "endonet/model/transformer.hpp"
#include "endonet/wsi/image.hpp"
#include "endonet/wsi/regions.hpp"
#include "endonet/wsi/tissue.hpp"

namespace endonet::viz {

enum class Aggregation : std::uint8_t {
  last_layer,  // final layer, class-token row, mean over heads
  rollout,     // product of head-averaged (A + I) / 2 over all captured layers
};

std::string aggregation_name(Aggregation a);
Aggregation parse_aggregation(const std::string& name);

/// Raw class-token attention per grid slot (row-major). Slots that are
/// padding or absent from the bundle have valid = 0 and score 0.
struct PatchScores {
  std::size_t rows = wsi::kGridSide;
  std::size_t cols = wsi::kGridSide;
  std::vector<double> score;
  std::vector<std::uint8_t> valid;
  std::size_t layer = 0;  // source layer of the scores
};

/// Throws InvalidArgument when the trace is missing, or lacks the layers the
/// aggregation needs; ShapeMismatch when the trace does not match the bundle.
PatchScores class_token_attention(const model::AttentionTrace& trace, const features::FeatureBundle& bundle,
                                  Aggregation aggregation = Aggregation::last_layer,
                                  std::size_t grid_rows = wsi::kGridSide, std::size_t grid_cols = wsi::kGridSide);

struct RegionAttention {
  wsi::RegionSpec region;
  PatchScores scores;
};

/// Slide canvas with one cell per patch_px square, anchored at (0, 0).
struct AttentionCanvas {
  std::size_t plane_width = 0;
  std::size_t plane_height = 0;
  std::size_t cell_px = wsi::kPatchPx;
  std::size_t cols = 0;
  std::size_t rows = 0;
  std::vector<double> raw;    // mean of overlapping region scores
  std::vector<double> value;  // slide-level min-max normalized to [0, 1]
  std::vector<std::uint8_t> valid;
  double min = 0.0;
  double max = 0.0;

  std::size_t index(std::size_t col, std::size_t row) const { return row * cols + col; }
};

/// Places every region's valid scores on the canvas, averages overlaps and
/// min-max normalizes across the slide; a constant map becomes 0.5. Region
/// origins must be multiples of the patch size (InvalidArgument).
AttentionCanvas normalize_and_stitch(const std::vector<RegionAttention>& regions, std::size_t plane_width,
                                     std::size_t plane_height, std::size_t cell_px = wsi::kPatchPx);

/// Piecewise-linear blue -> purple -> red ramp over [0, 1].
std::array<double, 3> colormap(double t);

/// Blends colormap(value) into every pixel of every valid cell with weight
/// alpha, rounding to nearest. When a tissue mask is given, only pixels in
/// tissue cells are blended. Throws DimensionMismatch when the canvas or
/// mask was built for other plane dimensions.
wsi::Image render_heatmap(const wsi::Image& plane, const AttentionCanvas& canvas, double alpha = 0.45,
                          const wsi::TissueMask* tissue = nullptr, int jobs = 1);

/// Sidecar {slide_id, bounds: {min, max}, layer, aggregation, alpha, cell_px, regions}.
void write_sidecar(const std::filesystem::path& path, const std::string& slide_id, const AttentionCanvas& canvas,
                   std::size_t layer, Aggregation aggregation, double alpha, std::size_t regions);

}  // namespace endonet::viz
