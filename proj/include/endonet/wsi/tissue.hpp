#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "endonet/wsi/image.hpp"

namespace endonet::wsi {

struct TissueParams {
  double saturation_threshold = 0.08;
  double brightness_ceiling = 0.92;
  std::size_t stride = 32;
};

/// Boolean grid of ceil(w / stride) x ceil(h / stride) cells. A cell is tissue
/// iff its mean HSV saturation (max - min) / max exceeds the threshold and its
/// mean brightness (r + g + b) / 765 is below the ceiling. Edge cells average
/// over the pixels they actually cover.
struct TissueMask {
  std::size_t stride = 32;
  std::size_t plane_width = 0;
  std::size_t plane_height = 0;
  std::size_t cols = 0;
  std::size_t rows = 0;
  std::vector<std::uint8_t> cells;

  bool at(std::size_t col, std::size_t row) const { return cells[row * cols + col] != 0; }
  /// Fraction of all cells that are tissue.
  double fraction() const;
  /// Fraction of tissue over the stride cells covering the px window
  /// [x, x + w) x [y, y + h). Cells beyond the plane count as background.
  double window_fraction(long x, long y, std::size_t w, std::size_t h) const;
};

/// Throws InvalidArgument on an empty plane.
TissueMask compute_tissue_mask(const Image& plane, const TissueParams& params = {}, int jobs = 1);

}  // namespace endonet::wsi
