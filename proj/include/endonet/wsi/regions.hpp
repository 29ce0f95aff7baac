#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "endonet/common/rng.hpp"
#include "endonet/wsi/image.hpp"
#include "endonet/wsi/manifest.hpp"
#include "endonet/wsi/tissue.hpp"

// Region and patch geometry on a plane at 1 um/px, where um and px coincide.
namespace endonet::wsi {

inline constexpr std::size_t kPatchPx = 224;
inline constexpr std::size_t kGridSide = 20;
inline constexpr std::size_t kRegionSideUm = kPatchPx * kGridSide;  // 4480

struct RegionSpec {
  long origin_x = 0;  // um
  long origin_y = 0;
  std::size_t side_um = kRegionSideUm;
  std::size_t grid_rows = kGridSide;
  std::size_t grid_cols = kGridSide;
  std::size_t patch_px = kPatchPx;
  double tissue_fraction = 0.0;

  std::size_t patch_um() const noexcept { return side_um / grid_rows; }
  std::size_t slots() const noexcept { return grid_rows * grid_cols; }
  /// Stable identifier "x<origin_x>_y<origin_y>".
  std::string id() const;
  bool operator==(const RegionSpec&) const = default;
};

/// Throws InvalidArgument unless side = rows * patch_um = cols * patch_um
/// and patch_um == patch_px.
void validate_region(const RegionSpec& region);

struct PatchSlot {
  std::size_t row = 0;
  std::size_t col = 0;
  bool padding = false;
  Image pixels;  // empty for padding slots
};

struct PatchGrid {
  RegionSpec region;
  std::vector<PatchSlot> slots;  // row-major, exactly rows * cols
  std::size_t real_count() const;
  std::size_t padding_count() const { return slots.size() - real_count(); }
};

/// Slots whose 224 px square lies entirely inside the plane are patches;
/// the rest are padding. Throws OutsideSlide when the region misses the
/// plane entirely.
PatchGrid extract_patches(const Image& plane, const RegionSpec& region, int jobs = 1);

/// Grid-aligned, non-overlapping candidates covering the plane, in
/// row-major order, with their tissue fraction filled in.
std::vector<RegionSpec> candidate_regions(const TissueMask& mask, const RegionSpec& geometry = {});

/// k indices into [0, n): a prefix of a Fisher-Yates shuffle when n >= k,
/// otherwise k independent draws with replacement.
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Rng& rng);

struct RegionSample {
  std::vector<RegionSpec> regions;
  std::size_t candidate_count = 0;
  bool with_replacement = false;
  std::vector<std::string> warnings;
};

/// Draws k regions uniformly among candidates with tissue_fraction >=
/// min_tissue using Rng(seed). Throws NoTissue when no candidate qualifies.
RegionSample sample_regions(const TissueMask& mask, std::size_t k, double min_tissue, std::uint64_t seed,
                            const RegionSpec& geometry = {});

struct LabeledPatch {
  std::string slide_id;
  Subtype subtype = Subtype::EndometrioidG1;
  Grade grade = Grade::Low;
  long x = 0;  // um
  long y = 0;
  Image pixels;
};

struct AnnotationPatches {
  std::vector<LabeledPatch> patches;
  std::vector<std::string> warnings;
};

/// Scales level-0 boxes to um via level0_mpp and tiles each into whole
/// non-overlapping patches from its origin; partial patches are dropped.
/// Boxes of other slides are ignored; boxes not inside the slide are skipped
/// with a warning.
AnnotationPatches extract_annotation_patches(const std::string& slide_id, double level0_mpp,
                                             std::size_t level0_width, std::size_t level0_height,
                                             const Image& plane, const std::vector<AnnotationBox>& boxes);

}  // namespace endonet::wsi
