#include "endonet/wsi/regions.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "endonet/common/error.hpp"
#include "endonet/common/parallel.hpp"

namespace endonet::wsi {

std::string RegionSpec::id() const {
  return "x" + std::to_string(origin_x) + "_y" + std::to_string(origin_y);
}

void validate_region(const RegionSpec& r) {
  if (r.grid_rows == 0 || r.grid_cols == 0 || r.side_um % r.grid_rows != 0 ||
      r.side_um / r.grid_rows != r.side_um / r.grid_cols || r.side_um % r.grid_cols != 0) {
    throw Error(ErrorCode::InvalidArgument, "region side " + std::to_string(r.side_um) +
                                                " is not an exact grid of " + std::to_string(r.grid_rows) +
                                                "x" + std::to_string(r.grid_cols) + " patches");
  }
  if (r.patch_um() != r.patch_px) {
    throw Error(ErrorCode::InvalidArgument, "patch side " + std::to_string(r.patch_um()) +
                                                " um does not match " + std::to_string(r.patch_px) +
                                                " px at 1 um/px");
  }
}

std::size_t PatchGrid::real_count() const {
  return static_cast<std::size_t>(std::count_if(slots.begin(), slots.end(), [](const PatchSlot& s) { return !s.padding; }));
}

PatchGrid extract_patches(const Image& plane, const RegionSpec& region, int jobs) {
  validate_region(region);
  const long w = static_cast<long>(plane.width), h = static_cast<long>(plane.height);
  const long side = static_cast<long>(region.side_um);
  if (region.origin_x >= w || region.origin_y >= h || region.origin_x + side <= 0 ||
      region.origin_y + side <= 0) {
    throw Error(ErrorCode::OutsideSlide, "region " + region.id() + " lies entirely outside the " +
                                             std::to_string(w) + "x" + std::to_string(h) + " plane");
  }
  PatchGrid grid;
  grid.region = region;
  grid.slots.resize(region.slots());
  const long p = static_cast<long>(region.patch_px);
  parallel_for(grid.slots.size(), jobs, [&](std::size_t i) {
    PatchSlot& s = grid.slots[i];
    s.row = i / region.grid_cols;
    s.col = i % region.grid_cols;
    const long x = region.origin_x + static_cast<long>(s.col) * p;
    const long y = region.origin_y + static_cast<long>(s.row) * p;
    s.padding = x < 0 || y < 0 || x + p > w || y + p > h;
    if (!s.padding) {
      s.pixels = plane.crop(static_cast<std::size_t>(x), static_cast<std::size_t>(y), region.patch_px, region.patch_px);
    }
  });
  return grid;
}

std::vector<RegionSpec> candidate_regions(const TissueMask& mask, const RegionSpec& geometry) {
  validate_region(geometry);
  const std::size_t side = geometry.side_um;
  const std::size_t nx = (mask.plane_width + side - 1) / side;
  const std::size_t ny = (mask.plane_height + side - 1) / side;
  std::vector<RegionSpec> out;
  out.reserve(nx * ny);
  for (std::size_t j = 0; j < ny; ++j) {
    for (std::size_t i = 0; i < nx; ++i) {
      RegionSpec r = geometry;
      r.origin_x = static_cast<long>(i * side);
      r.origin_y = static_cast<long>(j * side);
      r.tissue_fraction = mask.window_fraction(r.origin_x, r.origin_y, side, side);
      out.push_back(r);
    }
  }
  return out;
}

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Rng& rng) {
  if (n == 0) throw Error(ErrorCode::InvalidArgument, "sample_indices: nothing to sample from");
  std::vector<std::size_t> out;
  out.reserve(k);
  if (n >= k) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
      std::swap(idx[i], idx[j]);
      out.push_back(idx[i]);
    }
  } else {
    for (std::size_t i = 0; i < k; ++i) out.push_back(static_cast<std::size_t>(rng.below(n)));
  }
  return out;
}

RegionSample sample_regions(const TissueMask& mask, std::size_t k, double min_tissue, std::uint64_t seed,
                            const RegionSpec& geometry) {
  RegionSample result;
  std::vector<RegionSpec> eligible;
  for (const RegionSpec& r : candidate_regions(mask, geometry)) {
    if (r.tissue_fraction >= min_tissue) eligible.push_back(r);
  }
  result.candidate_count = eligible.size();
  if (eligible.empty()) {
    throw Error(ErrorCode::NoTissue, "no region reaches tissue fraction " + std::to_string(min_tissue));
  }
  Rng rng(seed);
  result.with_replacement = eligible.size() < k;
  if (result.with_replacement) {
    result.warnings.push_back("only " + std::to_string(eligible.size()) + " candidate regions for k=" +
                              std::to_string(k) + "; sampling with replacement");
  }
  for (std::size_t i : sample_indices(eligible.size(), k, rng)) result.regions.push_back(eligible[i]);
  return result;
}

AnnotationPatches extract_annotation_patches(const std::string& slide_id, double level0_mpp,
                                             std::size_t level0_width, std::size_t level0_height,
                                             const Image& plane, const std::vector<AnnotationBox>& boxes) {
  if (!(level0_mpp > 0.0)) throw Error(ErrorCode::InvalidMpp, "level-0 mpp must be positive");
  AnnotationPatches out;
  const long p = static_cast<long>(kPatchPx);
  for (const AnnotationBox& b : boxes) {
    if (b.slide_id != slide_id) continue;
    if (b.w <= 0 || b.h <= 0 || b.x < 0 || b.y < 0 || b.x + b.w > static_cast<long>(level0_width) ||
        b.y + b.h > static_cast<long>(level0_height)) {
      out.warnings.push_back("box (" + std::to_string(b.x) + "," + std::to_string(b.y) + "," +
                             std::to_string(b.w) + "," + std::to_string(b.h) + ") on " + slide_id +
                             " is outside the slide; skipped");
      continue;
    }
    const long x0 = std::lround(static_cast<double>(b.x) * level0_mpp);
    const long y0 = std::lround(static_cast<double>(b.y) * level0_mpp);
    const long w = std::lround(static_cast<double>(b.w) * level0_mpp);
    const long h = std::lround(static_cast<double>(b.h) * level0_mpp);
    for (long ty = 0; (ty + 1) * p <= h; ++ty) {
      for (long tx = 0; (tx + 1) * p <= w; ++tx) {
        const long x = x0 + tx * p, y = y0 + ty * p;
        if (x + p > static_cast<long>(plane.width) || y + p > static_cast<long>(plane.height)) continue;
        LabeledPatch lp;
        lp.slide_id = slide_id;
        lp.subtype = b.label;
        lp.grade = grade_of(b.label);
        lp.x = x;
        lp.y = y;
        lp.pixels = plane.crop(static_cast<std::size_t>(x), static_cast<std::size_t>(y), kPatchPx, kPatchPx);
        out.patches.push_back(std::move(lp));
      }
    }
  }
  return out;
}

}  // namespace endonet::wsi
