#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "endonet/wsi/image.hpp"

// Slide container: a directory holding slide.json
//   {slide_id, mpp, width, height, levels: [{mpp, file}]}
// and one 8-bit RGB PNG per level, finest first.
namespace endonet::wsi {

struct SlideLevel {
  double mpp = 0.0;
  std::string file;
  std::size_t width = 0;
  std::size_t height = 0;
};

struct Slide {
  std::filesystem::path dir;
  std::string slide_id;
  double mpp = 0.0;  // level 0
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<SlideLevel> levels;
};

/// Validates the container: mpp > 0 everywhere (InvalidMpp), level files
/// present (MissingLevel), level mpp non-decreasing and PNG dims within
/// +-1 px of width * mpp0 / mpp_k (DimensionMismatch).
Slide load_slide(const std::filesystem::path& dir);

/// Decodes one level's pixels.
Image read_level(const Slide& slide, std::size_t level);

/// Writes a container. planes[k] is stored as level_k.png at mpps[k].
void write_slide(const std::filesystem::path& dir, const std::string& slide_id,
                 const std::vector<Image>& planes, const std::vector<double>& mpps);

/// Plane at target_mpp. Uses the coarsest level not coarser than the target;
/// integral factors box-filter (mean, round half up), others are bilinear.
/// Output dims are round(level dims * level mpp / target).
Image downsample_to_target(const Slide& slide, double target_mpp = 1.0);

/// Source px per output px when resampling from `source_mpp` to `target_mpp`.
inline double downsample_factor(double source_mpp, double target_mpp) { return target_mpp / source_mpp; }

/// Resamples a plane by `factor` (source px per output px, >= 1).
Image downsample_plane(const Image& plane, double factor);

}  // namespace endonet::wsi
