#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "endonet/wsi/image.hpp"
#include "endonet/wsi/manifest.hpp"

namespace endonet::wsi {

/// Texture knobs. Low grade: periodic gland rings (lumen, epithelial rim) on
/// eosin-pink stroma with sparse nuclei. High grade: dense irregular
/// hematoxylin-dark nuclei plus high-frequency noise.
struct SyntheticSlideSpec {
  std::string slide_id = "synth";
  std::string patient_id = "patient";
  double side_um = 8960.0;
  double mpp = 1.0;
  Grade grade = Grade::Low;
  std::optional<Subtype> subtype;  // drawn from the grade's subtypes when absent
  double gland_period_um = 0.0;    // 0 = grade default
  double nuclear_density = -1.0;   // fraction of nucleus cells occupied; <0 = grade default
  double noise_amplitude = -1.0;   // in [0, 1] of full scale; <0 = grade default
  double annotation_side_um = 1120.0;
  std::uint64_t seed = 0;
};

/// Resolves defaults (period, density, noise, subtype) deterministically.
SyntheticSlideSpec resolve_defaults(const SyntheticSlideSpec& spec);

/// Renders level 0 (side_um / mpp px square). Bit-exact for a fixed spec.
Image render_synthetic_plane(const SyntheticSlideSpec& spec, int jobs = 1);

struct SyntheticSlide {
  ManifestEntry entry;
  std::vector<AnnotationBox> annotations;  // level-0 px, one tumour box
};

/// Writes the container to `dir` (level 0, plus a 1 um/px level when mpp < 1)
/// and returns its manifest entry. Throws InvalidArgument when side_um < 4480.
SyntheticSlide generate_synthetic_slide(const SyntheticSlideSpec& spec, const std::filesystem::path& dir,
                                        int jobs = 1);

}  // namespace endonet::wsi
