#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "endonet/features/cnn.hpp"
#include "endonet/wsi/regions.hpp"

// Feature store file:
//   "ENDF" | u32 version=1 | u32 bundle count |
//   per bundle { u16 len + slide_id | u16 len + region id | u32 N | u32 D |
//                N x (u16 row, u16 col, u8 padding) | N*D f32 }
// little-endian throughout.
namespace endonet::features {

inline constexpr std::uint32_t kFeatureStoreVersion = 1;
inline constexpr std::size_t kMaxBundleRows = 400;

struct GridPos {
  std::uint16_t row = 0;
  std::uint16_t col = 0;
  bool operator==(const GridPos&) const = default;
  auto operator<=>(const GridPos&) const = default;
};

struct FeatureBundle {
  std::string slide_id;
  std::string region_id;
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<float> features;  // n x d row-major
  std::vector<GridPos> positions;
  std::vector<std::uint8_t> padding;

  const float* row(std::size_t i) const { return features.data() + i * d; }
  std::size_t real_count() const;
  /// Throws InvalidArgument on size mismatches, duplicate positions, more
  /// than 400 rows, or a non-zero padding row.
  void validate() const;
  bool operator==(const FeatureBundle&) const = default;
};

void write_feature_store(const std::filesystem::path& path, const std::vector<FeatureBundle>& bundles);
/// Throws Corrupt on bad magic/version or truncation.
std::vector<FeatureBundle> read_feature_store(const std::filesystem::path& path);

/// Eval-mode CNN features for every slot of a patch grid; padding slots
/// produce zero rows with the padding flag set. Batches may run on `jobs`
/// threads; each patch's row is independent of batch composition.
FeatureBundle extract_features(const ResNet& model, const wsi::PatchGrid& grid, const std::string& slide_id,
                               int jobs = 1, std::size_t batch_size = 25);

}  // namespace endonet::features
