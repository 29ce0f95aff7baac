#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "endonet/wsi/manifest.hpp"

namespace endonet::wsi {

struct SplitFractions {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct SplitResult {
  Manifest manifest;  // same order as the input, every split assigned
  std::size_t attempts = 0;
  bool composition_ok = false;
  std::vector<std::string> warnings;
};

/// Patient counts per split by largest-remainder rounding (ties go to the
/// earlier split).
std::array<std::size_t, 3> largest_remainder(std::size_t patients, const SplitFractions& fractions);

/// Patient-grouped split. Patients that already carry a split keep it
/// (ConflictingSplit when their slides disagree); the rest are shuffled and
/// allocated to train/val/test. Each non-empty split's High fraction must be
/// within +-0.10 of the overall fraction; up to 100 shuffles are tried, after
/// which the best attempt is kept with a warning.
SplitResult split_dataset(const Manifest& manifest, const SplitFractions& fractions, std::uint64_t seed);

}  // namespace endonet::wsi
