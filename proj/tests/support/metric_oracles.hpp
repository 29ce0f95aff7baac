#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "endonet/common/rng.hpp"
#include "endonet/metrics/metrics.hpp"

// Independent reference implementations for the metric suite. Shared by the
// unit tests and the acceptance binary.
namespace endonet::testing {

using metrics::Grade;
using metrics::ScoredSlide;
using metrics::Subtype;

inline ScoredSlide slide(double p, Grade g, Subtype st = Subtype::EndometrioidG1) {
  return {"s", st, g, p};
}

inline std::vector<ScoredSlide> from_confusion(std::size_t tp, std::size_t fn, std::size_t fp, std::size_t tn) {
  std::vector<ScoredSlide> v;
  for (std::size_t i = 0; i < tp; ++i) v.push_back(slide(0.9, Grade::High));
  for (std::size_t i = 0; i < fn; ++i) v.push_back(slide(0.1, Grade::High));
  for (std::size_t i = 0; i < fp; ++i) v.push_back(slide(0.8, Grade::Low));
  for (std::size_t i = 0; i < tn; ++i) v.push_back(slide(0.2, Grade::Low));
  return v;
}

// Independent all-pairs count.
inline double brute_auc(const std::vector<ScoredSlide>& v) {
  double wins = 0, pairs = 0;
  for (const auto& a : v) {
    if (a.true_grade != Grade::High) continue;
    for (const auto& b : v) {
      if (b.true_grade != Grade::Low) continue;
      pairs += 1;
      wins += a.prob_high > b.prob_high ? 1.0 : (a.prob_high == b.prob_high ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

// Independent SplitMix64 stream, written from the documented definition.
struct OracleStream {
  std::uint64_t state;
  static std::uint64_t finalize(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  std::uint64_t next() {
    state += 0x9E3779B97F4A7C15ULL;
    return finalize(state);
  }
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64); }
};

inline std::uint64_t oracle_key(std::uint64_t seed, std::uint64_t tag) {
  return OracleStream::finalize(OracleStream::finalize(seed + 0x9E3779B97F4A7C15ULL) + tag + 0x9E3779B97F4A7C15ULL);
}

inline double oracle_f1(const std::vector<ScoredSlide>& v) {
  double tp = 0, fn = 0, fp = 0, tn = 0;
  for (const auto& s : v) {
    const bool pred = s.prob_high >= 0.5, truth = s.true_grade == Grade::High;
    if (truth && pred) tp++;
    else if (truth) fn++;
    else if (pred) fp++;
    else tn++;
  }
  const double f_hi = (2 * tp + fp + fn) > 0 ? 2 * tp / (2 * tp + fp + fn) : 0;
  const double f_lo = (2 * tn + fp + fn) > 0 ? 2 * tn / (2 * tn + fp + fn) : 0;
  return ((tp + fn) * f_hi + (tn + fp) * f_lo) / static_cast<double>(v.size());
}

inline double oracle_percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1) * q;
  const double lo = std::floor(h);
  const auto i = static_cast<std::size_t>(lo);
  return v[i] + (h - lo) * (v[std::min(i + 1, v.size() - 1)] - v[i]);
}

inline std::vector<ScoredSlide> random_scored(Rng& rng, std::size_t n, int levels) {
  std::vector<ScoredSlide> v;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = static_cast<double>(rng.below(static_cast<std::uint64_t>(levels))) / (levels - 1);
    v.push_back(slide(p, rng.below(2) ? Grade::High : Grade::Low, wsi::kAllSubtypes[rng.below(5)]));
  }
  if (std::none_of(v.begin(), v.end(), [](auto& s) { return s.true_grade == Grade::High; })) v[0].true_grade = Grade::High;
  if (std::none_of(v.begin(), v.end(), [](auto& s) { return s.true_grade == Grade::Low; })) v[1].true_grade = Grade::Low;
  return v;
}

}  // namespace endonet::testing
