#include "endonet/wsi/split.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>

#include "endonet/common/error.hpp"
#include "endonet/common/rng.hpp"

namespace endonet::wsi {

namespace {

constexpr std::array<Split, 3> kSplits = {Split::train, Split::val, Split::test};
constexpr int kMaxAttempts = 100;
constexpr double kCompositionTolerance = 0.10;

double composition_deviation(const Manifest& m) {
  std::size_t high = 0;
  for (const auto& e : m) high += e.grade == Grade::High;
  const double global = static_cast<double>(high) / static_cast<double>(m.size());
  std::map<Split, std::pair<std::size_t, std::size_t>> per;  // (high, total)
  for (const auto& e : m) {
    auto& p = per[*e.split];
    p.first += e.grade == Grade::High;
    p.second += 1;
  }
  double worst = 0.0;
  for (const auto& [split, p] : per) {
    worst = std::max(worst, std::abs(static_cast<double>(p.first) / static_cast<double>(p.second) - global));
  }
  return worst;
}

}  // namespace

std::array<std::size_t, 3> largest_remainder(std::size_t patients, const SplitFractions& f) {
  const std::array<double, 3> frac = {f.train, f.val, f.test};
  const double total = frac[0] + frac[1] + frac[2];
  if (!(total > 0.0) || frac[0] < 0.0 || frac[1] < 0.0 || frac[2] < 0.0) {
    throw Error(ErrorCode::InvalidArgument, "split fractions must be non-negative with a positive sum");
  }
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double q = static_cast<double>(patients) * frac[s] / total;
    counts[s] = static_cast<std::size_t>(std::floor(q + 1e-9));
    rem[s] = q - static_cast<double>(counts[s]);
    assigned += counts[s];
  }
  std::array<int, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b] + 1e-12; });
  for (std::size_t k = 0; assigned < patients; ++k, ++assigned) counts[order[k % 3]] += 1;
  return counts;
}

SplitResult split_dataset(const Manifest& manifest, const SplitFractions& fractions, std::uint64_t seed) {
  if (manifest.empty()) throw Error(ErrorCode::EmptyInput, "split_dataset: empty manifest");
  // patients in first-appearance order
  std::vector<std::string> patients;
  std::map<std::string, std::optional<Split>> prior;
  for (const auto& e : manifest) {
    if (e.patient_id.empty()) {
      throw Error(ErrorCode::MalformedInput, "slide " + e.slide_id + " has no patient_id");
    }
    auto [it, inserted] = prior.try_emplace(e.patient_id);
    if (inserted) patients.push_back(e.patient_id);
    if (e.split) {
      if (it->second && *it->second != *e.split) {
        throw Error(ErrorCode::ConflictingSplit, "patient " + e.patient_id + " is tagged both " +
                                                     std::string(split_name(*it->second)) + " and " +
                                                     std::string(split_name(*e.split)));
      }
      it->second = e.split;
    }
  }
  std::vector<std::string> open;
  for (const auto& p : patients) {
    if (!prior[p]) open.push_back(p);
  }
  const std::array<std::size_t, 3> counts = largest_remainder(open.size(), fractions);

  SplitResult best;
  double best_dev = 2.0;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    std::vector<std::string> order = open;
    Rng rng(derive_key(seed, static_cast<std::uint64_t>(attempt)));
    rng.shuffle(std::span<std::string>(order));
    std::map<std::string, Split> assign;
    std::size_t k = 0;
    for (int s = 0; s < 3; ++s) {
      for (std::size_t c = 0; c < counts[s]; ++c) assign[order[k++]] = kSplits[s];
    }
    SplitResult r;
    r.manifest = manifest;
    for (auto& e : r.manifest) {
      const auto& pr = prior[e.patient_id];
      e.split = pr ? *pr : assign.at(e.patient_id);
    }
    r.attempts = static_cast<std::size_t>(attempt) + 1;
    const double dev = composition_deviation(r.manifest);
    if (dev < best_dev) {
      best_dev = dev;
      best = std::move(r);
      best.attempts = static_cast<std::size_t>(attempt) + 1;
    }
    if (dev <= kCompositionTolerance + 1e-12) {
      best.composition_ok = true;
      return best;
    }
    if (open.empty()) break;
  }
  best.attempts = open.empty() ? 1 : kMaxAttempts;
  best.warnings.push_back("class composition deviates by " + std::to_string(best_dev) +
                          " from the overall High fraction after " + std::to_string(best.attempts) +
                          " attempts");
  return best;
}

}  // namespace endonet::wsi
