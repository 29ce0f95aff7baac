#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <utility>

namespace endonet {

inline constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ULL;

/// SplitMix64 output function applied to (z + golden gamma).
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += kGoldenGamma;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Key of substream `tag` under `seed`: mix64(mix64(seed) + tag).
constexpr std::uint64_t derive_key(std::uint64_t seed, std::uint64_t tag) noexcept {
  return mix64(mix64(seed) + tag);
}

constexpr std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Counter-based SplitMix64 stream.
///
/// The n-th output (n = 1, 2, ...) of a stream with key K is
/// mix64(K + (n - 1) * gamma), i.e. the state advances by gamma after each
/// draw and the output is the SplitMix64 finalizer of the pre-advance state
/// plus gamma. Derived draws:
///   below(n)  = floor(next() * n / 2^64)            (128-bit multiply-shift)
///   uniform() = (next() >> 11) * 2^-53              in [0, 1)
///   normal()  = Box-Muller on two uniforms, cosine branch, no caching
/// These definitions are stable so external tools can replay a stream.
class Rng {
 public:
  explicit constexpr Rng(std::uint64_t key = 0) noexcept : state_(key) {}

  static constexpr Rng derive(std::uint64_t seed, std::uint64_t tag) noexcept {
    return Rng(derive_key(seed, tag));
  }

  constexpr std::uint64_t next() noexcept {
    const std::uint64_t out = mix64(state_);
    state_ += kGoldenGamma;
    return out;
  }

  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  double normal() noexcept {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  constexpr std::uint64_t state() const noexcept { return state_; }
  constexpr void set_state(std::uint64_t s) noexcept { state_ = s; }

 private:
  std::uint64_t state_;
};

}  // namespace endonet
