#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace hier {

/// Counter-based generator: output k of a stream is
///   mix64(key + (k + 1) * 0x9E3779B97F4A7C15)
/// where mix64 is the SplitMix64 finaliser and key is derived from
/// (seed, stream name, optional sub-keys). Every sample is a pure function
/// of (seed, stream, sub-keys, counter), so sequences replay identically on
/// any platform and streams never share state.
///
/// Distribution transforms are implemented here (not via <random>
/// distributions) because libstdc++/libc++ disagree on their algorithms.
class Rng {
 public:
  Rng(std::uint64_t seed, std::string_view stream);

  /// Child stream keyed additionally by `keys`, e.g. (center, hop, epoch).
  Rng derive(std::initializer_list<std::uint64_t> keys) const;

  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1).
  double uniform();
  /// Standard normal via Box-Muller (one value per call, cosine branch).
  double normal();
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  explicit Rng(std::uint64_t key) : key_(key) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);
/// FNV-1a 64-bit; used for stream names and config hashes.
std::uint64_t fnv1a64(std::string_view text);

}  // namespace hier
