#pragma once

// Counter-based random streams.
//
// A stream is identified by a 64-bit key; draw k of the stream is a pure
// function of (key, k), so replications can be generated in any order or on
// any worker and still produce bit-identical values. Substreams are derived
// from (master_seed, index) by hashing, never by sequential skipping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

namespace robust_ate {

/// SplitMix64 finalizer (Stafford variant 13).
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit constexpr CounterRng(std::uint64_t key, std::uint64_t counter = 0) noexcept
      : key_(mix64(key ^ 0x6a09e667f3bcc909ULL)), counter_(counter) {}

  /// Independent stream for replication `index` under `master_seed`.
  static constexpr CounterRng substream(std::uint64_t master_seed, std::uint64_t index) noexcept {
    return CounterRng(mix64(master_seed) ^ mix64(index + 0x9e3779b97f4a7c15ULL));
  }

  /// Child stream keyed by a purpose tag (e.g. "noise" vs "contamination").
  constexpr CounterRng split(std::uint64_t tag) const noexcept {
    return CounterRng(key_ ^ mix64(tag * 0xd1b54a32d192ed03ULL + 1));
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept {
    const std::uint64_t c = counter_++;
    return mix64(mix64(key_ ^ (c * 0x9e3779b97f4a7c15ULL)) + c);
  }

  std::uint64_t counter() const noexcept { return counter_; }

  /// Uniform on the open interval (0, 1), 53-bit resolution.
  double uniform() noexcept {
    return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal via Box–Muller; consumes exactly two uniforms.
  double normal() noexcept {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, bound) by rejection (bound > 0).
  std::uint64_t below(std::uint64_t bound) noexcept {
    const std::uint64_t limit = max() - max() % bound;
    std::uint64_t x;
    do {
      x = (*this)();
    } while (x >= limit);
    return x % bound;
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

/// `k` distinct indices from [0, n), uniformly without replacement, in
/// increasing order (partial Fisher–Yates, then sorted).
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k,
                                                           CounterRng& rng) {
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < k && i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(std::min(k, n));
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace robust_ate
