#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace forgetlab {

/// Deterministic generator: xoshiro256** seeded through SplitMix64.
///
/// The draw sequence depends only on the seed, never on the standard
/// library, so runs reproduce across platforms. Integer draws use
/// rejection sampling; normals use the Box-Muller transform (one draw per
/// call, no cached spare, so the full state is the four words below).
class Rng {
 public:
  static constexpr std::string_view algorithm_id = "xoshiro256starstar-splitmix64-v1";

  explicit Rng(std::uint64_t seed = 0);

  static Rng from_state(const std::array<std::uint64_t, 4>& state);

  std::uint64_t next_u64();

  /// Uniform on [0, 1) with 53 random bits.
  double uniform();

  /// Uniform on [lo, hi] inclusive. Throws EmptyRange when lo > hi.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  double normal();

  /// Independent child generator keyed by `stream`; does not advance this one.
  Rng fork(std::uint64_t stream) const;

  template <class T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(values[i - 1], values[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n);

  const std::array<std::uint64_t, 4>& state() const { return state_; }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::array<std::uint64_t, 4> state_{};
};

std::int64_t sample_uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi);

std::uint64_t splitmix64(std::uint64_t& x);

}  // namespace forgetlab
