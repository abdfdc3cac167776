#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace misguide {

/// Counter-based random stream: every draw is a pure function of
/// (master_seed, stream_id, counter), so results are identical across runs and
/// platforms and independent streams need no shared state.
class RngStream {
 public:
  RngStream(std::uint64_t master_seed, std::uint64_t stream_id) noexcept;

  std::uint64_t master_seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept;
  // [0, 1) with 53 random bits.
  double uniform01() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform01(); }
  // Box-Muller; consumes two counter values per call.
  double gaussian() noexcept;
  // Uniform over {0..n-1}; n must be >= 1.
  std::size_t choice(std::size_t n);

  // Child stream derived from this stream's key; does not advance the counter.
  RngStream derive(std::uint64_t sub_id) const noexcept;

  // Fisher-Yates, portable (std::shuffle's algorithm is implementation-defined).
  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = choice(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x) noexcept;

// FNV-1a over raw bytes.
std::uint64_t hash_bytes(std::span<const unsigned char> bytes) noexcept;
// Hash of the canonical little-endian IEEE-754 encoding of a real vector.
std::uint64_t hash_reals(std::span<const double> values) noexcept;

}  // namespace misguide
