#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace mvdiff {

/// Counter-based generator: draw n of stream (seed, stream) is a pure function
/// of (seed, stream, n). The mixing function is the SplitMix64 finalizer, so
/// the output is identical on every platform and compiler.
///
/// Standard-library distributions are avoided on purpose: their algorithms
/// are implementation-defined and would break cross-platform reproducibility.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) noexcept;

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform() noexcept;
  /// Uniform in (0, 1); never returns 0.
  double uniform_open() noexcept;
  /// Standard normal via Box–Muller; consumes exactly two draws.
  double normal() noexcept;
  /// Uniform integer in [0, n). Precondition n > 0.
  std::size_t uniform_index(std::size_t n) noexcept;
  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Independent generator for a named sub-stream. Does not advance *this.
  CounterRng fork(std::uint64_t stream) const noexcept;

  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(items[i - 1], items[j]);
    }
  }
  template <typename T>
  void shuffle(std::vector<T>& items) noexcept {
    shuffle(std::span<T>(items));
  }

  /// k distinct indices from [0, n), in draw order. Precondition k <= n.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x) noexcept;

}  // namespace mvdiff
