#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

namespace fewshot {

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t mix64(std::uint64_t x);

/// SplitMix64 generator. Streams are derived from (seed, purpose, index) so a
/// given draw never depends on how many other streams were consumed before it.
/// Integer and uniform draws are bit-identical on every platform; normal()
/// additionally depends on libm log/cos.
class Rng {
 public:
  explicit Rng(std::uint64_t state) : state_(state) {}

  static Rng stream(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0);
  /// Independent child stream; does not advance this generator.
  Rng fork(std::uint64_t index) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  /// Fisher-Yates.
  template <typename V>
  void shuffle(std::vector<V>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

}  // namespace fewshot
