#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace fprb {

// Counter-based random streams. A stream is keyed by (seed, purpose tag, index)
// so that resample b of bootstrap run s draws the same numbers no matter which
// worker executes it or in which order.
class Stream {
 public:
  using result_type = std::uint64_t;

  Stream(std::uint64_t seed, std::string_view tag, std::uint64_t index);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()();

  // Unbiased integer in [0, bound). Portable across standard libraries,
  // unlike std::uniform_int_distribution.
  std::uint64_t below(std::uint64_t bound);

  // Uniform double in [0, 1) with 53 random bits.
  double uniform();

  // Standard normal via Box-Muller (used by fixture generators and tests).
  double normal();

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t hash_tag(std::string_view tag);

// In-place Fisher-Yates shuffle using a stream.
template <typename T>
void shuffle(std::vector<T>& values, Stream& stream) {
  for (std::size_t i = values.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(stream.below(i));
    std::swap(values[i - 1], values[j]);
  }
}

}  // namespace fprb
