#pragma once

#include <cstdint>
#include <limits>
#include <string_view>

namespace flowdpt {

// Counter-based generator: the n-th draw of a stream is a pure function of
// (key, n). Child streams are derived by hashing a name or index into the
// parent key, so independent consumers never share state.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0);

  Rng stream(std::string_view name) const;
  Rng stream(std::uint64_t index) const;
  Rng stream(std::string_view name, std::uint64_t index) const {
    return stream(name).stream(index);
  }

  std::uint64_t next_u64();
  // Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  // Uniform on {0, ..., n-1}; n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() {
    return std::numeric_limits<result_type>::max();
  }
  result_type operator()() { return next_u64(); }

 private:
  Rng(std::uint64_t key, std::uint64_t counter) : key_(key), counter_(counter) {}

  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace flowdpt
