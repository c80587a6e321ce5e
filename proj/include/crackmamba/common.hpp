#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace crackmamba {

using Index = std::int64_t;
using Shape = std::vector<Index>;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when an activation or state goes non-finite. Carries enough
/// context (layer name and/or scan step) to locate the fault.
class NumericFault : public std::runtime_error {
 public:
  NumericFault(std::string where, Index step = -1)
      : std::runtime_error(step >= 0
                               ? "non-finite value in " + where + " at step " + std::to_string(step)
                               : "non-finite value in " + where),
        where_(std::move(where)),
        step_(step) {}

  const std::string& where() const { return where_; }
  Index step() const { return step_; }

 private:
  std::string where_;
  Index step_;
};

inline void check_arg(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG.
//
// SplitMix64 (Steele, Lea, Vigna; public-domain constants). Chosen over
// std::mt19937 + std::uniform_* because the standard distributions are
// implementation-defined; this generator gives bit-identical streams on
// every platform and is part of the reproducibility contract wherever a
// seed appears in a public interface.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Folds a list of 64-bit words into one seed, order-sensitive.
inline std::uint64_t seed_mix(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x9e3779b97f4a7c15ULL;
  for (std::uint64_t p : parts) h = splitmix64_mix(h + 0x9e3779b97f4a7c15ULL + p);
  return h;
}

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return splitmix64_mix(state_);
  }

  /// Uniform in [0,1) with 53 random mantissa bits.
  double next_double() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Unbiased draw in [0,n) via modulo rejection.
  std::uint64_t bounded(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("bounded: n must be positive");
    const std::uint64_t threshold = (-n) % n;
    for (;;) {
      const std::uint64_t x = next();
      if (x >= threshold) return x % n;
    }
  }

  /// In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(bounded(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace crackmamba
