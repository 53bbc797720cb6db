#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

namespace adnac {

using Rng = std::mt19937_64;

// splitmix64 finalizer
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Platform-independent hash used to derive per-item seeds. Unlike std::hash
// the result is stable across runs, compilers and traversal order.
class StableHash {
 public:
  explicit StableHash(std::uint64_t seed = 0) : state_(mix64(seed ^ 0xCBF29CE484222325ull)) {}

  StableHash& add(std::uint64_t v) {
    state_ = mix64(state_ ^ mix64(v + 0x632BE59BD9B4E019ull));
    return *this;
  }

  StableHash& add(std::string_view s) {
    // FNV-1a over the bytes, then folded in like any other word
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001B3ull;
    }
    return add(h).add(static_cast<std::uint64_t>(s.size()));
  }

  std::uint64_t value() const { return state_; }

 private:
  std::uint64_t state_;
};

template <typename... Parts>
std::uint64_t stable_hash(std::uint64_t seed, const Parts&... parts) {
  StableHash h(seed);
  (h.add(parts), ...);
  return h.value();
}

inline Rng make_rng(std::uint64_t seed) { return Rng(mix64(seed)); }

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi_inclusive) {
  return std::uniform_int_distribution<int>(lo, hi_inclusive)(rng);
}

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline Rng rng_from_state(const std::string& s) {
  Rng rng;
  std::istringstream is(s);
  is >> rng;
  return rng;
}

}  // namespace adnac
