#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>

namespace latdyn {

// splitmix64 finalizer; also used as the mixing function for stream derivation.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_str(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Counter-based stream: a stream is fully determined by its base value, and
// child streams are derived by hashing (base, tag). Dataset generation and
// training derive one stream per task/purpose so results do not depend on
// the order of evaluation or the thread count.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : base_(mix64(seed ^ 0x5851f42d4c957f2dull)) {}

  RngStream derive(std::uint64_t tag) const {
    RngStream s(0);
    s.base_ = mix64(base_ ^ mix64(tag ^ 0xd6e8feb86659fd93ull));
    s.count_ = 0;
    return s;
  }
  RngStream derive(std::string_view tag) const { return derive(hash_str(tag)); }

  std::uint64_t next_u64() { return mix64(base_ + ++count_); }

  // in [0, 1)
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_double(), u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // in [0, n)
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t base_ = 0;
  std::uint64_t count_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace latdyn
