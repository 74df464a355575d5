#pragma once

#include <cstdint>
#include <random>

namespace camelu {

// Seed derivation. Every random stream in the library is a child of one
// root u64 seed:
//
//   mix(x)              = splitmix64 finalizer of x
//   derive(seed, tag)   = mix(seed ^ mix(tag + 0x9E3779B97F4A7C15))
//   derive(seed, a, b)  = derive(derive(seed, a), b)
//
// Tags are small integers or string hashes (see stream_tag).
std::uint64_t splitmix64(std::uint64_t x) noexcept;
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) noexcept;
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t index) noexcept;

// FNV-1a hash used to turn readable stream names into tags.
constexpr std::uint64_t stream_tag(const char* name) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char* p = name; *p != '\0'; ++p) {
    h ^= static_cast<unsigned char>(*p);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Deterministic generator. The engine is std::mt19937_64 (bit-specified by
// the standard); the distribution transforms are written out here because
// the <random> distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  std::uint64_t next_u64() { return engine_(); }
  // [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform over [0, n); n > 0. Rejection sampling, no modulo bias.
  std::uint64_t uniform_int(std::uint64_t n);
  double normal();
  // Marsaglia-Tsang; shape > 0.
  double gamma(double shape);
  double beta(double alpha, double beta);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace camelu
