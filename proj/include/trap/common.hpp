#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace trap {

struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// bad user-supplied configuration (unknown variant, rho out of range, ...)
struct config_error : error {
  using error::error;
};

// tensor shape mismatch
struct dim_error : error {
  using error::error;
};

// non-finite values where finite ones are required
struct numeric_error : error {
  using error::error;
};

// file / format problems
struct io_error : error {
  using error::error;
};

// eval before attack, missing checkpoint, ...
struct dependency_error : error {
  using error::error;
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// stable sub-stream seeds: mix a label into a base seed
inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
  return splitmix64(base ^ splitmix64(stream));
}

// FNV-1a, used for seed labels and the hashed token vocabulary
inline uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t derive_seed(uint64_t base, std::string_view stream) {
  return derive_seed(base, fnv1a(stream));
}

inline std::mt19937_64 make_rng(uint64_t seed) { return std::mt19937_64(seed); }

}  // namespace trap
