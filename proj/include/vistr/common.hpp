#pragma once

// Shared aliases, error types, seeded RNG and small helpers used across the
// library. Everything lives in namespace vistr.

#include <cstdint>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace vistr {

// Large tensor buffers are allocated and freed every step; keeping freed
// blocks inside the malloc arena instead of returning them to the kernel
// removes most of the mmap/munmap overhead of a training step.
inline void tune_allocator_for_training() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, -1);
#endif
}

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// Row-major strides.
inline Shape strides_of(const Shape& s) {
  Shape st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * s[i + 1];
  return st;
}

// Malformed files, schema violations, mismatched serialized data.
class format_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration values (bad key, constraint violation).
class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Global deterministic-mode flag. All kernels in this library are written to
// be deterministic regardless; the flag additionally pins RNG seeding policy
// at the CLI level (fixed seed vs. entropy).
inline bool& deterministic_mode() {
  static bool flag = true;
  return flag;
}

// splitmix64, used to derive independent stream seeds.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seeded generator with explicit uniform/normal draws so that sequences do
// not depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  // Inclusive bounds, rejection sampled so every value is equally likely.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw std::invalid_argument("uniform_int: hi < lo");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1ULL;
    if (span == 0) return static_cast<int64_t>(next_u64());  // full range
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return lo + static_cast<int64_t>(v % span);
  }

  // Box-Muller with a cached spare.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// The raster order shared by feature flattening and the positional encoding:
// sequence position of (t, h, w) in a flattened T*H*W axis.
inline int64_t sequence_index(int64_t t, int64_t h, int64_t w, int64_t H, int64_t W) {
  return (t * H + h) * W + w;
}

}  // namespace vistr
