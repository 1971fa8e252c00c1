#pragma once

// Deterministic random source. std:: distributions are not pinned across
// standard library implementations, so uniform / normal / shuffle are done
// by hand on top of mt19937_64 and reproduce bit-identically everywhere.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

#include "mam2/common.hpp"

namespace mam2 {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Folds a root seed and a stream of tags into one well-mixed seed, so every
// consumer (mask draw, shuffle, per-step noise) gets an independent stream
// addressable by (root, purpose, step, index) without shared state.
inline uint64_t derive_seed(uint64_t root, std::initializer_list<uint64_t> tags) {
  uint64_t h = splitmix64(root);
  for (uint64_t t : tags) h = splitmix64(h ^ t);
  return h;
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t raw() { return gen_(); }

  // [0,1) with 53 random bits
  double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // unbiased integer in [0,n)
  int64_t below(int64_t n) {
    if (n <= 0) throw UsageError("Rng::below: n must be positive");
    uint64_t un = uint64_t(n);
    uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t r;
    do {
      r = gen_();
    } while (r >= limit);
    return int64_t(r % un);
  }

  // Box-Muller, one cached value
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return mag * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Fisher-Yates
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = int64_t(v.size()) - 1; i > 0; --i) {
      int64_t j = below(i + 1);
      std::swap(v[size_t(i)], v[size_t(j)]);
    }
  }

  // k distinct values from [0,n), order of draw preserved
  std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k) {
    if (k < 0 || k > n) throw UsageError("sample_without_replacement: k out of range");
    auto pool = std::vector<int64_t>(size_t(n));
    for (int64_t i = 0; i < n; ++i) pool[size_t(i)] = i;
    std::vector<int64_t> out;
    out.reserve(size_t(k));
    for (int64_t i = 0; i < k; ++i) {
      int64_t j = i + below(n - i);
      std::swap(pool[size_t(i)], pool[size_t(j)]);
      out.push_back(pool[size_t(i)]);
    }
    return out;
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mam2
