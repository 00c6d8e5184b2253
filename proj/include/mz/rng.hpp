#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace mz {

/// Counter-based random stream. Output i is a pure function of (key, i), and
/// child streams derive fresh keys from a label or index, so any part of the
/// pipeline can be replayed independently of draw order elsewhere.
class RngStream {
 public:
  RngStream() : RngStream(0) {}
  explicit RngStream(std::uint64_t seed) : key_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

  RngStream child(std::uint64_t index) const {
    RngStream s;
    s.key_ = mix(key_ ^ mix(index + 0x632be59bd9b4e019ull));
    return s;
  }

  RngStream child(std::string_view label) const {
    std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (unsigned char c : label) h = (h ^ c) * 0x100000001b3ull;
    RngStream s;
    s.key_ = mix(key_ ^ mix(h));
    return s;
  }

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * 0x9e3779b97f4a7c15ull); }

  /// Uniform in [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n), unbiased. n must be > 0.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  bool bernoulli(double p) { return next_double() < p; }

  /// Standard normal via Box-Muller; consumes two draws per call.
  double normal() {
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  /// Normal(0, std) truncated to [-2*std, 2*std] by resampling.
  double trunc_normal(double stddev) {
    double x = normal();
    while (std::fabs(x) > 2.0) x = normal();
    return x * stddev;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// k distinct values from [0, n), ascending.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k && i + 1 < n; ++i) {
      std::size_t j = i + static_cast<std::size_t>(below(n - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k < n ? k : n);
    std::sort(idx.begin(), idx.end());
    return idx;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace mz
