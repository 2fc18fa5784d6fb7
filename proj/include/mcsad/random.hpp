#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace mcsad {

/// Seeded pseudo-random source. Every stochastic component owns one, so runs
/// replay bit-for-bit from their seeds.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Deterministic child seed from a parent seed and a list of stream tags.
  static std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t h = seed ^ 0x9E3779B97F4A7C15ull;
    for (std::uint64_t t : tags) {
      h ^= t + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
      h = splitmix(h);
    }
    return splitmix(h);
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

  /// Beta(a, b) through two gamma draws.
  double beta(double a, double b) {
    const double x = std::gamma_distribution<double>(a, 1.0)(engine_);
    const double y = std::gamma_distribution<double>(b, 1.0)(engine_);
    return x + y > 0.0 ? x / (x + y) : 0.5;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    // Fisher-Yates with our own index draws; std::shuffle's output is
    // implementation-defined.
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    shuffle(p);
    return p;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace mcsad
