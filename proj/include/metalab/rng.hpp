#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

namespace metalab
{
/// Seeded random source with platform-independent derived distributions.
///
/// std::uniform_real_distribution and friends are implementation-defined, so
/// every draw here is computed from raw mt19937_64 output. Two Rng objects with
/// the same seed produce the same stream on every standard library.
class Rng
{
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform()
  {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [0, n). Rejection sampling, no modulo bias.
  std::size_t index(std::size_t n)
  {
    if (n == 0)
    {
      throw std::invalid_argument("Rng::index: empty range");
    }
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
    std::uint64_t draw = engine_();
    while (draw >= limit)
    {
      draw = engine_();
    }
    return static_cast<std::size_t>(draw % bound);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (the spare value is cached).
  double normal()
  {
    if (has_spare_)
    {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0)
    {
      u1 = uniform();
    }
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::span<T> values)
  {
    for (std::size_t i = values.size(); i > 1; --i)
    {
      std::swap(values[i - 1], values[index(i)]);
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& values)
  {
    shuffle(std::span<T>(values));
  }

  std::vector<std::size_t> permutation(std::size_t n)
  {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i)
    {
      perm[i] = i;
    }
    shuffle(perm);
    return perm;
  }

  /// k distinct indices from [0, n), in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n,
                                                      std::size_t k)
  {
    if (k > n)
    {
      throw std::invalid_argument(
          "Rng::sample_without_replacement: k exceeds population");
    }
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i)
    {
      perm[i] = i;
    }
    for (std::size_t i = 0; i < k; ++i)
    {
      std::swap(perm[i], perm[i + index(n - i)]);
    }
    perm.resize(k);
    return perm;
  }

  /// Derive an independent child seed; used to give sub-runs their own streams.
  std::uint64_t fork() { return splitmix(engine_()); }

  static std::uint64_t splitmix(std::uint64_t x)
  {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Combine a base seed with a stream tag into a new seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag)
{
  return Rng::splitmix(base ^ Rng::splitmix(tag + 0x632BE59BD9B4E019ULL));
}

}  // namespace metalab
