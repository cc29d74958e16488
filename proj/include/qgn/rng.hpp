#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace qgn {

/// Mixes a 64-bit value into a well-distributed 64-bit value (splitmix64 step).
/// Used to derive independent child seeds from (seed, stream-id) pairs so that
/// regenerating a single item never depends on draw order.
inline uint64_t mix_seed(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  return mix_seed(seed ^ mix_seed(stream));
}

/// Deterministic random source. All stochastic code in the project draws from
/// one of these; nothing touches global RNG state.
class RandomSource {
 public:
  explicit RandomSource(uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  /// Independent child stream. Derivation depends only on the seed this source
  /// was constructed with, never on how many draws were made since.
  RandomSource child(uint64_t stream) const {
    return RandomSource(derive_seed(seed_, stream));
  }

  uint64_t seed() const { return seed_; }

  double uniform() {  // [0,1)
    return std::ldexp(static_cast<double>(engine_() >> 11), -53);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; one value per pair of uniforms is kept so
  /// the stream stays a plain function of the engine state.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform integer in [lo, hi] inclusive.
  int64_t randint(int64_t lo, int64_t hi) {
    if (lo > hi) throw std::invalid_argument("randint: empty range");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    // Rejection sampling for an unbiased draw.
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return lo + static_cast<int64_t>(r % span);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(randint(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// k distinct values sampled from [0, n) in random order.
  std::vector<int> sample_without_replacement(int n, int k) {
    if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    // Partial Fisher-Yates: the first k slots are the sample.
    for (int i = 0; i < k; ++i) {
      int j = static_cast<int>(randint(i, n - 1));
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(k));
    return idx;
  }

  std::string state_string() const {
    std::ostringstream os;
    os << engine_ << "|" << seed_;
    return os.str();
  }

  void restore_state(const std::string& s) {
    auto bar = s.find_last_of('|');
    if (bar == std::string::npos) throw std::invalid_argument("bad rng state string");
    std::istringstream is(s.substr(0, bar));
    is >> engine_;
    if (!is) throw std::invalid_argument("bad rng state string");
    seed_ = std::stoull(s.substr(bar + 1));
  }

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace qgn
