#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace rhmlab {

/// Mixes a master seed with a stream id (splitmix64 finalizer). Distinct
/// stream ids yield statistically independent engine seeds.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

/// Thin wrapper over mt19937_64. The engine output is fixed by the standard;
/// the helpers below are written out so that draws are bit-identical across
/// standard library implementations (std::*_distribution is not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  static Rng stream(std::uint64_t master, std::uint64_t id) {
    return Rng(derive_seed(master, id));
  }

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection keeps it unbiased.
  std::size_t below(std::size_t n);

  bool coin() { return (engine_() >> 63) != 0; }

  /// Standard normal (Box-Muller, one value per call).
  double normal();

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n);

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
};

}  // namespace rhmlab
