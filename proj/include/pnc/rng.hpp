#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace pnc {

/// Seed of a named sub-stream, so every stage (data, init, masks, training)
/// is reproducible on its own from one root seed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream);

/// Deterministic generator. Draws are defined here rather than through the
/// standard distributions so sequences are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t root, std::string_view stream) : engine_(derive_seed(root, stream)) {}

  std::uint64_t next() { return engine_(); }
  double uniform();                        // [0, 1)
  double uniform(double lo, double hi);
  double normal();                         // standard normal, Box-Muller
  std::size_t below(std::size_t n);        // [0, n)
  bool coin() { return (next() >> 63) != 0; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace pnc
