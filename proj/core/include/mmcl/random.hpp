#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace mmcl {

/// Labeled deterministic random stream. The same (seed, label) pair always
/// yields the same draw sequence, independent of platform stdlib details:
/// uniforms come straight off mt19937_64 and normals use Box-Muller with an
/// explicit spare, so no library-internal distribution state is involved.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view label);

  std::uint64_t seed() const { return seed_; }
  const std::string& label() const { return label_; }

  /// Derive an independent stream for a sub-component, e.g. child("gate/3").
  RngStream child(std::string_view sublabel) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  /// Standard normal.
  double normal();
  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<int>(i - 1)));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::vector<float> normals(std::size_t n, float stddev = 1.0f);

 private:
  std::uint64_t seed_;
  std::string label_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mmcl
