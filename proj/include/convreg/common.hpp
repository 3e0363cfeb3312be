#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace convreg {

/// Voxel counts along x, y, z.
struct Dims3 {
  int x = 0;
  int y = 0;
  int z = 0;

  [[nodiscard]] std::size_t count() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
  [[nodiscard]] int operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  [[nodiscard]] int min() const { return std::min(x, std::min(y, z)); }
  [[nodiscard]] int max() const { return std::max(x, std::max(y, z)); }
  friend bool operator==(const Dims3&, const Dims3&) = default;
};

inline Dims3 cube(int n) { return {n, n, n}; }

/// Thrown for malformed inputs, files and configurations (CLI exit status 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Deterministically derives an independent stream seed from a root seed and a stream tag.
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream);
std::uint64_t derive_seed(std::uint64_t root, const std::string& tag);

/// Sets the OpenMP thread count; n <= 0 means all available.
void set_thread_count(int n);
int thread_count();

}  // namespace convreg
