#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

namespace convreg {

// Reductions below split [0, n) into fixed-size blocks, reduce each block on
// whatever thread picks it up, then combine the block partials in index
// order. The result is bit-identical for any OpenMP thread count.

inline constexpr std::size_t kReduceBlock = 4096;

template <class Fn>
double deterministic_sum(std::size_t n, Fn&& fn, std::size_t block = kReduceBlock) {
  const std::size_t nblocks = (n + block - 1) / block;
  std::vector<double> partial(nblocks, 0.0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(nblocks); ++b) {
    const std::size_t lo = static_cast<std::size_t>(b) * block;
    const std::size_t hi = std::min(n, lo + block);
    double acc = 0.0;
    for (std::size_t i = lo; i < hi; ++i) acc += fn(i);
    partial[static_cast<std::size_t>(b)] = acc;
  }
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

/// `fn(i, acc)` adds item i's contribution into the block accumulator `acc`
/// (length out.size()); the block accumulators are then summed in order.
template <class Fn>
void deterministic_accumulate(std::size_t n, std::span<double> out, Fn&& fn,
                              std::size_t block = kReduceBlock) {
  const std::size_t width = out.size();
  const std::size_t nblocks = (n + block - 1) / block;
  std::vector<double> partial(nblocks * width, 0.0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(nblocks); ++b) {
    const std::size_t lo = static_cast<std::size_t>(b) * block;
    const std::size_t hi = std::min(n, lo + block);
    std::span<double> acc(partial.data() + static_cast<std::size_t>(b) * width, width);
    for (std::size_t i = lo; i < hi; ++i) fn(i, acc);
  }
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t b = 0; b < nblocks; ++b)
    for (std::size_t k = 0; k < width; ++k) out[k] += partial[b * width + k];
}

}  // namespace convreg
