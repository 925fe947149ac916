#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace tomoforge {

/// Worker cap used by the internally parallel kernels. Defaults to 1.
void set_num_threads(int n);
int num_threads();

/// Runs fn(i) for i in [begin, end) split into contiguous static chunks.
/// Each index is processed by exactly one worker, so kernels whose output
/// elements are owned by a single index are bitwise independent of the
/// thread count.
template <class Fn>
void parallel_for(std::size_t begin, std::size_t end, Fn&& fn) {
  const std::size_t n = end > begin ? end - begin : 0;
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(num_threads()), n);
  if (workers <= 1) {
    for (std::size_t i = begin; i < end; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t lo = begin + w * chunk;
    const std::size_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (std::size_t i = begin; i < std::min(end, begin + chunk); ++i) fn(i);
}

}  // namespace tomoforge
