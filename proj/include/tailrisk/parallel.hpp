#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace tailrisk {

/// Worker count resolution: explicit request > TAILRISK_THREADS > hardware.
inline unsigned resolve_threads(unsigned requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("TAILRISK_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<unsigned>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? hw : 1;
}

/// Runs body(i) for i in [0, count) on a bounded pool. Tasks own disjoint
/// output slots indexed by i, so results never depend on scheduling; callers
/// reduce the slots in index order. The first exception thrown by any task is
/// rethrown on the calling thread after the pool drains.
template <class Body>
void parallel_for(std::size_t count, unsigned threads, Body&& body) {
  threads = resolve_threads(threads);
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  const unsigned workers = static_cast<unsigned>(
      std::min<std::size_t>(threads, count));
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      while (true) {
        const std::size_t i = next.fetch_add(1, std::memory_order_relaxed);
        if (i >= count) return;
        try {
          body(i);
        } catch (...) {
          const std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

/// Stable stage tags for substream derivation (seed, stage, grid, rep).
namespace stage {
inline constexpr std::uint64_t kSample = 1;
inline constexpr std::uint64_t kContaminate = 2;
inline constexpr std::uint64_t kBlocks = 3;
inline constexpr std::uint64_t kBk = 4;
inline constexpr std::uint64_t kThresholdDev = 5;
inline constexpr std::uint64_t kFlip = 6;
inline constexpr std::uint64_t kDepSweep = 7;
inline constexpr std::uint64_t kErm = 8;
inline constexpr std::uint64_t kRateSweep = 9;
inline constexpr std::uint64_t kContamSweep = 10;
inline constexpr std::uint64_t kIidBaseline = 11;
}  // namespace stage

}  // namespace tailrisk
