#pragma once

// Thread helpers with deterministic structure: work is split into a fixed
// number of chunks independent of the machine's thread count, and partial
// results are combined in chunk order. Callers must keep per-index writes
// disjoint.

#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace voxseg {

inline int worker_count() {
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : int(hc);
}

namespace detail {
constexpr size_t kChunkCount = 16;

inline std::vector<std::pair<size_t, size_t>> make_chunks(size_t n) {
  std::vector<std::pair<size_t, size_t>> chunks;
  size_t count = n < kChunkCount ? (n == 0 ? 0 : n) : kChunkCount;
  for (size_t c = 0; c < count; ++c) {
    size_t b = n * c / count;
    size_t e = n * (c + 1) / count;
    if (b < e) chunks.emplace_back(b, e);
  }
  return chunks;
}
}  // namespace detail

/// Runs fn(begin, end) over [0, n) partitioned into fixed chunks.
inline void parallel_for(size_t n, const std::function<void(size_t, size_t)>& fn) {
  auto chunks = detail::make_chunks(n);
  if (chunks.empty()) return;
  int workers = std::min<int>(worker_count(), int(chunks.size()));
  if (workers <= 1) {
    for (auto& [b, e] : chunks) fn(b, e);
    return;
  }
  std::atomic<size_t> next{0};
  auto pump = [&] {
    for (;;) {
      size_t c = next.fetch_add(1);
      if (c >= chunks.size()) return;
      fn(chunks[c].first, chunks[c].second);
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(pump);
  pump();
  for (auto& t : pool) t.join();
}

/// Map chunks to partial values, then fold them left-to-right in chunk
/// order; the result does not depend on thread scheduling.
template <class T, class ChunkFn, class CombineFn>
T parallel_map_reduce(size_t n, T init, ChunkFn chunk_fn, CombineFn combine) {
  auto chunks = detail::make_chunks(n);
  std::vector<T> partial(chunks.size());
  parallel_for(chunks.size(), [&](size_t b, size_t e) {
    for (size_t c = b; c < e; ++c)
      partial[c] = chunk_fn(chunks[c].first, chunks[c].second);
  });
  T acc = init;
  for (auto& p : partial) acc = combine(acc, p);
  return acc;
}

}  // namespace voxseg
