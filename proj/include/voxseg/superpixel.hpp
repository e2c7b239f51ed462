#pragma once

// Entropy-rate superpixels on axial slices, region adjacency, and the
// optimal (DSC-maximizing) binary labeling of regions against a ground
// truth mask.
//
// The generator follows the greedy scheme of Liu et al.: edges of the
// 8-connected pixel graph carry similarity weights
// w_ij = exp(-(I_i - I_j)^2 / (2 sigma_I^2)); unselected incident weight
// stays on a vertex as a self loop, so the stationary distribution of the
// random walk is fixed and the entropy-rate gain of an edge is local to
// its two endpoints. Greedy selection keeps the edge set a forest and
// stops when the component count reaches N. Gains are diminishing, which
// makes the lazy-heap evaluation exact.
//
// Components of an 8-connected forest are not automatically 4-connected;
// a deterministic repair pass splits any offending region into its
// 4-connected parts and re-merges the smallest fragments into their most
// similar 4-neighbors until the count is N again, so the published
// contract (exactly N 4-connected regions) always holds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <queue>
#include <stdexcept>
#include <vector>

#include "voxseg/metrics.hpp"
#include "voxseg/parallel.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

namespace detail {

class UnionFind {
 public:
  explicit UnionFind(size_t n) : parent_(n), size_(n, 1) {
    for (size_t i = 0; i < n; ++i) parent_[i] = i;
  }
  size_t find(size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  size_t size_of(size_t root) const { return size_[root]; }
  // Returns the new root.
  size_t unite(size_t a, size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return a;
    if (size_[a] < size_[b]) std::swap(a, b);
    parent_[b] = a;
    size_[a] += size_[b];
    return a;
  }

 private:
  std::vector<size_t> parent_;
  std::vector<size_t> size_;
};

// -(a-w) ln((a-w)/t) - w ln(w/t) + a ln(a/t), the per-vertex entropy-rate
// change when weight w moves from the self loop (mass a) to a new edge.
// Vertex total t is constant. 0 ln 0 = 0.
inline double entropy_gain_term(double loop, double w, double total) {
  auto xlogx = [](double x) { return x > 0 ? x * std::log(x) : 0.0; };
  return total * (xlogx(loop / total) - xlogx((loop - w) / total) - xlogx(w / total));
}

}  // namespace detail

/// Greedy entropy-rate superpixels. Returns a label image with values in
/// [0, n_regions); every region is 4-connected. When selected_edges is
/// given it receives the accepted greedy edges (for forest audits).
inline Image2<uint32_t> entropy_rate_superpixels(
    const ImageF& img, int n_regions, double lambda, double sigma_i,
    std::vector<std::pair<int, int>>* selected_edges = nullptr) {
  const int w = img.width, h = img.height;
  const size_t pixels = size_t(w) * h;
  if (pixels == 0) throw std::invalid_argument("entropy_rate_superpixels: empty image");
  if (n_regions < 1)
    throw std::invalid_argument("entropy_rate_superpixels: N must be >= 1");
  if (size_t(n_regions) > pixels)
    throw std::invalid_argument("entropy_rate_superpixels: N exceeds pixel count");
  if (lambda < 0) throw std::invalid_argument("entropy_rate_superpixels: lambda must be >= 0");
  if (sigma_i <= 0) throw std::invalid_argument("entropy_rate_superpixels: sigma_I must be > 0");

  struct Edge {
    int a, b;
    double w;
  };
  std::vector<Edge> edges;
  edges.reserve(pixels * 4);
  const double inv2s2 = 1.0 / (2.0 * sigma_i * sigma_i);
  auto weight = [&](int p, int q) {
    double d = double(img.data[p]) - double(img.data[q]);
    return std::exp(-d * d * inv2s2);
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int p = y * w + x;
      if (x + 1 < w) edges.push_back({p, p + 1, weight(p, p + 1)});
      if (y + 1 < h) edges.push_back({p, p + w, weight(p, p + w)});
      if (x + 1 < w && y + 1 < h) edges.push_back({p, p + w + 1, weight(p, p + w + 1)});
      if (x > 0 && y + 1 < h) edges.push_back({p, p + w - 1, weight(p, p + w - 1)});
    }

  std::vector<double> vertex_total(pixels, 0.0);
  for (const auto& e : edges) {
    vertex_total[e.a] += e.w;
    vertex_total[e.b] += e.w;
  }
  double graph_total = 0.0;
  for (double t : vertex_total) graph_total += t;

  std::vector<double> loop = vertex_total;
  detail::UnionFind uf(pixels);
  size_t components = pixels;
  const double inv_pixels = 1.0 / double(pixels);

  auto gain = [&](const Edge& e) {
    double dh = 0.0;
    if (graph_total > 0)
      dh = (detail::entropy_gain_term(loop[e.a], e.w, vertex_total[e.a]) +
            detail::entropy_gain_term(loop[e.b], e.w, vertex_total[e.b])) /
           graph_total;
    auto xlogx = [](double x) { return x > 0 ? x * std::log(x) : 0.0; };
    double pa = double(uf.size_of(uf.find(e.a))) * inv_pixels;
    double pb = double(uf.size_of(uf.find(e.b))) * inv_pixels;
    double db = xlogx(pa) + xlogx(pb) - xlogx(pa + pb) + 1.0;
    return dh + lambda * db;
  };

  if (size_t(n_regions) < pixels && !edges.empty()) {
    using HeapItem = std::pair<double, int>;  // (cached gain, edge index)
    std::priority_queue<HeapItem> heap;
    for (int i = 0; i < int(edges.size()); ++i) heap.push({gain(edges[i]), i});

    while (components > size_t(n_regions) && !heap.empty()) {
      auto [cached, ei] = heap.top();
      heap.pop();
      const Edge& e = edges[ei];
      if (uf.find(e.a) == uf.find(e.b)) continue;  // would close a cycle
      double now = gain(e);
      if (!heap.empty() && now < heap.top().first) {
        heap.push({now, ei});
        continue;
      }
      uf.unite(e.a, e.b);
      loop[e.a] -= e.w;
      loop[e.b] -= e.w;
      --components;
      if (selected_edges) selected_edges->emplace_back(e.a, e.b);
    }
  }

  // Component ids -> labels in first-appearance scan order.
  Image2<uint32_t> labels(w, h, 0);
  {
    std::vector<uint32_t> remap(pixels, UINT32_MAX);
    uint32_t next = 0;
    for (size_t p = 0; p < pixels; ++p) {
      size_t root = uf.find(p);
      if (remap[root] == UINT32_MAX) remap[root] = next++;
      labels.data[p] = remap[root];
    }
  }

  // 4-connectivity repair (see header comment).
  auto relabel4 = [&]() -> uint32_t {
    std::vector<uint32_t> out(pixels, UINT32_MAX);
    uint32_t next = 0;
    std::vector<int> stack;
    for (size_t p = 0; p < pixels; ++p) {
      if (out[p] != UINT32_MAX) continue;
      uint32_t comp = labels.data[p];
      out[p] = next;
      stack.assign(1, int(p));
      while (!stack.empty()) {
        int q = stack.back();
        stack.pop_back();
        int qx = q % w, qy = q / w;
        const int nx4[4] = {qx - 1, qx + 1, qx, qx};
        const int ny4[4] = {qy, qy, qy - 1, qy + 1};
        for (int k = 0; k < 4; ++k) {
          if (nx4[k] < 0 || nx4[k] >= w || ny4[k] < 0 || ny4[k] >= h) continue;
          int r = ny4[k] * w + nx4[k];
          if (out[r] == UINT32_MAX && labels.data[r] == comp) {
            out[r] = next;
            stack.push_back(r);
          }
        }
      }
      ++next;
    }
    for (size_t p = 0; p < pixels; ++p) labels.data[p] = out[p];
    return next;
  };

  uint32_t count4 = relabel4();
  while (count4 > uint32_t(n_regions)) {
    std::vector<size_t> area(count4, 0);
    for (size_t p = 0; p < pixels; ++p) area[labels.data[p]]++;
    uint32_t victim = 0;
    for (uint32_t r = 1; r < count4; ++r)
      if (area[r] < area[victim]) victim = r;

    // Most similar 4-neighbor: largest summed boundary weight, ties to the
    // smaller label.
    std::map<uint32_t, double> neighbor_weight;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int p = y * w + x;
        if (labels.data[p] != victim) continue;
        const int nx4[2] = {x + 1, x};
        const int ny4[2] = {y, y + 1};
        for (int k = 0; k < 2; ++k) {
          if (nx4[k] >= w || ny4[k] >= h) continue;
          int q = ny4[k] * w + nx4[k];
          if (labels.data[q] != victim) neighbor_weight[labels.data[q]] += weight(p, q);
        }
        const int px4[2] = {x - 1, x};
        const int py4[2] = {y, y - 1};
        for (int k = 0; k < 2; ++k) {
          if (px4[k] < 0 || py4[k] < 0) continue;
          int q = py4[k] * w + px4[k];
          if (labels.data[q] != victim) neighbor_weight[labels.data[q]] += weight(p, q);
        }
      }
    uint32_t target = UINT32_MAX;
    double best = -1;
    for (auto& [r, bw] : neighbor_weight)
      if (bw > best) {
        best = bw;
        target = r;
      }
    for (size_t p = 0; p < pixels; ++p)
      if (labels.data[p] == victim) labels.data[p] = target;
    count4 = relabel4();
  }

  return labels;
}

// ---------------------------------------------------------------------------

struct SuperpixelMap {
  LabelVolume labels;                // global region id per voxel
  std::vector<int> region_slice;     // region id -> z
  std::vector<int> per_slice_count;  // z -> number of regions

  int region_count() const { return int(region_slice.size()); }

  /// Rebuilds the per-region bookkeeping from a label volume (e.g. after
  /// reading one from disk). Labels must not span slices.
  static SuperpixelMap from_labels(LabelVolume labels) {
    SuperpixelMap sp;
    sp.labels = std::move(labels);
    const auto& l = sp.labels;
    uint32_t max_label = 0;
    for (uint32_t v : l.data) max_label = std::max(max_label, v);
    sp.region_slice.assign(size_t(max_label) + 1, -1);
    sp.per_slice_count.assign(l.nz(), 0);
    for (int z = 0; z < l.nz(); ++z)
      for (int y = 0; y < l.ny(); ++y)
        for (int x = 0; x < l.nx(); ++x) {
          uint32_t id = l.at(x, y, z);
          if (sp.region_slice[id] == -1) {
            sp.region_slice[id] = z;
            sp.per_slice_count[z]++;
          } else if (sp.region_slice[id] != z) {
            throw std::invalid_argument("SuperpixelMap: label spans slices");
          }
        }
    for (int s : sp.region_slice)
      if (s < 0) throw std::invalid_argument("SuperpixelMap: label ids must be dense");
    return sp;
  }
};

struct SuperpixelParams {
  int n_per_slice = 0;   // 0: area/400 clamped to >= 8
  double lambda = -1.0;  // <0: N / total graph weight
  double sigma_i = -1.0; // <0: sample std of the slice intensities
};

inline int default_regions_per_slice(int width, int height) {
  return std::max(8, width * height / 400);
}

namespace detail {

inline double slice_sigma(const ImageF& img) {
  double mean = 0;
  for (float v : img.data) mean += v;
  mean /= double(img.size());
  double var = 0;
  for (float v : img.data) var += (v - mean) * (v - mean);
  var /= double(img.size());
  double sd = std::sqrt(var);
  return sd > 1e-12 ? sd : 1.0;
}

inline double default_lambda(const ImageF& img, int n_regions, double sigma_i) {
  // Balancing weight scaled by N over the total graph weight.
  const int w = img.width, h = img.height;
  const double inv2s2 = 1.0 / (2.0 * sigma_i * sigma_i);
  auto weight = [&](int p, int q) {
    double d = double(img.data[p]) - double(img.data[q]);
    return std::exp(-d * d * inv2s2);
  };
  double total = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int p = y * w + x;
      if (x + 1 < w) total += weight(p, p + 1);
      if (y + 1 < h) total += weight(p, p + w);
      if (x + 1 < w && y + 1 < h) total += weight(p, p + w + 1);
      if (x > 0 && y + 1 < h) total += weight(p, p + w - 1);
    }
  total *= 2.0;  // vertex-sum convention
  return total > 0 ? double(n_regions) / total : 0.0;
}

}  // namespace detail

/// Per-slice superpixels over the whole volume with globally unique,
/// slice-contiguous region ids.
inline SuperpixelMap compute_superpixels(const Volume& v, const SuperpixelParams& params = {}) {
  SuperpixelMap sp;
  sp.labels = LabelVolume(v.dims, v.spacing, 0);
  sp.per_slice_count.assign(v.nz(), 0);

  std::vector<Image2<uint32_t>> slice_labels(v.nz());
  parallel_for(size_t(v.nz()), [&](size_t lo, size_t hi) {
    for (size_t z = lo; z < hi; ++z) {
      ImageF img = extract_slice(v, Axis::axial, int(z));
      int n = params.n_per_slice > 0 ? params.n_per_slice
                                     : default_regions_per_slice(img.width, img.height);
      n = std::min<int>(n, int(img.size()));
      double sigma = params.sigma_i > 0 ? params.sigma_i : detail::slice_sigma(img);
      double lambda =
          params.lambda >= 0 ? params.lambda : detail::default_lambda(img, n, sigma);
      slice_labels[z] = entropy_rate_superpixels(img, n, lambda, sigma);
    }
  });

  uint32_t offset = 0;
  for (int z = 0; z < v.nz(); ++z) {
    uint32_t max_label = 0;
    for (int y = 0; y < v.ny(); ++y)
      for (int x = 0; x < v.nx(); ++x) {
        uint32_t local = slice_labels[z].at(x, y);
        max_label = std::max(max_label, local);
        sp.labels.at(x, y, z) = offset + local;
      }
    uint32_t count = max_label + 1;
    sp.per_slice_count[z] = int(count);
    for (uint32_t i = 0; i < count; ++i) sp.region_slice.push_back(z);
    offset += count;
  }
  return sp;
}

/// Voxel lists per region id.
inline std::vector<std::vector<size_t>> collect_region_voxels(const SuperpixelMap& sp) {
  std::vector<std::vector<size_t>> out(sp.region_count());
  for (size_t i = 0; i < sp.labels.data.size(); ++i) out[sp.labels.data[i]].push_back(i);
  return out;
}

// ---------------------------------------------------------------------------

struct RegionAdjacency {
  struct Edge {
    uint32_t a, b;     // a < b, same slice
    int boundary_len;  // count of 4-neighbor voxel pairs across the border
  };
  int node_count = 0;
  std::vector<Edge> edges;  // sorted by (a, b)
};

inline RegionAdjacency build_adjacency(const SuperpixelMap& sp) {
  std::map<std::pair<uint32_t, uint32_t>, int> pairs;
  const auto& l = sp.labels;
  for (int z = 0; z < l.nz(); ++z)
    for (int y = 0; y < l.ny(); ++y)
      for (int x = 0; x < l.nx(); ++x) {
        uint32_t id = l.at(x, y, z);
        if (x + 1 < l.nx()) {
          uint32_t r = l.at(x + 1, y, z);
          if (r != id) pairs[{std::min(id, r), std::max(id, r)}]++;
        }
        if (y + 1 < l.ny()) {
          uint32_t d = l.at(x, y + 1, z);
          if (d != id) pairs[{std::min(id, d), std::max(id, d)}]++;
        }
      }
  RegionAdjacency adj;
  adj.node_count = sp.region_count();
  adj.edges.reserve(pairs.size());
  for (auto& [key, len] : pairs) adj.edges.push_back({key.first, key.second, len});
  return adj;
}

// ---------------------------------------------------------------------------

struct OptimalLabeling {
  std::vector<uint8_t> label;  // per region id
  double dsc = 0.0;            // achieved DSC upper bound
};

struct RegionOverlap {
  std::vector<int64_t> area;     // |S_i|
  std::vector<int64_t> overlap;  // |S_i . gt|
  int64_t gt_total = 0;
};

inline RegionOverlap region_overlap(const SuperpixelMap& sp, const Mask& gt) {
  if (sp.labels.dims != gt.dims)
    throw std::invalid_argument("region_overlap: dims mismatch");
  RegionOverlap ov;
  ov.area.assign(sp.region_count(), 0);
  ov.overlap.assign(sp.region_count(), 0);
  for (size_t i = 0; i < gt.data.size(); ++i) {
    uint32_t id = sp.labels.data[i];
    ov.area[id]++;
    if (gt.data[i]) {
      ov.overlap[id]++;
      ov.gt_total++;
    }
  }
  return ov;
}

/// DSC-maximizing binary labeling via Dinkelbach's method for the linear
/// fractional objective 2 sum(a_i x_i) / (sum(n_i x_i) + G): at ratio value
/// t, the selection {i : 2 a_i > t n_i} maximizes the parametrized linear
/// form; iterating t to the achieved ratio reaches the global optimum in a
/// finite number of steps. Regions whose overlap sits exactly at the
/// marginal ratio are left unselected (deterministic, favors precision).
inline OptimalLabeling optimal_labels(const SuperpixelMap& sp, const Mask& gt) {
  RegionOverlap ov = region_overlap(sp, gt);
  const int regions = sp.region_count();
  OptimalLabeling out;
  out.label.assign(regions, 0);
  if (ov.gt_total == 0) {
    out.dsc = 1.0;  // empty painted set against empty ground truth
    return out;
  }

  double t = 0.0;
  std::vector<uint8_t> sel(regions, 0);
  for (int iter = 0; iter < 100; ++iter) {
    int64_t a_sum = 0, n_sum = 0;
    for (int i = 0; i < regions; ++i) {
      bool pick = double(2 * ov.overlap[i]) > t * double(ov.area[i]);
      sel[i] = pick;
      if (pick) {
        a_sum += ov.overlap[i];
        n_sum += ov.area[i];
      }
    }
    double t_next = 2.0 * double(a_sum) / double(n_sum + ov.gt_total);
    if (t_next == t) break;
    t = t_next;
  }
  out.label = sel;
  out.dsc = t;
  return out;
}

/// Paints per-region binary labels into a voxel mask.
inline Mask paint_labeling(const SuperpixelMap& sp, const std::vector<uint8_t>& label) {
  Mask m(sp.labels.dims, sp.labels.spacing, 0);
  for (size_t i = 0; i < sp.labels.data.size(); ++i)
    m.data[i] = label[sp.labels.data[i]] ? 1 : 0;
  return m;
}

}  // namespace voxseg
