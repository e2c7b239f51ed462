#pragma once

// P-ConvNet support: 2.5D patch extraction (axial/coronal/sagittal crops
// through a voxel), balanced patch datasets drawn inside the candidate
// regions, and strided dense labeling with nearest-evaluated-lattice fill,
// producing the per-voxel probability map P0.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "voxseg/candidates.hpp"
#include "voxseg/convnet.hpp"
#include "voxseg/parallel.hpp"
#include "voxseg/rng.hpp"
#include "voxseg/superpixel.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

/// Per-volume affine normalization: [1st, 99th] percentile range mapped to
/// [-1, 1], clamped.
struct VolumeNormalization {
  double lo = 0.0, hi = 1.0;

  double apply(double x) const {
    if (hi <= lo) return 0.0;
    double t = 2.0 * (x - lo) / (hi - lo) - 1.0;
    return std::clamp(t, -1.0, 1.0);
  }
};

inline VolumeNormalization compute_normalization(const Volume& v) {
  std::vector<float> sorted = v.data;
  size_t n = sorted.size();
  size_t i1 = size_t(std::floor(0.01 * double(n - 1)));
  size_t i99 = size_t(std::floor(0.99 * double(n - 1)));
  std::nth_element(sorted.begin(), sorted.begin() + i1, sorted.end());
  double lo = sorted[i1];
  std::nth_element(sorted.begin(), sorted.begin() + i99, sorted.end());
  double hi = sorted[i99];
  return {lo, hi};
}

/// Three orthogonal size x size crops centered on a voxel, replicate-padded
/// at volume borders, identically normalized. Channel order: axial,
/// coronal, sagittal.
inline Tensor extract_patch_2_5d(const Volume& v, const VolumeNormalization& norm, int cx,
                                 int cy, int cz, int size) {
  if (!v.in_bounds(cx, cy, cz))
    throw std::out_of_range("extract_patch_2_5d: center out of bounds");
  if (size < 1) throw std::invalid_argument("extract_patch_2_5d: size must be >= 1");
  Tensor t(3, size, size);
  const int o = size / 2;
  for (int j = 0; j < size; ++j)
    for (int i = 0; i < size; ++i) {
      t.at(0, j, i) = norm.apply(v.at_clamped(cx + i - o, cy + j - o, cz));
      t.at(1, j, i) = norm.apply(v.at_clamped(cx + i - o, cy, cz + j - o));
      t.at(2, j, i) = norm.apply(v.at_clamped(cx, cy + i - o, cz + j - o));
    }
  return t;
}

struct PatchDataset {
  std::vector<Tensor> inputs;
  std::vector<uint8_t> labels;
  std::vector<size_t> centers;  // voxel indices
};

/// Balanced patch sampling restricted to candidate superpixels; labels from
/// the ground truth, classes capped per class, deterministic in the seed.
inline PatchDataset build_patch_dataset(const Volume& v, const SuperpixelMap& sp,
                                        const CandidateSet& cs, const Mask& gt,
                                        int per_class_cap, int patch_size, uint64_t seed) {
  if (v.dims != gt.dims || v.dims != sp.labels.dims)
    throw std::invalid_argument("build_patch_dataset: dims mismatch");
  if (per_class_cap < 1)
    throw std::invalid_argument("build_patch_dataset: cap must be >= 1");

  std::vector<size_t> pos, neg;
  for (size_t i = 0; i < v.data.size(); ++i) {
    if (!cs.retained[sp.labels.data[i]]) continue;
    (gt.data[i] ? pos : neg).push_back(i);
  }
  if (pos.empty())
    throw std::invalid_argument("build_patch_dataset: no positive class within candidates");
  if (neg.empty())
    throw std::invalid_argument("build_patch_dataset: no negative class within candidates");

  Rng rng(seed);
  rng.shuffle(pos);
  rng.shuffle(neg);
  pos.resize(std::min(pos.size(), size_t(per_class_cap)));
  neg.resize(std::min(neg.size(), size_t(per_class_cap)));

  VolumeNormalization norm = compute_normalization(v);
  PatchDataset ds;
  for (int cls = 0; cls < 2; ++cls) {
    for (size_t idx : (cls ? pos : neg)) {
      int z = int(idx / (size_t(v.nx()) * v.ny()));
      size_t rem = idx % (size_t(v.nx()) * v.ny());
      int y = int(rem / v.nx()), x = int(rem % v.nx());
      ds.inputs.push_back(extract_patch_2_5d(v, norm, x, y, z, patch_size));
      ds.labels.push_back(uint8_t(cls));
      ds.centers.push_back(idx);
    }
  }
  return ds;
}

struct DenseLabelConfig {
  int stride = 2;      // evaluate every n-th voxel along each axis
  int patch_size = 64;
  int batch_size = 64;
};

namespace detail {

/// Nearest-evaluated-lattice fill. Candidate voxels keep their value when
/// evaluated; otherwise they copy the nearest evaluated voxel (Euclidean in
/// voxel units, ties resolved to the smallest (z, y, x)). Idempotent:
/// evaluated values never change.
inline Volume nn_fill(const Volume& p, const std::vector<uint8_t>& evaluated,
                      const Mask& candidates, int stride) {
  Volume out = p;
  const int nx = p.nx(), ny = p.ny(), nz = p.nz();
  auto lattice_range = [&](int c, int r, int n) {
    int lo = std::max(0, ((c - r) + stride - 1) / stride * stride);
    int hi = std::min(n - 1, c + r) / stride * stride;
    return std::pair{lo, hi};
  };
  size_t total = p.data.size();
  parallel_for(total, [&](size_t lo_i, size_t hi_i) {
    for (size_t i = lo_i; i < hi_i; ++i) {
      if (!candidates.data[i] || evaluated[i]) continue;
      int z = int(i / (size_t(nx) * ny));
      size_t rem = i % (size_t(nx) * ny);
      int y = int(rem / nx), x = int(rem % nx);

      double best_d2 = std::numeric_limits<double>::infinity();
      std::tuple<int, int, int> best_zyx{INT32_MAX, INT32_MAX, INT32_MAX};
      size_t best_idx = SIZE_MAX;
      int max_extent = std::max({nx, ny, nz});
      for (int r = stride; r <= 2 * max_extent; r *= 2) {
        auto [zl, zh] = lattice_range(z, r, nz);
        auto [yl, yh] = lattice_range(y, r, ny);
        auto [xl, xh] = lattice_range(x, r, nx);
        for (int lz = zl; lz <= zh; lz += stride)
          for (int ly = yl; ly <= yh; ly += stride)
            for (int lx = xl; lx <= xh; lx += stride) {
              size_t li = p.index(lx, ly, lz);
              if (!evaluated[li]) continue;
              double dx = lx - x, dy = ly - y, dz = lz - z;
              double d2 = dx * dx + dy * dy + dz * dz;
              std::tuple<int, int, int> zyx{lz, ly, lx};
              if (d2 < best_d2 || (d2 == best_d2 && zyx < best_zyx)) {
                best_d2 = d2;
                best_zyx = zyx;
                best_idx = li;
              }
            }
        // Any point outside the L-inf box at radius r is farther than r.
        if (best_idx != SIZE_MAX && best_d2 <= double(r) * double(r)) break;
      }
      if (best_idx != SIZE_MAX) out.data[i] = p.data[best_idx];
    }
  });
  return out;
}

}  // namespace detail

/// Dense P-ConvNet labeling: evaluates the model on the stride lattice
/// inside the candidate mask and nearest-neighbor-fills the remaining
/// candidate voxels. Outside the candidates the map is exactly 0.
inline Volume dense_label(const Volume& v, const SuperpixelMap& sp, const CandidateSet& cs,
                          const ConvNetModel& model, const DenseLabelConfig& cfg) {
  if (model.spec.input_shape[0] != 3)
    throw std::invalid_argument("dense_label: model must take 3 input channels");
  if (cfg.stride < 1) throw std::invalid_argument("dense_label: stride must be >= 1");
  if (model.spec.input_shape[1] != cfg.patch_size || model.spec.input_shape[2] != cfg.patch_size)
    throw std::invalid_argument("dense_label: patch size does not match model input");

  Mask candidates = candidate_mask(sp, cs);
  Volume p0(v.dims, v.spacing, 0.0f);
  std::vector<uint8_t> evaluated(v.data.size(), 0);
  VolumeNormalization norm = compute_normalization(v);

  std::vector<size_t> lattice;
  for (int z = 0; z < v.nz(); z += cfg.stride)
    for (int y = 0; y < v.ny(); y += cfg.stride)
      for (int x = 0; x < v.nx(); x += cfg.stride) {
        size_t i = v.index(x, y, z);
        if (candidates.data[i]) lattice.push_back(i);
      }

  for (size_t start = 0; start < lattice.size(); start += size_t(cfg.batch_size)) {
    size_t end = std::min(lattice.size(), start + size_t(cfg.batch_size));
    std::vector<Tensor> batch;
    batch.reserve(end - start);
    for (size_t b = start; b < end; ++b) {
      size_t i = lattice[b];
      int z = int(i / (size_t(v.nx()) * v.ny()));
      size_t rem = i % (size_t(v.nx()) * v.ny());
      int y = int(rem / v.nx()), x = int(rem % v.nx());
      batch.push_back(extract_patch_2_5d(v, norm, x, y, z, cfg.patch_size));
    }
    auto probs = forward(model, batch, RunMode::infer);
    for (size_t b = start; b < end; ++b) {
      p0.data[lattice[b]] = float(probs[b - start][1]);
      evaluated[lattice[b]] = 1;
    }
  }

  if (cfg.stride == 1 || lattice.empty()) return p0;
  return detail::nn_fill(p0, evaluated, candidates, cfg.stride);
}

}  // namespace voxseg
