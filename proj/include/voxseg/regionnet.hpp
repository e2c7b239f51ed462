#pragma once

// R-ConvNet support: multi-scale "zoom-out" square crops around candidate
// superpixels, TPS-based training augmentation, and per-superpixel
// classification. R1 samples carry one CT channel; R2 samples append the
// P0 probability crop as a second channel (same geometry, same warps).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "voxseg/candidates.hpp"
#include "voxseg/convnet.hpp"
#include "voxseg/patchnet.hpp"
#include "voxseg/superpixel.hpp"
#include "voxseg/tps.hpp"

namespace voxseg {

struct RegionWindow {
  int slice = 0;
  double cx = 0, cy = 0;  // bounding-box center, voxel-center coordinates
  double side = 0;        // scale_factor * max(bbox width, height)
};

/// Square sampling window for a superpixel at a scale factor. Windows at
/// growing scale factors share the center, so fields of view nest.
inline RegionWindow region_window(const SuperpixelMap& sp, uint32_t id, double scale_factor) {
  if (id >= uint32_t(sp.region_count()))
    throw std::invalid_argument("region_window: unknown superpixel id");
  if (scale_factor < 1.0)
    throw std::invalid_argument("region_window: scale factor must be >= 1");
  const auto& l = sp.labels;
  int z = sp.region_slice[id];
  int x0 = l.nx(), x1 = -1, y0 = l.ny(), y1 = -1;
  for (int y = 0; y < l.ny(); ++y)
    for (int x = 0; x < l.nx(); ++x)
      if (l.at(x, y, z) == id) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) throw std::invalid_argument("region_window: id has no voxels");
  RegionWindow w;
  w.slice = z;
  w.cx = 0.5 * (x0 + x1);
  w.cy = 0.5 * (y0 + y1);
  w.side = scale_factor * double(std::max(x1 - x0 + 1, y1 - y0 + 1));
  return w;
}

namespace detail {

// Sample position for output pixel k: window_lo + (k + 0.5) * side / out,
// in voxel-center coordinates (a bbox of voxels x0..x1 spans the window
// [x0 - 0.5, x1 + 0.5]). At scale 1 on an exactly-square bbox with
// out == side this lands on the voxel centers, so the crop reproduces the
// bbox content.
inline double sample_pos(double center, double side, int k, int out) {
  return center - 0.5 * side + (double(k) + 0.5) * side / double(out);
}

}  // namespace detail

/// Square crop resampled to out_size x out_size by bilinear interpolation,
/// replicate-padded outside the slice. Channel 0 is normalized CT; channel
/// 1 (present iff p0 given) is the P0 crop mapped to [-1, 1].
inline Tensor region_crop(const Volume& v, const Volume* p0, const SuperpixelMap& sp,
                          uint32_t id, double scale_factor, int out_size,
                          const VolumeNormalization& norm) {
  if (out_size < 1) throw std::invalid_argument("region_crop: out size must be >= 1");
  RegionWindow w = region_window(sp, id, scale_factor);
  ImageF ct = extract_slice(v, Axis::axial, w.slice);
  ImageF pr;
  if (p0) {
    if (p0->dims != v.dims) throw std::invalid_argument("region_crop: P0 dims mismatch");
    pr = extract_slice(*p0, Axis::axial, w.slice);
  }
  Tensor t(p0 ? 2 : 1, out_size, out_size);
  for (int j = 0; j < out_size; ++j) {
    double sy = detail::sample_pos(w.cy, w.side, j, out_size);
    for (int i = 0; i < out_size; ++i) {
      double sx = detail::sample_pos(w.cx, w.side, i, out_size);
      t.at(0, j, i) = norm.apply(bilinear_sample(ct, sx, sy));
      if (p0) t.at(1, j, i) = 2.0 * bilinear_sample(pr, sx, sy) - 1.0;
    }
  }
  return t;
}

struct RegionSample {
  uint32_t id = 0;
  int scale_index = 0;
  uint8_t label = 0;
  Tensor image;
};

using RegionDataset = std::vector<RegionSample>;

/// One sample per (candidate superpixel, scale); labels from the optimal
/// superpixel labeling. Superpixels are capped per class (seeded) before
/// scale expansion.
inline RegionDataset build_region_dataset(const Volume& v, const Volume* p0,
                                          const SuperpixelMap& sp, const CandidateSet& cs,
                                          const OptimalLabeling& opt,
                                          const std::vector<double>& scale_factors,
                                          int out_size, int cap_per_class, uint64_t seed) {
  if (scale_factors.empty())
    throw std::invalid_argument("build_region_dataset: no scale factors");
  std::vector<uint32_t> pos, neg;
  for (uint32_t id : cs.ids) (opt.label[id] ? pos : neg).push_back(id);
  Rng rng(seed);
  rng.shuffle(pos);
  rng.shuffle(neg);
  if (cap_per_class > 0) {
    pos.resize(std::min(pos.size(), size_t(cap_per_class)));
    neg.resize(std::min(neg.size(), size_t(cap_per_class)));
  }
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());

  VolumeNormalization norm = compute_normalization(v);
  RegionDataset ds;
  for (int cls = 0; cls < 2; ++cls)
    for (uint32_t id : (cls ? pos : neg))
      for (size_t s = 0; s < scale_factors.size(); ++s) {
        RegionSample sample;
        sample.id = id;
        sample.scale_index = int(s);
        sample.label = uint8_t(cls);
        sample.image = region_crop(v, p0, sp, id, scale_factors[s], out_size, norm);
        ds.push_back(std::move(sample));
      }
  return ds;
}

/// TPS augmentation: every sample expands to exactly n_deformations
/// instances. Instance 0 keeps the original when keep_original is set;
/// all other instances are warped with a fresh random deformation (uniform
/// control-point jitter of magnitude * window side on a 5x5 grid). All
/// channels share the deformation; labels and ids pass through.
inline RegionDataset augment_dataset(const RegionDataset& samples, int n_deformations,
                                     double magnitude, uint64_t seed,
                                     bool keep_original = true) {
  if (n_deformations < 1)
    throw std::invalid_argument("augment_dataset: N_t must be >= 1");
  if (magnitude < 0.0 || magnitude > 0.25)
    throw std::invalid_argument(
        "augment_dataset: magnitude outside the plausible-deformation bound [0, 0.25]");

  Rng master(seed);
  RegionDataset out;
  out.reserve(samples.size() * size_t(n_deformations));
  for (size_t si = 0; si < samples.size(); ++si) {
    const RegionSample& s = samples[si];
    const int size = s.image.h;
    Rng sample_rng = master.split(si);
    for (int d = 0; d < n_deformations; ++d) {
      if (d == 0 && keep_original) {
        out.push_back(s);
        continue;
      }
      // 5x5 control grid over the sample window.
      std::vector<std::array<double, 2>> grid, disp;
      for (int gy = 0; gy < 5; ++gy)
        for (int gx = 0; gx < 5; ++gx)
          grid.push_back({double(gx) * (size - 1) / 4.0, double(gy) * (size - 1) / 4.0});
      double amp = magnitude * double(size);
      for (size_t g = 0; g < grid.size(); ++g)
        disp.push_back({sample_rng.uniform(-amp, amp), sample_rng.uniform(-amp, amp)});
      TPSDeformation t = tps_fit(grid, disp);

      RegionSample warped;
      warped.id = s.id;
      warped.scale_index = s.scale_index;
      warped.label = s.label;
      warped.image = Tensor(s.image.c, size, size);
      for (int c = 0; c < s.image.c; ++c) {
        ImageF channel(size, size);
        for (int j = 0; j < size; ++j)
          for (int i = 0; i < size; ++i) channel.at(i, j) = float(s.image.at(c, j, i));
        ImageF w = tps_warp(channel, t);
        for (int j = 0; j < size; ++j)
          for (int i = 0; i < size; ++i) warped.image.at(c, j, i) = w.at(i, j);
      }
      out.push_back(std::move(warped));
    }
  }
  return out;
}

/// Per-candidate, per-scale class probabilities, aligned with cs.ids.
inline std::vector<std::vector<double>> classify_regions(
    const ConvNetModel& model, const Volume& v, const Volume* p0, const SuperpixelMap& sp,
    const CandidateSet& cs, const std::vector<double>& scale_factors, int batch_size = 64) {
  const int want_channels = p0 ? 2 : 1;
  if (model.spec.input_shape[0] != want_channels)
    throw std::invalid_argument("classify_regions: model channel count mismatch");
  const int out_size = model.spec.input_shape[1];
  VolumeNormalization norm = compute_normalization(v);

  const size_t n_scales = scale_factors.size();
  std::vector<std::vector<double>> scores(cs.ids.size(), std::vector<double>(n_scales, 0.0));
  std::vector<Tensor> batch;
  std::vector<std::pair<size_t, size_t>> slots;  // (candidate index, scale index)
  auto flush = [&] {
    if (batch.empty()) return;
    auto probs = forward(model, batch, RunMode::infer);
    for (size_t b = 0; b < batch.size(); ++b)
      scores[slots[b].first][slots[b].second] = probs[b][1];
    batch.clear();
    slots.clear();
  };
  for (size_t ci = 0; ci < cs.ids.size(); ++ci)
    for (size_t s = 0; s < n_scales; ++s) {
      batch.push_back(region_crop(v, p0, sp, cs.ids[ci], scale_factors[s], out_size, norm));
      slots.emplace_back(ci, s);
      if (int(batch.size()) >= batch_size) flush();
    }
  flush();
  return scores;
}

}  // namespace voxseg
