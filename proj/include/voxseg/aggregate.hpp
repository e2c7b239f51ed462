#pragma once

// Cross-scale probability averaging, superpixel-to-voxel painting, 3D
// isotropic Gaussian smoothing G(P_k), and thresholding to binary masks.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "voxseg/candidates.hpp"
#include "voxseg/parallel.hpp"
#include "voxseg/superpixel.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

/// Arithmetic mean across scales, per superpixel.
inline std::vector<double> average_scales(const std::vector<std::vector<double>>& scores) {
  std::vector<double> out(scores.size());
  size_t n_scales = scores.empty() ? 0 : scores[0].size();
  for (size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].size() != n_scales || scores[i].empty())
      throw std::invalid_argument("average_scales: ragged or empty scale lists");
    double s = 0;
    for (double v : scores[i]) s += v;
    out[i] = s / double(scores[i].size());
  }
  return out;
}

/// Per-voxel map: a candidate voxel takes its superpixel's probability,
/// everything else is 0. probs aligns with cs.ids.
inline Volume paint_voxels(const SuperpixelMap& sp, const CandidateSet& cs,
                           const std::vector<double>& probs) {
  if (probs.size() != cs.ids.size())
    throw std::invalid_argument("paint_voxels: missing probability for a candidate");
  std::vector<float> by_region(sp.region_count(), 0.0f);
  std::vector<uint8_t> is_candidate(sp.region_count(), 0);
  for (size_t i = 0; i < cs.ids.size(); ++i) {
    by_region[cs.ids[i]] = float(probs[i]);
    is_candidate[cs.ids[i]] = 1;
  }
  Volume out(sp.labels.dims, sp.labels.spacing, 0.0f);
  for (size_t i = 0; i < out.data.size(); ++i) {
    uint32_t id = sp.labels.data[i];
    if (is_candidate[id]) out.data[i] = by_region[id];
  }
  return out;
}

/// Separable 3D Gaussian, sigma in voxel units, kernel truncated at
/// ceil(3*sigma), replicate borders. sigma = 0 returns the input
/// bit-identically. Accumulation is double per line.
inline Volume gaussian_smooth_3d(const Volume& p, double sigma) {
  if (sigma < 0) throw std::invalid_argument("gaussian_smooth_3d: sigma must be >= 0");
  if (sigma == 0.0) return p;

  const int radius = int(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-double(i) * i / (2.0 * sigma * sigma));
    sum += kernel[i + radius];
  }
  for (double& k : kernel) k /= sum;

  Volume cur = p;
  const int nx = p.nx(), ny = p.ny(), nz = p.nz();
  auto pass = [&](int axis) {
    Volume next(cur.dims, cur.spacing);
    const int extent = axis == 0 ? nx : axis == 1 ? ny : nz;
    // Lines perpendicular to the axis.
    size_t n_lines = size_t(p.size()) / extent;
    parallel_for(n_lines, [&](size_t lo, size_t hi) {
      for (size_t line = lo; line < hi; ++line) {
        int a = 0, b = 0;
        if (axis == 0) {
          a = int(line % ny);  // y
          b = int(line / ny);  // z
        } else if (axis == 1) {
          a = int(line % nx);  // x
          b = int(line / nx);  // z
        } else {
          a = int(line % nx);  // x
          b = int(line / nx);  // y
        }
        for (int c = 0; c < extent; ++c) {
          double acc = 0;
          for (int k = -radius; k <= radius; ++k) {
            int cc = std::clamp(c + k, 0, extent - 1);
            float v = axis == 0   ? cur.at(cc, a, b)
                      : axis == 1 ? cur.at(a, cc, b)
                                  : cur.at(a, b, cc);
            acc += kernel[k + radius] * double(v);
          }
          if (axis == 0)
            next.at(c, a, b) = float(acc);
          else if (axis == 1)
            next.at(a, c, b) = float(acc);
          else
            next.at(a, b, c) = float(acc);
        }
      }
    });
    cur = std::move(next);
  };
  pass(0);
  pass(1);
  pass(2);
  return cur;
}

struct OperatingPoint {
  int map_id = 0;          // k in {0, 1, 2}
  double threshold = 0.5;  // p_k, strict
  double sigma = 3.0;      // smoothing width in voxels

  OperatingPoint() = default;
  OperatingPoint(int k, double t, double s) : map_id(k), threshold(t), sigma(s) {
    if (t <= 0.0 || t >= 1.0)
      throw std::invalid_argument("OperatingPoint: threshold must lie in (0, 1)");
    if (s < 0.0) throw std::invalid_argument("OperatingPoint: sigma must be >= 0");
  }
};

/// Strict threshold: voxel is foreground iff value > threshold.
inline Mask threshold(const Volume& p, const OperatingPoint& op) {
  Mask m(p.dims, p.spacing, 0);
  for (size_t i = 0; i < p.data.size(); ++i) m.data[i] = p.data[i] > op.threshold ? 1 : 0;
  return m;
}

}  // namespace voxseg
