#pragma once

// Synthetic phantoms: one target "organ" plus distractor structures of
// similar intensity inside a noisy background. The organ is an irregular
// tube along z whose cross-section is a star-shaped region with low-order
// harmonic perturbations that drift from slice to slice, so no two slices
// match and nothing is ellipsoidal. A global radius scale is solved
// iteratively so the foreground volume lands near the requested fraction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "voxseg/rng.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

struct PhantomSpec {
  uint64_t seed = 0;
  int organ_count = 4;  // 1 target + (organ_count - 1) distractors
  double target_fraction = 0.01;
  double noise_sigma = 0.0;
  std::array<int, 3> dims{64, 64, 64};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
};

namespace detail {

struct Tube {
  int z0 = 0, z1 = 0;                       // inclusive slice range
  std::vector<double> cx, cy;               // centerline per slice
  std::vector<double> base_r;               // unscaled radius profile
  std::vector<std::array<double, 6>> harm;  // A2,B2,A3,B3,A4,B4 per slice
};

inline Tube make_tube(Rng& rng, const std::array<int, 3>& dims) {
  Tube t;
  int nz = dims[2];
  t.z0 = std::clamp(int(std::floor(nz * rng.uniform(0.10, 0.28))), 0, nz - 2);
  t.z1 = std::clamp(int(std::floor(nz * rng.uniform(0.72, 0.90))), t.z0 + 1, nz - 1);
  int len = t.z1 - t.z0 + 1;

  // Random-walk centerline, then a small moving average to keep slice-to-
  // slice steps well under one cross-section radius (preserves 3D
  // connectivity of the rasterized shape).
  std::vector<double> rx(len), ry(len);
  rx[0] = dims[0] * rng.uniform(0.32, 0.68);
  ry[0] = dims[1] * rng.uniform(0.32, 0.68);
  for (int i = 1; i < len; ++i) {
    rx[i] = rx[i - 1] + 0.8 * rng.normal();
    ry[i] = ry[i - 1] + 0.8 * rng.normal();
  }
  t.cx.resize(len);
  t.cy.resize(len);
  for (int i = 0; i < len; ++i) {
    double sx = 0, sy = 0;
    int n = 0;
    for (int w = -2; w <= 2; ++w) {
      int j = std::clamp(i + w, 0, len - 1);
      sx += rx[j];
      sy += ry[j];
      ++n;
    }
    t.cx[i] = std::clamp(sx / n, 0.18 * dims[0], 0.82 * dims[0]);
    t.cy[i] = std::clamp(sy / n, 0.18 * dims[1], 0.82 * dims[1]);
  }

  // Tapered radius profile with rounded ends.
  t.base_r.resize(len);
  for (int i = 0; i < len; ++i) {
    double u = (i + 0.5) / len;
    t.base_r[i] = std::sqrt(std::sin(3.14159265358979323846 * u));
  }

  // Harmonic coefficients at control slices every 8 slices, linearly
  // interpolated in between.
  int ctrl_count = std::max(2, (len + 7) / 8 + 1);
  std::vector<std::array<double, 6>> ctrl(ctrl_count);
  for (auto& c : ctrl)
    for (auto& a : c) a = rng.uniform(-0.12, 0.12);
  t.harm.resize(len);
  for (int i = 0; i < len; ++i) {
    double pos = double(i) / std::max(1, len - 1) * (ctrl_count - 1);
    int lo = std::min(int(pos), ctrl_count - 2);
    double f = pos - lo;
    for (int k = 0; k < 6; ++k) t.harm[i][k] = (1 - f) * ctrl[lo][k] + f * ctrl[lo + 1][k];
  }
  return t;
}

inline double tube_radius(const Tube& t, int zi, double theta, double scale) {
  const auto& h = t.harm[zi];
  double shape = 1.0 + h[0] * std::cos(2 * theta) + h[1] * std::sin(2 * theta) +
                 h[2] * std::cos(3 * theta) + h[3] * std::sin(3 * theta) +
                 h[4] * std::cos(4 * theta) + h[5] * std::sin(4 * theta);
  shape = std::max(shape, 0.2);
  return t.base_r[zi] * scale * shape;
}

inline std::vector<size_t> rasterize_tube(const Tube& t, double scale,
                                          const std::array<int, 3>& dims) {
  std::vector<size_t> voxels;
  for (int z = t.z0; z <= t.z1; ++z) {
    int zi = z - t.z0;
    double rmax = t.base_r[zi] * scale * 1.6;
    int x0 = std::max(0, int(std::floor(t.cx[zi] - rmax)));
    int x1 = std::min(dims[0] - 1, int(std::ceil(t.cx[zi] + rmax)));
    int y0 = std::max(0, int(std::floor(t.cy[zi] - rmax)));
    int y1 = std::min(dims[1] - 1, int(std::ceil(t.cy[zi] + rmax)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        double dx = x - t.cx[zi], dy = y - t.cy[zi];
        double d = std::sqrt(dx * dx + dy * dy);
        double theta = std::atan2(dy, dx);
        if (d <= tube_radius(t, zi, theta, scale))
          voxels.push_back((size_t(z) * dims[1] + y) * dims[0] + x);
      }
  }
  return voxels;
}

inline void for_each_neighbor26(const std::array<int, 3>& dims, int x, int y, int z,
                                const std::function<void(size_t)>& fn) {
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (dx == 0 && dy == 0 && dz == 0) continue;
        int nx = x + dx, ny = y + dy, nz = z + dz;
        if (nx < 0 || ny < 0 || nz < 0 || nx >= dims[0] || ny >= dims[1] || nz >= dims[2])
          continue;
        fn((size_t(nz) * dims[1] + ny) * dims[0] + nx);
      }
}

inline std::vector<size_t> largest_component_26(const std::vector<size_t>& voxels,
                                                const std::array<int, 3>& dims) {
  if (voxels.empty()) return {};
  std::vector<uint8_t> in_set(size_t(dims[0]) * dims[1] * dims[2], 0);
  for (size_t v : voxels) in_set[v] = 1;
  std::vector<size_t> best, current;
  std::vector<size_t> stack;
  for (size_t seed : voxels) {
    if (in_set[seed] != 1) continue;
    current.clear();
    stack.assign(1, seed);
    in_set[seed] = 2;
    while (!stack.empty()) {
      size_t v = stack.back();
      stack.pop_back();
      current.push_back(v);
      int z = int(v / (size_t(dims[0]) * dims[1]));
      int rem = int(v % (size_t(dims[0]) * dims[1]));
      int y = rem / dims[0], x = rem % dims[0];
      for_each_neighbor26(dims, x, y, z, [&](size_t n) {
        if (in_set[n] == 1) {
          in_set[n] = 2;
          stack.push_back(n);
        }
      });
    }
    if (current.size() > best.size()) best = current;
  }
  std::sort(best.begin(), best.end());
  return best;
}

}  // namespace detail

/// Number of 26-connected foreground components (test audit helper).
inline int connected_components_26(const Mask& m) {
  std::vector<size_t> voxels;
  for (size_t i = 0; i < m.data.size(); ++i)
    if (m.data[i]) voxels.push_back(i);
  std::vector<uint8_t> state(m.data.size(), 0);
  for (size_t v : voxels) state[v] = 1;
  int components = 0;
  std::vector<size_t> stack;
  for (size_t seed : voxels) {
    if (state[seed] != 1) continue;
    ++components;
    stack.assign(1, seed);
    state[seed] = 2;
    while (!stack.empty()) {
      size_t v = stack.back();
      stack.pop_back();
      int z = int(v / (size_t(m.dims[0]) * m.dims[1]));
      int rem = int(v % (size_t(m.dims[0]) * m.dims[1]));
      int y = rem / m.dims[0], x = rem % m.dims[0];
      detail::for_each_neighbor26(m.dims, x, y, z, [&](size_t n) {
        if (state[n] == 1) {
          state[n] = 2;
          stack.push_back(n);
        }
      });
    }
  }
  return components;
}

inline std::pair<Volume, Mask> make_phantom(const PhantomSpec& spec) {
  if (spec.target_fraction <= 0.0 || spec.target_fraction >= 1.0)
    throw std::invalid_argument("make_phantom: target-fraction must lie in (0, 1)");
  if (spec.organ_count < 1)
    throw std::invalid_argument("make_phantom: organ-count must be >= 1");
  if (spec.noise_sigma < 0.0)
    throw std::invalid_argument("make_phantom: noise-sigma must be >= 0");

  Volume vol(spec.dims, spec.spacing, 0.25f);
  Mask mask(spec.dims, spec.spacing, 0);
  const size_t total = vol.size();
  const double target = spec.target_fraction * double(total);

  Rng master(spec.seed);

  // Target organ: solve the radius scale so the largest 26-connected
  // component of the rasterization lands within 10% of the target count
  // (the contract only requires +-50%).
  Rng organ_rng = master.split(0);
  detail::Tube organ = detail::make_tube(organ_rng, spec.dims);
  double sum_r2 = 0;
  for (double r : organ.base_r) sum_r2 += r * r;
  double scale = std::sqrt(target / (3.14159265358979323846 * std::max(sum_r2, 1e-12)));
  std::vector<size_t> organ_voxels;
  for (int iter = 0; iter < 10; ++iter) {
    organ_voxels =
        detail::largest_component_26(detail::rasterize_tube(organ, scale, spec.dims), spec.dims);
    double n = double(organ_voxels.size());
    if (n > 0 && std::abs(n - target) / target <= 0.10) break;
    double factor = std::sqrt(target / std::max(n, 1.0));
    scale *= std::clamp(factor, 0.5, 2.0);
  }
  for (size_t v : organ_voxels) {
    mask.data[v] = 1;
    vol.data[v] = 0.62f;
  }

  // Exclusion zone: organ dilated twice with the 26-neighborhood. Distractor
  // voxels inside it are dropped so the mask stays a single component and
  // distractors never touch it.
  std::vector<uint8_t> excluded(total, 0);
  {
    std::vector<size_t> frontier = organ_voxels;
    for (size_t v : organ_voxels) excluded[v] = 1;
    for (int round = 0; round < 2; ++round) {
      std::vector<size_t> next;
      for (size_t v : frontier) {
        int z = int(v / (size_t(spec.dims[0]) * spec.dims[1]));
        int rem = int(v % (size_t(spec.dims[0]) * spec.dims[1]));
        int y = rem / spec.dims[0], x = rem % spec.dims[0];
        detail::for_each_neighbor26(spec.dims, x, y, z, [&](size_t n) {
          if (!excluded[n]) {
            excluded[n] = 1;
            next.push_back(n);
          }
        });
      }
      frontier = std::move(next);
    }
  }

  for (int k = 1; k < spec.organ_count; ++k) {
    Rng rng_k = master.split(uint64_t(k));
    detail::Tube d = detail::make_tube(rng_k, spec.dims);
    double dscale = scale * rng_k.uniform(0.45, 0.75);
    float level = float(0.50 + 0.18 * rng_k.uniform());
    for (size_t v : detail::rasterize_tube(d, dscale, spec.dims))
      if (!excluded[v]) vol.data[v] = level;
  }

  if (spec.noise_sigma > 0.0) {
    Rng noise_rng = master.split(0x4e4f495345ULL);  // distinct stream for noise
    for (float& x : vol.data) x += float(spec.noise_sigma * noise_rng.normal());
  }

  return {std::move(vol), std::move(mask)};
}

}  // namespace voxseg
