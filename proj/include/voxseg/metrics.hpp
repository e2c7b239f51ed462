#pragma once

// Overlap and surface metrics for binary masks.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "voxseg/parallel.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

/// Dice similarity 2|a.b| / (|a|+|b|). Two empty masks compare equal: 1.
inline double dice(const Mask& a, const Mask& b) {
  if (a.dims != b.dims)
    throw std::invalid_argument("dice: mask dims mismatch");
  size_t na = 0, nb = 0, inter = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    bool fa = a.data[i] != 0, fb = b.data[i] != 0;
    na += fa;
    nb += fb;
    inter += fa && fb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(inter) / double(na + nb);
}

/// Boundary voxels: foreground with at least one 6-neighbor background voxel
/// (neighbors outside the volume do not count).
inline std::vector<std::array<int, 3>> boundary_voxels(const Mask& m) {
  std::vector<std::array<int, 3>> out;
  auto fg = [&](int x, int y, int z) { return m.at(x, y, z) != 0; };
  for (int z = 0; z < m.nz(); ++z)
    for (int y = 0; y < m.ny(); ++y)
      for (int x = 0; x < m.nx(); ++x) {
        if (!fg(x, y, z)) continue;
        bool edge = (x > 0 && !fg(x - 1, y, z)) || (x + 1 < m.nx() && !fg(x + 1, y, z)) ||
                    (y > 0 && !fg(x, y - 1, z)) || (y + 1 < m.ny() && !fg(x, y + 1, z)) ||
                    (z > 0 && !fg(x, y, z - 1)) || (z + 1 < m.nz() && !fg(x, y, z + 1));
        if (edge) out.push_back({x, y, z});
      }
  return out;
}

struct SurfaceDistance {
  double mean_mm = 0.0;
  double std_mm = 0.0;
};

/// Average symmetric surface distance: nearest-boundary distances in mm,
/// pooled over both directions; std is the population deviation of the
/// same pooled sample.
inline SurfaceDistance surface_distance(const Mask& a, const Mask& b) {
  if (a.dims != b.dims)
    throw std::invalid_argument("surface_distance: mask dims mismatch");
  size_t na = 0, nb = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    na += a.data[i] != 0;
    nb += b.data[i] != 0;
  }
  if (na == 0 || nb == 0)
    throw std::invalid_argument("surface_distance: masks must be nonempty");

  auto ba = boundary_voxels(a);
  auto bb = boundary_voxels(b);
  if (ba.empty() || bb.empty())
    throw std::invalid_argument("surface_distance: mask has no boundary voxels");

  const auto& sp = a.spacing;
  auto directed = [&](const std::vector<std::array<int, 3>>& from,
                      const std::vector<std::array<int, 3>>& to,
                      std::vector<double>& dists) {
    size_t base = dists.size();
    dists.resize(base + from.size());
    parallel_for(from.size(), [&](size_t lo, size_t hi) {
      for (size_t i = lo; i < hi; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& t : to) {
          double dx = (from[i][0] - t[0]) * sp[0];
          double dy = (from[i][1] - t[1]) * sp[1];
          double dz = (from[i][2] - t[2]) * sp[2];
          double d2 = dx * dx + dy * dy + dz * dz;
          if (d2 < best) best = d2;
        }
        dists[base + i] = std::sqrt(best);
      }
    });
  };

  std::vector<double> dists;
  dists.reserve(ba.size() + bb.size());
  directed(ba, bb, dists);
  directed(bb, ba, dists);

  double mean = 0;
  for (double d : dists) mean += d;
  mean /= double(dists.size());
  double var = 0;
  for (double d : dists) var += (d - mean) * (d - mean);
  var /= double(dists.size());
  return {mean, std::sqrt(var)};
}

struct DiceReport {
  std::vector<double> per_case;
  double mean = 0, stddev = 0, min = 0, max = 0;
  // (DSC level, fraction of cases strictly above it); non-increasing.
  std::vector<std::pair<double, double>> fraction_above;
};

inline DiceReport make_dice_report(std::vector<double> per_case,
                                   const std::vector<double>& levels = {0.4, 0.5, 0.6, 0.7,
                                                                        0.8, 0.9}) {
  DiceReport r;
  r.per_case = std::move(per_case);
  if (r.per_case.empty()) return r;
  double s = 0;
  r.min = r.per_case[0];
  r.max = r.per_case[0];
  for (double d : r.per_case) {
    s += d;
    r.min = std::min(r.min, d);
    r.max = std::max(r.max, d);
  }
  r.mean = s / double(r.per_case.size());
  double var = 0;
  for (double d : r.per_case) var += (d - r.mean) * (d - r.mean);
  r.stddev = std::sqrt(var / double(r.per_case.size()));
  for (double lv : levels) {
    size_t above = 0;
    for (double d : r.per_case) above += d > lv;
    r.fraction_above.emplace_back(lv, double(above) / double(r.per_case.size()));
  }
  return r;
}

}  // namespace voxseg
