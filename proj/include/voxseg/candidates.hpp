#pragma once

// Two-level random-forest cascade that prunes superpixels down to a
// high-recall candidate set. Level 1 scores voxels from local intensity
// features; level 2 scores whole superpixels from aggregate features that
// include the level-1 probability statistics. A superpixel survives when
// its level-2 probability exceeds the cut.
//
// Level-2 training uses out-of-bag level-1 scores for voxels that were in
// the level-1 training set, so the stacked stage never sees resubstitution
// probabilities.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "voxseg/metrics.hpp"
#include "voxseg/random_forest.hpp"
#include "voxseg/superpixel.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

constexpr int kVoxelFeatureCount = 7;
constexpr int kSuperpixelFeatureCount = 18;

/// Level-1 voxel features: intensity, 3x3 in-slice mean and std (replicate
/// padding), in-slice gradient magnitude via central differences, and
/// normalized coordinates.
inline std::array<double, kVoxelFeatureCount> voxel_features(const Volume& v, int x, int y,
                                                             int z) {
  if (!v.in_bounds(x, y, z)) throw std::out_of_range("voxel_features: voxel out of bounds");
  double sum = 0, sum2 = 0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      double t = v.at_clamped(x + dx, y + dy, z);
      sum += t;
      sum2 += t * t;
    }
  double mean = sum / 9.0;
  double var = std::max(0.0, sum2 / 9.0 - mean * mean);
  double gx = 0.5 * (double(v.at_clamped(x + 1, y, z)) - double(v.at_clamped(x - 1, y, z)));
  double gy = 0.5 * (double(v.at_clamped(x, y + 1, z)) - double(v.at_clamped(x, y - 1, z)));
  auto norm = [](int i, int n) { return n > 1 ? double(i) / double(n - 1) : 0.0; };
  return {double(v.at(x, y, z)), mean,
          std::sqrt(var),        std::sqrt(gx * gx + gy * gy),
          norm(x, v.nx()),       norm(y, v.ny()),
          norm(z, v.nz())};
}

/// Level-2 features per superpixel: intensity mean/std/min/max, an 8-bin
/// histogram over the volume's [min, max] range (raw counts, so the bins
/// sum to the area), area, normalized centroid, slice fraction, and the
/// mean/std of the level-1 per-voxel probability.
inline Matrix superpixel_features(const Volume& v, const SuperpixelMap& sp,
                                  const std::vector<double>& level1_prob) {
  if (v.dims != sp.labels.dims)
    throw std::invalid_argument("superpixel_features: dims mismatch");
  if (level1_prob.size() != v.data.size())
    throw std::invalid_argument("superpixel_features: level-1 probability size mismatch");

  float vmin = v.data[0], vmax = v.data[0];
  for (float t : v.data) {
    vmin = std::min(vmin, t);
    vmax = std::max(vmax, t);
  }
  double range = double(vmax) - double(vmin);
  if (range <= 0) range = 1.0;

  const int regions = sp.region_count();
  struct Acc {
    double sum = 0, sum2 = 0, mn = std::numeric_limits<double>::infinity(), mx = -std::numeric_limits<double>::infinity();
    double cx = 0, cy = 0;
    double p_sum = 0, p_sum2 = 0;
    int64_t area = 0;
    std::array<int64_t, 8> hist{};
  };
  std::vector<Acc> acc(regions);

  const auto& l = sp.labels;
  for (int z = 0; z < v.nz(); ++z)
    for (int y = 0; y < v.ny(); ++y)
      for (int x = 0; x < v.nx(); ++x) {
        size_t i = v.index(x, y, z);
        Acc& a = acc[l.data[i]];
        double t = v.data[i];
        a.sum += t;
        a.sum2 += t * t;
        a.mn = std::min(a.mn, t);
        a.mx = std::max(a.mx, t);
        a.cx += x;
        a.cy += y;
        a.p_sum += level1_prob[i];
        a.p_sum2 += level1_prob[i] * level1_prob[i];
        a.area++;
        int bin = int((t - vmin) / range * 8.0);
        a.hist[std::clamp(bin, 0, 7)]++;
      }

  auto norm = [](double c, int n) { return n > 1 ? c / double(n - 1) : 0.0; };
  Matrix m(regions, kSuperpixelFeatureCount);
  for (int r = 0; r < regions; ++r) {
    const Acc& a = acc[r];
    double inv = a.area > 0 ? 1.0 / double(a.area) : 0.0;
    double mean = a.sum * inv;
    double var = std::max(0.0, a.sum2 * inv - mean * mean);
    double p_mean = a.p_sum * inv;
    double p_var = std::max(0.0, a.p_sum2 * inv - p_mean * p_mean);
    double* row = &m.at(r, 0);
    row[0] = mean;
    row[1] = std::sqrt(var);
    row[2] = a.mn;
    row[3] = a.mx;
    for (int b = 0; b < 8; ++b) row[4 + b] = double(a.hist[b]);
    row[12] = double(a.area);
    row[13] = norm(a.cx * inv, v.nx());
    row[14] = norm(a.cy * inv, v.ny());
    row[15] = v.nz() > 1 ? double(sp.region_slice[r]) / double(v.nz() - 1) : 0.0;
    row[16] = p_mean;
    row[17] = std::sqrt(p_var);
  }
  return m;
}

/// Full-volume level-1 probabilities.
inline std::vector<double> level1_voxel_probs(const Volume& v, const RandomForestModel& level1) {
  std::vector<double> probs(v.data.size());
  parallel_for(v.data.size(), [&](size_t lo, size_t hi) {
    for (size_t i = lo; i < hi; ++i) {
      int z = int(i / (size_t(v.nx()) * v.ny()));
      size_t rem = i % (size_t(v.nx()) * v.ny());
      int y = int(rem / v.nx()), x = int(rem % v.nx());
      auto f = voxel_features(v, x, y, z);
      probs[i] = rf_predict_one(level1, f.data());
    }
  });
  return probs;
}

struct CandidateSet {
  std::vector<uint32_t> ids;      // retained superpixel ids, ascending
  std::vector<uint8_t> retained;  // flag per region id
  double recall = std::numeric_limits<double>::quiet_NaN();  // vs gt, if given
  double dsc = std::numeric_limits<double>::quiet_NaN();     // painted mask vs gt
};

inline Mask candidate_mask(const SuperpixelMap& sp, const CandidateSet& cs) {
  return paint_labeling(sp, cs.retained);
}

struct CascadeParams {
  RfParams level1{.tree_count = 32, .max_depth = 10};
  RfParams level2{.tree_count = 32, .max_depth = 10};
  int level1_cap_per_class = 2000;  // per training volume
  double level1_cut = 0.0;          // optional pre-reject: drop superpixels whose
                                    // max level-1 prob is <= this (0 disables)
  double cut = 0.5;                 // final level-2 class-probability cut
  uint64_t seed = 0;
};

struct CascadeModel {
  RandomForestModel level1;
  RandomForestModel level2;
  double level1_cut = 0.0;
  double cut = 0.5;
};

/// Scores every superpixel with the level-2 forest (level-1 statistics
/// included) and returns the per-superpixel probabilities.
inline std::vector<double> cascade_scores(const Volume& v, const SuperpixelMap& sp,
                                          const RandomForestModel& level1,
                                          const RandomForestModel& level2) {
  auto l1 = level1_voxel_probs(v, level1);
  Matrix feats = superpixel_features(v, sp, l1);
  return rf_predict(level2, feats);
}

inline CandidateSet cascade_candidates(const Volume& v, const SuperpixelMap& sp,
                                       const RandomForestModel& level1,
                                       const RandomForestModel& level2, double cut,
                                       double level1_cut = 0.0,
                                       const Mask* gt = nullptr) {
  if (cut <= 0.0 || cut >= 1.0)
    throw std::invalid_argument("cascade_candidates: cut must lie in (0, 1)");
  auto l1 = level1_voxel_probs(v, level1);
  Matrix feats = superpixel_features(v, sp, l1);
  auto probs = rf_predict(level2, feats);

  std::vector<double> l1_max(sp.region_count(), 0.0);
  if (level1_cut > 0.0)
    for (size_t i = 0; i < l1.size(); ++i)
      l1_max[sp.labels.data[i]] = std::max(l1_max[sp.labels.data[i]], l1[i]);

  CandidateSet cs;
  cs.retained.assign(sp.region_count(), 0);
  for (int r = 0; r < sp.region_count(); ++r) {
    if (level1_cut > 0.0 && l1_max[r] <= level1_cut) continue;
    if (probs[r] > cut) {
      cs.retained[r] = 1;
      cs.ids.push_back(uint32_t(r));
    }
  }
  if (gt) {
    Mask painted = candidate_mask(sp, cs);
    int64_t gt_n = 0, inter = 0;
    for (size_t i = 0; i < gt->data.size(); ++i) {
      if (gt->data[i]) {
        ++gt_n;
        inter += painted.data[i] != 0;
      }
    }
    cs.recall = gt_n > 0 ? double(inter) / double(gt_n) : 1.0;
    cs.dsc = dice(painted, *gt);
  }
  return cs;
}

struct CascadeTrainingCase {
  const Volume* volume = nullptr;
  const SuperpixelMap* sp = nullptr;
  const Mask* gt = nullptr;
  const OptimalLabeling* opt = nullptr;
};

/// Trains the two-level cascade. Level-1 voxel samples are balanced per
/// volume up to the cap; level-2 trains one row per superpixel with labels
/// from the optimal labeling.
inline CascadeModel train_cascade(const std::vector<CascadeTrainingCase>& cases,
                                  const CascadeParams& params) {
  if (cases.empty()) throw std::invalid_argument("train_cascade: no training cases");
  Rng master(params.seed);

  // --- level 1: sampled voxel features -------------------------------------
  Matrix l1_features;
  std::vector<uint8_t> l1_labels;
  // (case index, voxel index) per level-1 training row, for OOB lookup.
  std::vector<std::pair<int, size_t>> l1_rows;
  for (int c = 0; c < int(cases.size()); ++c) {
    const Volume& v = *cases[c].volume;
    const Mask& gt = *cases[c].gt;
    std::vector<size_t> pos, neg;
    for (size_t i = 0; i < gt.data.size(); ++i) (gt.data[i] ? pos : neg).push_back(i);
    Rng rng = master.split(0x100 + c);
    rng.shuffle(pos);
    rng.shuffle(neg);
    size_t cap = size_t(params.level1_cap_per_class);
    pos.resize(std::min(pos.size(), cap));
    neg.resize(std::min(neg.size(), cap));
    for (int cls = 0; cls < 2; ++cls) {
      for (size_t i : (cls ? pos : neg)) {
        int z = int(i / (size_t(v.nx()) * v.ny()));
        size_t rem = i % (size_t(v.nx()) * v.ny());
        int y = int(rem / v.nx()), x = int(rem % v.nx());
        auto f = voxel_features(v, x, y, z);
        l1_features.push_row(std::vector<double>(f.begin(), f.end()));
        l1_labels.push_back(uint8_t(cls));
        l1_rows.emplace_back(c, i);
      }
    }
  }
  RfParams l1_params = params.level1;
  l1_params.seed = master.split(1).seed();
  CascadeModel model;
  model.level1 = train_rf(l1_features, l1_labels, l1_params);
  model.level1_cut = params.level1_cut;
  model.cut = params.cut;

  // --- level 2: per-superpixel rows with OOB level-1 statistics ------------
  std::vector<double> oob = rf_predict_oob(model.level1, l1_features);
  std::vector<std::unordered_map<size_t, double>> oob_by_case(cases.size());
  for (size_t r = 0; r < l1_rows.size(); ++r)
    oob_by_case[l1_rows[r].first][l1_rows[r].second] = oob[r];

  Matrix l2_features;
  std::vector<uint8_t> l2_labels;
  for (int c = 0; c < int(cases.size()); ++c) {
    const Volume& v = *cases[c].volume;
    const SuperpixelMap& sp = *cases[c].sp;
    auto probs = level1_voxel_probs(v, model.level1);
    for (auto& [voxel, p] : oob_by_case[c]) probs[voxel] = p;
    Matrix feats = superpixel_features(v, sp, probs);
    for (size_t r = 0; r < feats.rows; ++r) {
      l2_features.push_row(std::vector<double>(feats.row(r), feats.row(r) + feats.cols));
      l2_labels.push_back(cases[c].opt->label[r]);
    }
  }
  RfParams l2_params = params.level2;
  l2_params.seed = master.split(2).seed();
  model.level2 = train_rf(l2_features, l2_labels, l2_params);
  return model;
}

/// Largest cut in the grid whose pooled training recall still meets the
/// target; falls back to the smallest grid value.
inline double calibrate_cascade_cut(const CascadeModel& model,
                                    const std::vector<CascadeTrainingCase>& cases,
                                    double target_recall, std::vector<double> grid) {
  if (grid.empty()) throw std::invalid_argument("calibrate_cascade_cut: empty grid");
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  struct Scored {
    std::vector<double> probs;
    const SuperpixelMap* sp;
    const Mask* gt;
  };
  std::vector<Scored> scored;
  for (const auto& c : cases)
    scored.push_back({cascade_scores(*c.volume, *c.sp, model.level1, model.level2), c.sp, c.gt});

  double best = grid.front();
  for (double cut : grid) {
    int64_t gt_total = 0, covered = 0;
    for (const auto& s : scored) {
      for (size_t i = 0; i < s.gt->data.size(); ++i) {
        if (!s.gt->data[i]) continue;
        ++gt_total;
        covered += s.probs[s.sp->labels.data[i]] > cut;
      }
    }
    double recall = gt_total > 0 ? double(covered) / double(gt_total) : 1.0;
    if (recall >= target_recall) best = std::max(best, cut);
  }
  return best;
}

}  // namespace voxseg
