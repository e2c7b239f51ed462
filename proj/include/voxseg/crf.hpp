#pragma once

// Structured prediction over the candidate-superpixel graph. The regional
// (unary) term comes from per-superpixel probabilities; the boundary
// (pairwise) term comes from an edge ConvNet that scores neighboring pairs
// as same/different. The Potts energy is attractive (weights >= 0), so an
// exact global minimizer comes out of one max-flow/min-cut.
//
// Labels on ties: the solver returns the minimal sink side, i.e. the
// lexicographically smallest label vector among minimizers; nodes untouched
// by residual paths stay at label 0.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "voxseg/aggregate.hpp"
#include "voxseg/candidates.hpp"
#include "voxseg/convnet.hpp"
#include "voxseg/maxflow.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/patchnet.hpp"
#include "voxseg/superpixel.hpp"
#include "voxseg/tps.hpp"

namespace voxseg {

struct EdgeSample {
  uint32_t a = 0, b = 0;  // adjacency pair among candidates
  uint8_t label = 0;      // same = 0, different = 1
  Tensor image;           // CT (+ P0) crop of the joint bounding box
};

namespace detail {

inline Tensor edge_pair_crop(const Volume& v, const Volume* p0, const SuperpixelMap& sp,
                             uint32_t a, uint32_t b, int out_size,
                             const VolumeNormalization& norm) {
  const auto& l = sp.labels;
  int z = sp.region_slice[a];
  int x0 = l.nx(), x1 = -1, y0 = l.ny(), y1 = -1;
  for (int y = 0; y < l.ny(); ++y)
    for (int x = 0; x < l.nx(); ++x) {
      uint32_t id = l.at(x, y, z);
      if (id == a || id == b) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
    }
  double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1);
  double side = double(std::max(x1 - x0 + 1, y1 - y0 + 1));
  ImageF ct = extract_slice(v, Axis::axial, z);
  ImageF pr;
  if (p0) pr = extract_slice(*p0, Axis::axial, z);
  Tensor t(p0 ? 2 : 1, out_size, out_size);
  for (int j = 0; j < out_size; ++j) {
    double sy = cy - 0.5 * side + (j + 0.5) * side / out_size;
    for (int i = 0; i < out_size; ++i) {
      double sx = cx - 0.5 * side + (i + 0.5) * side / out_size;
      t.at(0, j, i) = norm.apply(bilinear_sample(ct, sx, sy));
      if (p0) t.at(1, j, i) = 2.0 * bilinear_sample(pr, sx, sy) - 1.0;
    }
  }
  return t;
}

}  // namespace detail

/// Adjacency edges among retained candidates, in (a, b) order.
inline std::vector<RegionAdjacency::Edge> candidate_edges(const RegionAdjacency& adj,
                                                          const CandidateSet& cs) {
  std::vector<RegionAdjacency::Edge> out;
  for (const auto& e : adj.edges)
    if (cs.retained[e.a] && cs.retained[e.b]) out.push_back(e);
  return out;
}

/// One sample per candidate adjacency edge; label from the optimal
/// superpixel labels (same = 0, different = 1).
inline std::vector<EdgeSample> build_edge_dataset(const Volume& v, const Volume* p0,
                                                  const SuperpixelMap& sp,
                                                  const RegionAdjacency& adj,
                                                  const CandidateSet& cs,
                                                  const OptimalLabeling& opt, int out_size) {
  VolumeNormalization norm = compute_normalization(v);
  std::vector<EdgeSample> samples;
  for (const auto& e : candidate_edges(adj, cs)) {
    EdgeSample s;
    s.a = e.a;
    s.b = e.b;
    s.label = uint8_t(opt.label[e.a] != opt.label[e.b]);
    s.image = detail::edge_pair_crop(v, p0, sp, e.a, e.b, out_size, norm);
    samples.push_back(std::move(s));
  }
  return samples;
}

/// Same-label probability per candidate edge (class 0 of the edge net).
inline std::vector<double> edge_same_probs(const ConvNetModel& model, const Volume& v,
                                           const Volume* p0, const SuperpixelMap& sp,
                                           const std::vector<RegionAdjacency::Edge>& edges,
                                           int batch_size = 64) {
  const int want_channels = p0 ? 2 : 1;
  if (model.spec.input_shape[0] != want_channels)
    throw std::invalid_argument("edge_same_probs: model channel count mismatch");
  const int out_size = model.spec.input_shape[1];
  VolumeNormalization norm = compute_normalization(v);
  std::vector<double> q(edges.size());
  std::vector<Tensor> batch;
  size_t start = 0;
  for (size_t i = 0; i < edges.size(); ++i) {
    batch.push_back(detail::edge_pair_crop(v, p0, sp, edges[i].a, edges[i].b, out_size, norm));
    if (int(batch.size()) >= batch_size || i + 1 == edges.size()) {
      auto probs = forward(model, batch, RunMode::infer);
      for (size_t b = 0; b < batch.size(); ++b) q[start + b] = probs[b][0];
      start = i + 1;
      batch.clear();
    }
  }
  return q;
}

struct CrfGraph {
  std::vector<uint32_t> node_ids;              // superpixel id per node
  std::vector<std::array<double, 2>> unary;    // (cost_label0, cost_label1)
  struct Edge {
    int a, b;        // node indices
    double weight;   // >= 0 (attractive Potts)
  };
  std::vector<Edge> edges;
  double lambda = 0.0;
};

/// Unary costs (-ln(1-p), -ln p) from the regional probabilities (aligned
/// with cs.ids) and pairwise weights lambda * -ln(1 - q_same) * boundary
/// length. Probabilities are clamped to [1e-6, 1 - 1e-6].
inline CrfGraph build_crf(const CandidateSet& cs, const std::vector<double>& regional_probs,
                          const std::vector<RegionAdjacency::Edge>& edges,
                          const std::vector<double>& edge_same, double lambda) {
  if (regional_probs.size() != cs.ids.size())
    throw std::invalid_argument("build_crf: regional probability count mismatch");
  if (edge_same.size() != edges.size())
    throw std::invalid_argument("build_crf: edge probability count mismatch");
  if (lambda < 0) throw std::invalid_argument("build_crf: lambda must be >= 0");

  constexpr double kEps = 1e-6;
  CrfGraph g;
  g.lambda = lambda;
  g.node_ids = cs.ids;
  std::vector<int> node_of(cs.retained.size(), -1);
  for (size_t i = 0; i < cs.ids.size(); ++i) node_of[cs.ids[i]] = int(i);
  g.unary.resize(cs.ids.size());
  for (size_t i = 0; i < cs.ids.size(); ++i) {
    double p = std::clamp(regional_probs[i], kEps, 1.0 - kEps);
    g.unary[i] = {-std::log(1.0 - p), -std::log(p)};
  }
  for (size_t e = 0; e < edges.size(); ++e) {
    int a = node_of[edges[e].a], b = node_of[edges[e].b];
    if (a < 0 || b < 0)
      throw std::invalid_argument("build_crf: edge endpoint is not a candidate");
    double q = std::clamp(edge_same[e], kEps, 1.0 - kEps);
    double w = lambda * std::max(0.0, -std::log(1.0 - q)) * double(edges[e].boundary_len);
    g.edges.push_back({a, b, w});
  }
  return g;
}

inline double crf_energy(const CrfGraph& g, const std::vector<uint8_t>& labels) {
  double e = 0;
  for (size_t i = 0; i < g.unary.size(); ++i) e += g.unary[i][labels[i] ? 1 : 0];
  for (const auto& edge : g.edges)
    if (labels[edge.a] != labels[edge.b]) e += edge.weight;
  return e;
}

/// Exact global minimizer of the Potts energy by one s-t min cut.
inline std::vector<uint8_t> max_flow_min_cut(const CrfGraph& g) {
  MaxFlowGraph mf(int(g.unary.size()));
  for (size_t i = 0; i < g.unary.size(); ++i)
    mf.add_terminal(int(i), g.unary[i][1], g.unary[i][0]);
  for (const auto& e : g.edges)
    if (e.weight > 0) mf.add_arc(e.a, e.b, e.weight, e.weight);
  mf.max_flow();
  return mf.sink_side();  // label 1 = still connected to the sink
}

/// Paints a CRF labeling back onto voxels.
inline Mask crf_mask(const SuperpixelMap& sp, const CrfGraph& g,
                     const std::vector<uint8_t>& labels) {
  std::vector<uint8_t> per_region(sp.region_count(), 0);
  for (size_t i = 0; i < g.node_ids.size(); ++i) per_region[g.node_ids[i]] = labels[i];
  return paint_labeling(sp, per_region);
}

/// Everything needed to run the CRF on one volume during calibration.
struct CrfProblem {
  const SuperpixelMap* sp = nullptr;
  const Mask* gt = nullptr;
  CandidateSet cs;
  std::vector<double> regional_probs;          // aligned with cs.ids
  std::vector<RegionAdjacency::Edge> edges;    // among candidates
  std::vector<double> edge_same;               // aligned with edges
};

/// Grid-search for the boundary weight: the lambda with the highest mean
/// training DSC wins, ties to the smaller value. Emits the full sweep when
/// sweep_out is non-null as (lambda, mean DSC) pairs.
inline double grid_search_lambda(const std::vector<CrfProblem>& problems,
                                 std::vector<double> grid,
                                 std::vector<std::pair<double, double>>* sweep_out = nullptr) {
  if (grid.empty()) throw std::invalid_argument("grid_search_lambda: empty grid");
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  double best_lambda = grid.front();
  double best_mean = -1;
  for (double lambda : grid) {
    double mean = 0;
    for (const auto& pr : problems) {
      CrfGraph g = build_crf(pr.cs, pr.regional_probs, pr.edges, pr.edge_same, lambda);
      auto labels = max_flow_min_cut(g);
      mean += dice(crf_mask(*pr.sp, g, labels), *pr.gt);
    }
    mean /= problems.empty() ? 1.0 : double(problems.size());
    if (sweep_out) sweep_out->emplace_back(lambda, mean);
    if (mean > best_mean) {
      best_mean = mean;
      best_lambda = lambda;
    }
  }
  return best_lambda;
}

}  // namespace voxseg
