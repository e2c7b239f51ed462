#pragma once

// Random forest of axis-aligned binary decision trees: Gini splits,
// per-tree bootstrap bagging, sqrt(d) feature subsampling per split.
// Everything is seeded through substreams, so training is deterministic
// and independent of evaluation order.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <vector>

#include "voxseg/parallel.hpp"
#include "voxseg/rng.hpp"

namespace voxseg {

struct Matrix {
  size_t rows = 0, cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double& at(size_t r, size_t c) { return data[r * cols + c]; }
  const double& at(size_t r, size_t c) const { return data[r * cols + c]; }
  const double* row(size_t r) const { return data.data() + r * cols; }

  void push_row(const std::vector<double>& r) {
    if (cols == 0) cols = r.size();
    if (r.size() != cols) throw std::invalid_argument("Matrix: ragged row");
    data.insert(data.end(), r.begin(), r.end());
    ++rows;
  }
};

struct RfParams {
  int tree_count = 32;
  int max_depth = 10;
  int min_samples_split = 2;
  bool bootstrap = true;
  uint64_t seed = 0;
};

struct RfNode {
  int32_t feature = -1;  // -1: leaf
  double threshold = 0.0;
  int32_t left = -1, right = -1;
  double prob = 0.0;  // class-1 probability at leaves

  bool operator==(const RfNode&) const = default;
};

struct RandomForestModel {
  int feature_count = 0;
  std::vector<std::vector<RfNode>> trees;          // preorder node records
  std::vector<std::vector<uint8_t>> in_bag;        // per tree, per training row
  size_t training_rows = 0;

  bool operator==(const RandomForestModel& o) const {
    return feature_count == o.feature_count && trees == o.trees;
  }
};

namespace detail {

inline double tree_leaf_prob(const std::vector<RfNode>& tree, const double* x) {
  int n = 0;
  while (tree[n].feature >= 0)
    n = x[tree[n].feature] <= tree[n].threshold ? tree[n].left : tree[n].right;
  return tree[n].prob;
}

struct TreeBuilder {
  const Matrix& features;
  const std::vector<uint8_t>& labels;
  const RfParams& params;
  int feature_subset;
  Rng rng;
  std::vector<RfNode> nodes;

  int build(std::vector<uint32_t>& idx, int begin, int end, int depth) {
    int node_id = int(nodes.size());
    nodes.emplace_back();
    int total = end - begin;
    int pos = 0;
    for (int i = begin; i < end; ++i) pos += labels[idx[i]];

    bool pure = pos == 0 || pos == total;
    if (pure || depth >= params.max_depth || total < params.min_samples_split) {
      nodes[node_id].prob = double(pos) / double(total);
      return node_id;
    }

    // Candidate features: partial Fisher-Yates draw without replacement.
    std::vector<int> feats(features.cols);
    for (size_t f = 0; f < features.cols; ++f) feats[f] = int(f);
    for (int k = 0; k < feature_subset; ++k) {
      int j = k + int(rng.uniform_int(feats.size() - k));
      std::swap(feats[k], feats[j]);
    }

    int best_feature = -1;
    double best_threshold = 0, best_impurity = std::numeric_limits<double>::infinity();
    std::vector<std::pair<double, uint8_t>> vals(total);
    for (int fi = 0; fi < feature_subset; ++fi) {
      int f = feats[fi];
      for (int i = 0; i < total; ++i) {
        uint32_t r = idx[begin + i];
        vals[i] = {features.at(r, f), labels[r]};
      }
      std::sort(vals.begin(), vals.end());
      int left_n = 0, left_pos = 0;
      for (int i = 0; i + 1 < total; ++i) {
        ++left_n;
        left_pos += vals[i].second;
        if (vals[i].first == vals[i + 1].first) continue;
        int right_n = total - left_n, right_pos = pos - left_pos;
        auto gini = [](int n, int p) {
          double q = double(p) / double(n);
          return 2.0 * q * (1.0 - q);
        };
        double imp = (left_n * gini(left_n, left_pos) + right_n * gini(right_n, right_pos)) /
                     double(total);
        if (imp < best_impurity) {
          best_impurity = imp;
          best_feature = f;
          best_threshold = 0.5 * (vals[i].first + vals[i + 1].first);
        }
      }
    }

    if (best_feature < 0) {  // no splittable feature in the subset
      nodes[node_id].prob = double(pos) / double(total);
      return node_id;
    }

    auto mid_it = std::stable_partition(
        idx.begin() + begin, idx.begin() + end,
        [&](uint32_t r) { return features.at(r, best_feature) <= best_threshold; });
    int mid = int(mid_it - idx.begin());
    if (mid == begin || mid == end) {  // threshold failed to separate (fp ties)
      nodes[node_id].prob = double(pos) / double(total);
      return node_id;
    }

    nodes[node_id].feature = best_feature;
    nodes[node_id].threshold = best_threshold;
    int left = build(idx, begin, mid, depth + 1);
    int right = build(idx, mid, end, depth + 1);
    nodes[node_id].left = left;
    nodes[node_id].right = right;
    return node_id;
  }
};

}  // namespace detail

inline RandomForestModel train_rf(const Matrix& features, const std::vector<uint8_t>& labels,
                                  const RfParams& params) {
  if (features.rows == 0 || features.rows != labels.size())
    throw std::invalid_argument("train_rf: features/labels size mismatch");
  size_t pos = 0;
  for (uint8_t l : labels) pos += l;
  if (pos == 0 || pos == labels.size())
    throw std::invalid_argument("train_rf: training data must contain both classes");
  if (params.tree_count < 1) throw std::invalid_argument("train_rf: tree_count must be >= 1");

  RandomForestModel model;
  model.feature_count = int(features.cols);
  model.training_rows = features.rows;
  model.trees.resize(params.tree_count);
  model.in_bag.assign(params.tree_count, std::vector<uint8_t>(features.rows, 0));

  int subset = std::max(1, int(std::ceil(std::sqrt(double(features.cols)))));
  Rng master(params.seed);

  parallel_for(size_t(params.tree_count), [&](size_t lo, size_t hi) {
    for (size_t t = lo; t < hi; ++t) {
      Rng tree_rng = master.split(t);
      std::vector<uint32_t> idx;
      idx.reserve(features.rows);
      if (params.bootstrap) {
        for (size_t i = 0; i < features.rows; ++i) {
          uint32_t r = uint32_t(tree_rng.uniform_int(features.rows));
          idx.push_back(r);
          model.in_bag[t][r] = 1;
        }
      } else {
        for (size_t i = 0; i < features.rows; ++i) {
          idx.push_back(uint32_t(i));
          model.in_bag[t][i] = 1;
        }
      }
      // A bootstrap draw can miss one class; fall back to the full set so
      // every tree remains a two-class learner.
      size_t bag_pos = 0;
      for (uint32_t r : idx) bag_pos += labels[r];
      if (bag_pos == 0 || bag_pos == idx.size()) {
        idx.clear();
        for (size_t i = 0; i < features.rows; ++i) {
          idx.push_back(uint32_t(i));
          model.in_bag[t][i] = 1;
        }
      }
      detail::TreeBuilder builder{features, labels, params, subset, tree_rng.split(0x7ee)};
      builder.build(idx, 0, int(idx.size()), 0);
      model.trees[t] = std::move(builder.nodes);
    }
  });
  return model;
}

inline double rf_predict_one(const RandomForestModel& m, const double* x) {
  double s = 0;
  for (const auto& tree : m.trees) s += detail::tree_leaf_prob(tree, x);
  return s / double(m.trees.size());
}

inline std::vector<double> rf_predict(const RandomForestModel& m, const Matrix& features) {
  if (int(features.cols) != m.feature_count)
    throw std::invalid_argument("rf_predict: feature width mismatch");
  std::vector<double> out(features.rows);
  parallel_for(features.rows, [&](size_t lo, size_t hi) {
    for (size_t r = lo; r < hi; ++r) out[r] = rf_predict_one(m, features.row(r));
  });
  return out;
}

/// Out-of-bag predictions for the model's own training matrix; rows that are
/// in-bag everywhere fall back to the full-forest mean.
inline std::vector<double> rf_predict_oob(const RandomForestModel& m, const Matrix& features) {
  if (int(features.cols) != m.feature_count)
    throw std::invalid_argument("rf_predict_oob: feature width mismatch");
  if (features.rows != m.training_rows)
    throw std::invalid_argument("rf_predict_oob: not the training matrix");
  std::vector<double> out(features.rows);
  parallel_for(features.rows, [&](size_t lo, size_t hi) {
    for (size_t r = lo; r < hi; ++r) {
      double s = 0;
      int n = 0;
      for (size_t t = 0; t < m.trees.size(); ++t) {
        if (m.in_bag[t][r]) continue;
        s += detail::tree_leaf_prob(m.trees[t], features.row(r));
        ++n;
      }
      out[r] = n > 0 ? s / n : rf_predict_one(m, features.row(r));
    }
  });
  return out;
}

// --- serialization: versioned flat binary ----------------------------------

namespace detail {

inline void put_u32(std::vector<unsigned char>& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back((unsigned char)(v >> (8 * i)));
}
inline void put_i32(std::vector<unsigned char>& b, int32_t v) { put_u32(b, uint32_t(v)); }
inline void put_f64(std::vector<unsigned char>& b, double v) {
  uint64_t w = std::bit_cast<uint64_t>(v);
  for (int i = 0; i < 8; ++i) b.push_back((unsigned char)(w >> (8 * i)));
}

struct ByteReader {
  const std::vector<unsigned char>& b;
  size_t pos = 0;
  uint32_t u32() {
    if (pos + 4 > b.size()) throw std::runtime_error("forest file truncated");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(b[pos++]) << (8 * i);
    return v;
  }
  int32_t i32() { return int32_t(u32()); }
  double f64() {
    if (pos + 8 > b.size()) throw std::runtime_error("forest file truncated");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[pos++]) << (8 * i);
    return std::bit_cast<double>(v);
  }
};

}  // namespace detail

inline void save_forest(const RandomForestModel& m, const std::filesystem::path& path) {
  std::vector<unsigned char> b;
  b.push_back('V');
  b.push_back('X');
  b.push_back('R');
  b.push_back('F');
  detail::put_u32(b, 1);  // version
  detail::put_u32(b, uint32_t(m.feature_count));
  detail::put_u32(b, uint32_t(m.trees.size()));
  for (const auto& tree : m.trees) {
    detail::put_u32(b, uint32_t(tree.size()));
    for (const auto& n : tree) {
      detail::put_i32(b, n.feature);
      detail::put_f64(b, n.threshold);
      detail::put_i32(b, n.left);
      detail::put_i32(b, n.right);
      detail::put_f64(b, n.prob);
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_forest: cannot open " + path.string());
  f.write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
  if (!f) throw std::runtime_error("save_forest: write failed for " + path.string());
}

inline RandomForestModel load_forest(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_forest: cannot open " + path.string());
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
  if (b.size() < 4 || b[0] != 'V' || b[1] != 'X' || b[2] != 'R' || b[3] != 'F')
    throw std::runtime_error("load_forest: bad magic in " + path.string());
  detail::ByteReader r{b, 4};
  uint32_t version = r.u32();
  if (version != 1) throw std::runtime_error("load_forest: unsupported version");
  RandomForestModel m;
  m.feature_count = int(r.u32());
  m.trees.resize(r.u32());
  for (auto& tree : m.trees) {
    tree.resize(r.u32());
    for (auto& n : tree) {
      n.feature = r.i32();
      n.threshold = r.f64();
      n.left = r.i32();
      n.right = r.i32();
      n.prob = r.f64();
    }
  }
  return m;
}

}  // namespace voxseg
