#pragma once

// Dinic max-flow on a small s-t graph with double capacities, plus the
// residual reverse-reachability query used to extract the canonical
// minimum cut (minimal sink side).

#include <limits>
#include <queue>
#include <stdexcept>
#include <vector>

namespace voxseg {

class MaxFlowGraph {
 public:
  // node ids: 0..n-1 are internal; source = n, sink = n + 1.
  explicit MaxFlowGraph(int n_nodes) : n_(n_nodes), head_(n_nodes + 2, -1) {}

  int source() const { return n_; }
  int sink() const { return n_ + 1; }

  void add_arc(int from, int to, double cap, double rev_cap = 0.0) {
    push_edge(from, to, cap);
    push_edge(to, from, rev_cap);
  }

  /// Terminal capacities: cost of labeling 1 sits on the source arc, cost
  /// of labeling 0 on the sink arc.
  void add_terminal(int node, double cap_from_source, double cap_to_sink) {
    add_arc(source(), node, cap_from_source);
    add_arc(node, sink(), cap_to_sink);
  }

  double max_flow() {
    double total = 0;
    while (bfs_levels()) {
      iter_.assign(head_.begin(), head_.end());
      double f;
      while ((f = dfs(source(), std::numeric_limits<double>::infinity())) > kEps) total += f;
    }
    return total;
  }

  /// After max_flow(): true iff the node can still reach the sink through
  /// residual capacity. These nodes form the minimal sink side over all
  /// minimum cuts; everything else (including "free" nodes) sits with the
  /// source.
  std::vector<uint8_t> sink_side() const {
    std::vector<uint8_t> reach(n_ + 2, 0);
    std::queue<int> q;
    reach[sink()] = 1;
    q.push(sink());
    while (!q.empty()) {
      int v = q.front();
      q.pop();
      for (int e = head_[v]; e != -1; e = edges_[e].next) {
        // The reverse arc of (v -> w) is (w -> v); w steps to v when that
        // arc has residual capacity.
        int w = edges_[e].to;
        if (!reach[w] && edges_[e ^ 1].cap > kEps) {
          reach[w] = 1;
          q.push(w);
        }
      }
    }
    reach.resize(n_);
    return reach;
  }

 private:
  static constexpr double kEps = 1e-12;

  struct Edge {
    int to;
    int next;
    double cap;
  };

  void push_edge(int from, int to, double cap) {
    edges_.push_back({to, head_[from], cap});
    head_[from] = int(edges_.size()) - 1;
  }

  bool bfs_levels() {
    level_.assign(n_ + 2, -1);
    std::queue<int> q;
    level_[source()] = 0;
    q.push(source());
    while (!q.empty()) {
      int v = q.front();
      q.pop();
      for (int e = head_[v]; e != -1; e = edges_[e].next)
        if (edges_[e].cap > kEps && level_[edges_[e].to] < 0) {
          level_[edges_[e].to] = level_[v] + 1;
          q.push(edges_[e].to);
        }
    }
    return level_[sink()] >= 0;
  }

  double dfs(int v, double limit) {
    if (v == sink()) return limit;
    for (int& e = iter_[v]; e != -1; e = edges_[e].next) {
      Edge& ed = edges_[e];
      if (ed.cap > kEps && level_[ed.to] == level_[v] + 1) {
        double f = dfs(ed.to, std::min(limit, ed.cap));
        if (f > kEps) {
          ed.cap -= f;
          edges_[e ^ 1].cap += f;
          return f;
        }
        level_[ed.to] = -1;  // dead end
      }
    }
    return 0;
  }

  int n_;
  std::vector<int> head_;
  std::vector<Edge> edges_;
  std::vector<int> level_;
  std::vector<int> iter_;
};

}  // namespace voxseg
