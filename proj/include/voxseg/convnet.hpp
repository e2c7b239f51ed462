#pragma once

// Small deterministic ConvNet engine: conv / max-pool / fully-connected /
// relu / dropout layers with a two-way softmax head, trained by SGD with
// momentum. One engine instantiates every network variant in the pipeline;
// variants differ only in input channel count.
//
// All math is double precision internally (gradient checks need the
// headroom); serialized parameters are little-endian 32-bit reals.
// Convolutions run as im2col + a saxpy-style GEMM, which the compiler
// vectorizes well enough for desk-scale training.
//
// Determinism: parameter init, dropout masks, and batch order all come
// from seeded substreams. Batch gradients are accumulated over fixed
// chunks combined in chunk order, so results do not depend on the number
// of worker threads.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "voxseg/parallel.hpp"
#include "voxseg/rng.hpp"

namespace voxseg {

struct Tensor {
  int c = 0, h = 0, w = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int c_, int h_, int w_, double fill = 0.0)
      : c(c_), h(h_), w(w_), data(size_t(c_) * h_ * w_, fill) {}

  size_t size() const { return data.size(); }
  double& at(int ci, int y, int x) { return data[(size_t(ci) * h + y) * w + x]; }
  const double& at(int ci, int y, int x) const { return data[(size_t(ci) * h + y) * w + x]; }
};

enum class LayerKind { conv, pool, fc, dropout, relu, softmax };

struct LayerSpec {
  LayerKind kind;
  int out_channels = 0, kernel_h = 0, kernel_w = 0, stride = 1;  // conv
  bool same_pad = true;                                          // conv
  int window = 0, pool_stride = 0;                               // pool
  int width = 0;                                                 // fc
  double rate = 0.0;                                             // dropout

  static LayerSpec conv2d(int out_channels, int kh, int kw, int stride = 1,
                          bool same_pad = true) {
    LayerSpec l{LayerKind::conv};
    l.out_channels = out_channels;
    l.kernel_h = kh;
    l.kernel_w = kw;
    l.stride = stride;
    l.same_pad = same_pad;
    return l;
  }
  static LayerSpec max_pool(int window, int stride) {
    LayerSpec l{LayerKind::pool};
    l.window = window;
    l.pool_stride = stride;
    return l;
  }
  static LayerSpec fully_connected(int width) {
    LayerSpec l{LayerKind::fc};
    l.width = width;
    return l;
  }
  static LayerSpec drop(double rate) {
    LayerSpec l{LayerKind::dropout};
    l.rate = rate;
    return l;
  }
  static LayerSpec relu() { return LayerSpec{LayerKind::relu}; }
  static LayerSpec softmax2() { return LayerSpec{LayerKind::softmax}; }

  bool operator==(const LayerSpec&) const = default;
};

struct NetworkSpec {
  std::array<int, 3> input_shape{0, 0, 0};  // (channels, height, width)
  std::vector<LayerSpec> layers;
  uint64_t init_seed = 0;

  bool operator==(const NetworkSpec&) const = default;
};

/// Output shape after each layer; throws when shapes do not chain or the
/// head is not a two-way softmax.
inline std::vector<std::array<int, 3>> chain_shapes(const NetworkSpec& spec) {
  auto [c, h, w] = spec.input_shape;
  if (c <= 0 || h <= 0 || w <= 0)
    throw std::invalid_argument("NetworkSpec: input shape must be positive");
  if (spec.layers.empty() || spec.layers.back().kind != LayerKind::softmax)
    throw std::invalid_argument("NetworkSpec: final layer must be a two-way softmax");
  std::vector<std::array<int, 3>> shapes;
  for (size_t li = 0; li < spec.layers.size(); ++li) {
    const LayerSpec& l = spec.layers[li];
    switch (l.kind) {
      case LayerKind::conv: {
        if (l.out_channels <= 0 || l.kernel_h <= 0 || l.kernel_w <= 0 || l.stride <= 0)
          throw std::invalid_argument("NetworkSpec: bad conv parameters");
        int oh, ow;
        if (l.same_pad) {
          oh = (h + l.stride - 1) / l.stride;
          ow = (w + l.stride - 1) / l.stride;
        } else {
          if (h < l.kernel_h || w < l.kernel_w)
            throw std::invalid_argument("NetworkSpec: conv kernel exceeds input");
          oh = (h - l.kernel_h) / l.stride + 1;
          ow = (w - l.kernel_w) / l.stride + 1;
        }
        c = l.out_channels;
        h = oh;
        w = ow;
        break;
      }
      case LayerKind::pool: {
        if (l.window <= 0 || l.pool_stride <= 0)
          throw std::invalid_argument("NetworkSpec: bad pool parameters");
        if (h < l.window || w < l.window)
          throw std::invalid_argument("NetworkSpec: pool window exceeds input");
        h = (h - l.window) / l.pool_stride + 1;
        w = (w - l.window) / l.pool_stride + 1;
        break;
      }
      case LayerKind::fc: {
        if (l.width <= 0) throw std::invalid_argument("NetworkSpec: bad fc width");
        c = l.width;
        h = 1;
        w = 1;
        break;
      }
      case LayerKind::dropout: {
        if (l.rate < 0.0 || l.rate > 1.0)
          throw std::invalid_argument("NetworkSpec: dropout rate must be in [0, 1]");
        break;
      }
      case LayerKind::relu:
        break;
      case LayerKind::softmax: {
        if (li + 1 != spec.layers.size())
          throw std::invalid_argument("NetworkSpec: softmax must be the final layer");
        if (size_t(c) * h * w != 2)
          throw std::invalid_argument("NetworkSpec: softmax head needs exactly 2 logits");
        c = 2;
        h = 1;
        w = 1;
        break;
      }
    }
    shapes.push_back({c, h, w});
  }
  return shapes;
}

/// The constant architecture template; variants differ only in the input
/// channel count. Requires input_size divisible by 8 (three 2x2 pools).
inline NetworkSpec default_network_spec(int in_channels, int input_size = 64,
                                        std::vector<int> conv_filters = {16, 32, 32, 32, 32},
                                        int fc_width = 128, double dropout_rate = 0.5,
                                        uint64_t init_seed = 0) {
  if (conv_filters.size() != 5)
    throw std::invalid_argument("default_network_spec: expected 5 conv filter counts");
  if (input_size % 8 != 0 || input_size < 8)
    throw std::invalid_argument("default_network_spec: input size must be a multiple of 8");
  NetworkSpec spec;
  spec.input_shape = {in_channels, input_size, input_size};
  spec.init_seed = init_seed;
  spec.layers = {
      LayerSpec::conv2d(conv_filters[0], 5, 5), LayerSpec::relu(),
      LayerSpec::max_pool(2, 2),
      LayerSpec::conv2d(conv_filters[1], 5, 5), LayerSpec::relu(),
      LayerSpec::max_pool(2, 2),
      LayerSpec::conv2d(conv_filters[2], 3, 3), LayerSpec::relu(),
      LayerSpec::conv2d(conv_filters[3], 3, 3), LayerSpec::relu(),
      LayerSpec::conv2d(conv_filters[4], 3, 3), LayerSpec::relu(),
      LayerSpec::max_pool(2, 2),
      LayerSpec::fully_connected(fc_width), LayerSpec::relu(),
      LayerSpec::drop(dropout_rate),
      LayerSpec::fully_connected(2),
      LayerSpec::softmax2(),
  };
  chain_shapes(spec);
  return spec;
}

struct ConvNetModel {
  NetworkSpec spec;
  std::vector<std::vector<double>> weights;  // per layer (empty if none)
  std::vector<std::vector<double>> biases;
  std::vector<double> epoch_losses;  // training metadata

  bool operator==(const ConvNetModel& o) const {
    return spec == o.spec && weights == o.weights && biases == o.biases;
  }
};

/// Fresh model with scaled-uniform fan-in init (seeded) and zero biases.
inline ConvNetModel init_model(const NetworkSpec& spec) {
  auto shapes = chain_shapes(spec);
  ConvNetModel m;
  m.spec = spec;
  m.weights.resize(spec.layers.size());
  m.biases.resize(spec.layers.size());
  Rng master(spec.init_seed);
  auto [c, h, w] = spec.input_shape;
  for (size_t li = 0; li < spec.layers.size(); ++li) {
    const LayerSpec& l = spec.layers[li];
    if (l.kind == LayerKind::conv) {
      size_t fan_in = size_t(c) * l.kernel_h * l.kernel_w;
      double s = std::sqrt(3.0 / double(fan_in));
      Rng rng = master.split(li);
      m.weights[li].resize(size_t(l.out_channels) * fan_in);
      for (auto& v : m.weights[li]) v = rng.uniform(-s, s);
      m.biases[li].assign(l.out_channels, 0.0);
    } else if (l.kind == LayerKind::fc) {
      size_t fan_in = size_t(c) * h * w;
      double s = std::sqrt(3.0 / double(fan_in));
      Rng rng = master.split(li);
      m.weights[li].resize(size_t(l.width) * fan_in);
      for (auto& v : m.weights[li]) v = rng.uniform(-s, s);
      m.biases[li].assign(l.width, 0.0);
    }
    c = shapes[li][0];
    h = shapes[li][1];
    w = shapes[li][2];
  }
  return m;
}

namespace detail {

// C[m][n] += A[m][k] * B[k][n], saxpy ordering.
inline void gemm_acc(const double* a, const double* b, double* c, int m_rows, int k_len,
                     int n_cols) {
  for (int m = 0; m < m_rows; ++m) {
    const double* arow = a + size_t(m) * k_len;
    double* crow = c + size_t(m) * n_cols;
    for (int k = 0; k < k_len; ++k) {
      double av = arow[k];
      if (av == 0.0) continue;
      const double* brow = b + size_t(k) * n_cols;
      for (int n = 0; n < n_cols; ++n) crow[n] += av * brow[n];
    }
  }
}

// C[m][k] += A[m][n] * B[k][n] (A·Bᵀ), contiguous dot products.
inline void gemm_abt_acc(const double* a, const double* b, double* c, int m_rows, int n_cols,
                         int k_rows) {
  for (int m = 0; m < m_rows; ++m) {
    const double* arow = a + size_t(m) * n_cols;
    double* crow = c + size_t(m) * k_rows;
    for (int k = 0; k < k_rows; ++k) {
      const double* brow = b + size_t(k) * n_cols;
      double s = 0;
      for (int n = 0; n < n_cols; ++n) s += arow[n] * brow[n];
      crow[k] += s;
    }
  }
}

struct ConvGeometry {
  int oh, ow, pad_lo_h, pad_lo_w;
};

inline ConvGeometry conv_geometry(const LayerSpec& l, int h, int w) {
  ConvGeometry g{};
  if (l.same_pad) {
    g.oh = (h + l.stride - 1) / l.stride;
    g.ow = (w + l.stride - 1) / l.stride;
    int pad_h = std::max(0, (g.oh - 1) * l.stride + l.kernel_h - h);
    int pad_w = std::max(0, (g.ow - 1) * l.stride + l.kernel_w - w);
    g.pad_lo_h = pad_h / 2;
    g.pad_lo_w = pad_w / 2;
  } else {
    g.oh = (h - l.kernel_h) / l.stride + 1;
    g.ow = (w - l.kernel_w) / l.stride + 1;
    g.pad_lo_h = 0;
    g.pad_lo_w = 0;
  }
  return g;
}

// Zero-padded patches as rows of (c*kh*kw) x (oh*ow).
inline void im2col(const Tensor& in, const LayerSpec& l, const ConvGeometry& g,
                   std::vector<double>& cols) {
  const int n = g.oh * g.ow;
  cols.assign(size_t(in.c) * l.kernel_h * l.kernel_w * n, 0.0);
  size_t row = 0;
  for (int ci = 0; ci < in.c; ++ci)
    for (int ky = 0; ky < l.kernel_h; ++ky)
      for (int kx = 0; kx < l.kernel_w; ++kx, ++row) {
        double* dst = cols.data() + row * n;
        for (int oy = 0; oy < g.oh; ++oy) {
          int iy = oy * l.stride - g.pad_lo_h + ky;
          if (iy < 0 || iy >= in.h) continue;
          for (int ox = 0; ox < g.ow; ++ox) {
            int ix = ox * l.stride - g.pad_lo_w + kx;
            if (ix < 0 || ix >= in.w) continue;
            dst[oy * g.ow + ox] = in.at(ci, iy, ix);
          }
        }
      }
}

// Scatter-add of column gradients back onto the input (col2im).
inline void col2im_acc(const std::vector<double>& cols, const LayerSpec& l,
                       const ConvGeometry& g, Tensor& din) {
  const int n = g.oh * g.ow;
  size_t row = 0;
  for (int ci = 0; ci < din.c; ++ci)
    for (int ky = 0; ky < l.kernel_h; ++ky)
      for (int kx = 0; kx < l.kernel_w; ++kx, ++row) {
        const double* src = cols.data() + row * n;
        for (int oy = 0; oy < g.oh; ++oy) {
          int iy = oy * l.stride - g.pad_lo_h + ky;
          if (iy < 0 || iy >= din.h) continue;
          for (int ox = 0; ox < g.ow; ++ox) {
            int ix = ox * l.stride - g.pad_lo_w + kx;
            if (ix < 0 || ix >= din.w) continue;
            din.at(ci, iy, ix) += src[oy * g.ow + ox];
          }
        }
      }
}

struct LayerCache {
  Tensor input;
  std::vector<int> argmax;        // pool
  std::vector<uint8_t> dropmask;  // dropout
};

// Runs the net up to (not including) softmax; returns the two logits.
// Caches layer inputs when `caches` is non-null (training path).
inline std::array<double, 2> forward_sample(const ConvNetModel& m, const Tensor& input,
                                            bool train_mode, Rng* dropout_rng,
                                            std::vector<LayerCache>* caches) {
  Tensor cur = input;
  for (size_t li = 0; li < m.spec.layers.size(); ++li) {
    const LayerSpec& l = m.spec.layers[li];
    if (caches) (*caches)[li].input = cur;
    switch (l.kind) {
      case LayerKind::conv: {
        ConvGeometry g = conv_geometry(l, cur.h, cur.w);
        std::vector<double> cols;
        im2col(cur, l, g, cols);
        Tensor out(l.out_channels, g.oh, g.ow);
        int k_len = cur.c * l.kernel_h * l.kernel_w;
        gemm_acc(m.weights[li].data(), cols.data(), out.data.data(), l.out_channels, k_len,
                 g.oh * g.ow);
        for (int k = 0; k < l.out_channels; ++k) {
          double b = m.biases[li][k];
          double* o = out.data.data() + size_t(k) * g.oh * g.ow;
          for (int i = 0; i < g.oh * g.ow; ++i) o[i] += b;
        }
        cur = std::move(out);
        break;
      }
      case LayerKind::pool: {
        int oh = (cur.h - l.window) / l.pool_stride + 1;
        int ow = (cur.w - l.window) / l.pool_stride + 1;
        Tensor out(cur.c, oh, ow);
        if (caches) (*caches)[li].argmax.assign(out.size(), 0);
        for (int ci = 0; ci < cur.c; ++ci)
          for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
              int best_idx = -1;
              double best = -std::numeric_limits<double>::infinity();
              for (int ky = 0; ky < l.window; ++ky)
                for (int kx = 0; kx < l.window; ++kx) {
                  int iy = oy * l.pool_stride + ky, ix = ox * l.pool_stride + kx;
                  double v = cur.at(ci, iy, ix);
                  if (v > best) {  // first max wins on ties
                    best = v;
                    best_idx = (ci * cur.h + iy) * cur.w + ix;
                  }
                }
              out.at(ci, oy, ox) = best;
              if (caches) (*caches)[li].argmax[(size_t(ci) * oh + oy) * ow + ox] = best_idx;
            }
        cur = std::move(out);
        break;
      }
      case LayerKind::fc: {
        int in_len = int(cur.size());
        Tensor out(l.width, 1, 1);
        const double* wts = m.weights[li].data();
        for (int o = 0; o < l.width; ++o) {
          const double* row = wts + size_t(o) * in_len;
          double s = m.biases[li][o];
          for (int i = 0; i < in_len; ++i) s += row[i] * cur.data[i];
          out.data[o] = s;
        }
        cur = std::move(out);
        break;
      }
      case LayerKind::relu: {
        for (auto& v : cur.data) v = v > 0 ? v : 0.0;
        break;
      }
      case LayerKind::dropout: {
        if (train_mode) {
          double keep = 1.0 - l.rate;
          if (caches) (*caches)[li].dropmask.assign(cur.size(), 0);
          if (keep <= 0.0) {
            std::fill(cur.data.begin(), cur.data.end(), 0.0);
          } else {
            for (size_t i = 0; i < cur.size(); ++i) {
              bool on = dropout_rng ? dropout_rng->uniform() < keep : true;
              if (caches) (*caches)[li].dropmask[i] = on;
              cur.data[i] = on ? cur.data[i] / keep : 0.0;
            }
          }
        }
        break;
      }
      case LayerKind::softmax:
        return {cur.data[0], cur.data[1]};
    }
  }
  throw std::logic_error("forward_sample: network has no softmax head");
}

inline std::array<double, 2> softmax2(const std::array<double, 2>& logits) {
  double mx = std::max(logits[0], logits[1]);
  double e0 = std::exp(logits[0] - mx), e1 = std::exp(logits[1] - mx);
  double z = e0 + e1;
  return {e0 / z, e1 / z};
}

}  // namespace detail

enum class RunMode { train, infer };

/// Class-probability pairs for a batch; dropout is active only in train
/// mode (inverted scaling, so inference needs no rescale).
inline std::vector<std::array<double, 2>> forward(const ConvNetModel& m,
                                                  const std::vector<Tensor>& batch,
                                                  RunMode mode, uint64_t dropout_seed = 0) {
  const auto& in = m.spec.input_shape;
  for (const Tensor& t : batch)
    if (t.c != in[0] || t.h != in[1] || t.w != in[2])
      throw std::invalid_argument("forward: batch shape does not match network input");
  std::vector<std::array<double, 2>> out(batch.size());
  // Per-sample dropout streams drawn up front keep results independent of
  // scheduling.
  std::vector<uint64_t> seeds(batch.size());
  Rng seeder(dropout_seed);
  for (auto& s : seeds) s = seeder.next_u64();
  parallel_for(batch.size(), [&](size_t lo, size_t hi) {
    for (size_t i = lo; i < hi; ++i) {
      Rng rng(seeds[i]);
      auto logits = detail::forward_sample(m, batch[i], mode == RunMode::train,
                                           mode == RunMode::train ? &rng : nullptr, nullptr);
      out[i] = detail::softmax2(logits);
    }
  });
  return out;
}

/// Per-layer outputs in infer mode; the final entry holds the two logits
/// (pre-softmax). Used by tests that inspect feature maps.
inline std::vector<Tensor> forward_activations(const ConvNetModel& m, const Tensor& input) {
  std::vector<detail::LayerCache> caches(m.spec.layers.size());
  auto logits = detail::forward_sample(m, input, false, nullptr, &caches);
  std::vector<Tensor> out;
  for (size_t li = 1; li < caches.size(); ++li) out.push_back(caches[li].input);
  Tensor lt(2, 1, 1);
  lt.data = {logits[0], logits[1]};
  out.push_back(std::move(lt));
  return out;
}

struct Gradients {
  double loss = 0.0;
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;
};

/// Mean cross-entropy over the batch and gradients for every parameter.
/// Dropout masks are drawn from dropout_seed, so the result is a pure
/// function of (model, batch, labels, seed).
inline Gradients loss_and_backward(const ConvNetModel& m, const std::vector<Tensor>& batch,
                                   const std::vector<uint8_t>& labels, uint64_t dropout_seed,
                                   bool train_mode = true) {
  if (batch.empty() || batch.size() != labels.size())
    throw std::invalid_argument("loss_and_backward: batch/label size mismatch");
  const auto& in = m.spec.input_shape;
  for (const Tensor& t : batch)
    if (t.c != in[0] || t.h != in[1] || t.w != in[2])
      throw std::invalid_argument("loss_and_backward: batch shape mismatch");

  const size_t layer_count = m.spec.layers.size();
  auto zero_grads = [&] {
    Gradients g;
    g.weights.resize(layer_count);
    g.biases.resize(layer_count);
    for (size_t li = 0; li < layer_count; ++li) {
      g.weights[li].assign(m.weights[li].size(), 0.0);
      g.biases[li].assign(m.biases[li].size(), 0.0);
    }
    return g;
  };

  std::vector<uint64_t> seeds(batch.size());
  Rng seeder(dropout_seed);
  for (auto& s : seeds) s = seeder.next_u64();
  const double inv_batch = 1.0 / double(batch.size());

  auto chunk_fn = [&](size_t lo, size_t hi) {
    Gradients g = zero_grads();
    std::vector<detail::LayerCache> caches(layer_count);
    for (size_t s = lo; s < hi; ++s) {
      Rng rng(seeds[s]);
      auto logits = detail::forward_sample(m, batch[s], train_mode,
                                           train_mode ? &rng : nullptr, &caches);
      auto probs = detail::softmax2(logits);
      double p_true = std::max(probs[labels[s] ? 1 : 0], 1e-300);
      g.loss += -std::log(p_true) * inv_batch;

      // d(mean CE)/d(logits) = (p - onehot) / batch
      Tensor grad(2, 1, 1);
      grad.data[0] = (probs[0] - (labels[s] ? 0.0 : 1.0)) * inv_batch;
      grad.data[1] = (probs[1] - (labels[s] ? 1.0 : 0.0)) * inv_batch;

      for (int li = int(layer_count) - 1; li >= 0; --li) {
        const LayerSpec& l = m.spec.layers[li];
        const Tensor& x = caches[li].input;
        switch (l.kind) {
          case LayerKind::softmax:
            break;  // fused with the loss above
          case LayerKind::fc: {
            int in_len = int(x.size());
            Tensor dx(x.c, x.h, x.w);
            const double* wts = m.weights[li].data();
            for (int o = 0; o < l.width; ++o) {
              double go = grad.data[o];
              g.biases[li][o] += go;
              double* gw = g.weights[li].data() + size_t(o) * in_len;
              const double* wrow = wts + size_t(o) * in_len;
              for (int i = 0; i < in_len; ++i) {
                gw[i] += go * x.data[i];
                dx.data[i] += go * wrow[i];
              }
            }
            grad = std::move(dx);
            break;
          }
          case LayerKind::relu: {
            for (size_t i = 0; i < grad.size(); ++i)
              if (x.data[i] <= 0) grad.data[i] = 0;
            break;
          }
          case LayerKind::dropout: {
            if (train_mode) {
              double keep = 1.0 - l.rate;
              if (keep <= 0.0) {
                std::fill(grad.data.begin(), grad.data.end(), 0.0);
              } else {
                const auto& mask = caches[li].dropmask;
                for (size_t i = 0; i < grad.size(); ++i)
                  grad.data[i] = mask[i] ? grad.data[i] / keep : 0.0;
              }
            }
            break;
          }
          case LayerKind::pool: {
            Tensor dx(x.c, x.h, x.w);
            const auto& argmax = caches[li].argmax;
            for (size_t i = 0; i < grad.size(); ++i) dx.data[argmax[i]] += grad.data[i];
            grad = std::move(dx);
            break;
          }
          case LayerKind::conv: {
            detail::ConvGeometry geo = detail::conv_geometry(l, x.h, x.w);
            int k_len = x.c * l.kernel_h * l.kernel_w;
            int n = geo.oh * geo.ow;
            std::vector<double> cols;
            detail::im2col(x, l, geo, cols);
            // dW = dY · colsᵀ
            detail::gemm_abt_acc(grad.data.data(), cols.data(), g.weights[li].data(),
                                 l.out_channels, n, k_len);
            for (int k = 0; k < l.out_channels; ++k) {
              const double* gy = grad.data.data() + size_t(k) * n;
              double s2 = 0;
              for (int i = 0; i < n; ++i) s2 += gy[i];
              g.biases[li][k] += s2;
            }
            // dcols = Wᵀ · dY, then scatter back to dX.
            std::vector<double> dcols(size_t(k_len) * n, 0.0);
            const double* wts = m.weights[li].data();
            for (int k = 0; k < l.out_channels; ++k) {
              const double* wrow = wts + size_t(k) * k_len;
              const double* gy = grad.data.data() + size_t(k) * n;
              for (int kk = 0; kk < k_len; ++kk) {
                double wv = wrow[kk];
                if (wv == 0.0) continue;
                double* drow = dcols.data() + size_t(kk) * n;
                for (int i = 0; i < n; ++i) drow[i] += wv * gy[i];
              }
            }
            Tensor dx(x.c, x.h, x.w);
            detail::col2im_acc(dcols, l, geo, dx);
            grad = std::move(dx);
            break;
          }
        }
      }
    }
    return g;
  };

  return parallel_map_reduce<Gradients>(
      batch.size(), zero_grads(), chunk_fn, [&](Gradients acc, const Gradients& part) {
        acc.loss += part.loss;
        for (size_t li = 0; li < layer_count; ++li) {
          for (size_t i = 0; i < acc.weights[li].size(); ++i)
            acc.weights[li][i] += part.weights[li][i];
          for (size_t i = 0; i < acc.biases[li].size(); ++i)
            acc.biases[li][i] += part.biases[li][i];
        }
        return acc;
      });
}

struct SgdParams {
  int epochs = 50;
  double rate = 0.01;
  double momentum = 0.9;
  int batch_size = 32;
  double lr_decay = 0.5;  // multiplied in every lr_step epochs
  int lr_step = 0;        // 0: epochs/3
  uint64_t seed = 0;
};

/// Seeded SGD with momentum and step decay; records per-epoch mean training
/// loss in the returned model.
inline ConvNetModel train_sgd(const NetworkSpec& spec, const std::vector<Tensor>& inputs,
                              const std::vector<uint8_t>& labels, const SgdParams& params) {
  if (inputs.empty() || inputs.size() != labels.size())
    throw std::invalid_argument("train_sgd: dataset empty or size mismatch");
  size_t pos = 0;
  for (uint8_t l : labels) pos += l;
  if (pos == 0 || pos == labels.size())
    throw std::invalid_argument("train_sgd: dataset must contain both classes");

  NetworkSpec seeded = spec;
  seeded.init_seed = Rng(params.seed).split(0xA11).seed();
  ConvNetModel model = init_model(seeded);

  std::vector<std::vector<double>> vel_w(model.weights.size()), vel_b(model.biases.size());
  for (size_t li = 0; li < model.weights.size(); ++li) {
    vel_w[li].assign(model.weights[li].size(), 0.0);
    vel_b[li].assign(model.biases[li].size(), 0.0);
  }

  Rng master(params.seed);
  int lr_step = params.lr_step > 0 ? params.lr_step : std::max(1, params.epochs / 3);
  std::vector<size_t> order(inputs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < params.epochs; ++epoch) {
    double lr = params.rate * std::pow(params.lr_decay, double(epoch / lr_step));
    Rng erng = master.split(0xE000 + uint64_t(epoch));
    erng.shuffle(order);
    double epoch_loss = 0;
    size_t batches = 0;
    for (size_t start = 0; start < order.size(); start += size_t(params.batch_size)) {
      size_t end = std::min(order.size(), start + size_t(params.batch_size));
      std::vector<Tensor> batch;
      std::vector<uint8_t> batch_labels;
      batch.reserve(end - start);
      for (size_t i = start; i < end; ++i) {
        batch.push_back(inputs[order[i]]);
        batch_labels.push_back(labels[order[i]]);
      }
      uint64_t dropout_seed = erng.next_u64();
      Gradients g = loss_and_backward(model, batch, batch_labels, dropout_seed);
      epoch_loss += g.loss;
      ++batches;
      for (size_t li = 0; li < model.weights.size(); ++li) {
        for (size_t i = 0; i < model.weights[li].size(); ++i) {
          vel_w[li][i] = params.momentum * vel_w[li][i] - lr * g.weights[li][i];
          model.weights[li][i] += vel_w[li][i];
        }
        for (size_t i = 0; i < model.biases[li].size(); ++i) {
          vel_b[li][i] = params.momentum * vel_b[li][i] - lr * g.biases[li][i];
          model.biases[li][i] += vel_b[li][i];
        }
      }
    }
    model.epoch_losses.push_back(batches ? epoch_loss / double(batches) : 0.0);
  }
  return model;
}

// --- serialization: magic, version, spec, float32 parameters ---------------

namespace detail {

inline void put_u32f(std::vector<unsigned char>& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back((unsigned char)(v >> (8 * i)));
}
inline void put_u64f(std::vector<unsigned char>& b, uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back((unsigned char)(v >> (8 * i)));
}
inline void put_f32(std::vector<unsigned char>& b, float v) {
  put_u32f(b, std::bit_cast<uint32_t>(v));
}

struct NetReader {
  const std::vector<unsigned char>& b;
  size_t pos = 0;
  uint32_t u32() {
    if (pos + 4 > b.size()) throw std::runtime_error("model file truncated");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(b[pos++]) << (8 * i);
    return v;
  }
  uint64_t u64() {
    if (pos + 8 > b.size()) throw std::runtime_error("model file truncated");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[pos++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
};

}  // namespace detail

inline void save_model(const ConvNetModel& m, const std::filesystem::path& path) {
  std::vector<unsigned char> b;
  b.push_back('V');
  b.push_back('X');
  b.push_back('C');
  b.push_back('N');
  detail::put_u32f(b, 1);  // version
  for (int d : m.spec.input_shape) detail::put_u32f(b, uint32_t(d));
  detail::put_u64f(b, m.spec.init_seed);
  detail::put_u32f(b, uint32_t(m.spec.layers.size()));
  for (const LayerSpec& l : m.spec.layers) {
    detail::put_u32f(b, uint32_t(l.kind));
    detail::put_u32f(b, uint32_t(l.out_channels));
    detail::put_u32f(b, uint32_t(l.kernel_h));
    detail::put_u32f(b, uint32_t(l.kernel_w));
    detail::put_u32f(b, uint32_t(l.stride));
    detail::put_u32f(b, l.same_pad ? 1 : 0);
    detail::put_u32f(b, uint32_t(l.window));
    detail::put_u32f(b, uint32_t(l.pool_stride));
    detail::put_u32f(b, uint32_t(l.width));
    detail::put_f32(b, float(l.rate));
  }
  for (size_t li = 0; li < m.spec.layers.size(); ++li) {
    for (double v : m.weights[li]) detail::put_f32(b, float(v));
    for (double v : m.biases[li]) detail::put_f32(b, float(v));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_model: cannot open " + path.string());
  f.write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
  if (!f) throw std::runtime_error("save_model: write failed for " + path.string());
}

inline ConvNetModel load_model(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_model: cannot open " + path.string());
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
  if (b.size() < 4 || b[0] != 'V' || b[1] != 'X' || b[2] != 'C' || b[3] != 'N')
    throw std::runtime_error("load_model: bad magic in " + path.string());
  detail::NetReader r{b, 4};
  if (r.u32() != 1) throw std::runtime_error("load_model: unsupported version");
  NetworkSpec spec;
  for (int d = 0; d < 3; ++d) spec.input_shape[d] = int(r.u32());
  spec.init_seed = r.u64();
  spec.layers.resize(r.u32());
  for (LayerSpec& l : spec.layers) {
    l.kind = LayerKind(r.u32());
    l.out_channels = int(r.u32());
    l.kernel_h = int(r.u32());
    l.kernel_w = int(r.u32());
    l.stride = int(r.u32());
    l.same_pad = r.u32() != 0;
    l.window = int(r.u32());
    l.pool_stride = int(r.u32());
    l.width = int(r.u32());
    l.rate = double(r.f32());
  }
  ConvNetModel m = init_model(spec);
  for (size_t li = 0; li < spec.layers.size(); ++li) {
    for (double& v : m.weights[li]) v = double(r.f32());
    for (double& v : m.biases[li]) v = double(r.f32());
  }
  m.epoch_losses.clear();
  return m;
}

/// First-layer kernels as a PGM grid (one tile per kernel channel),
/// normalized to the 0..255 range.
inline void export_first_layer_pgm(const ConvNetModel& m, const std::filesystem::path& path) {
  size_t conv_li = SIZE_MAX;
  for (size_t li = 0; li < m.spec.layers.size(); ++li)
    if (m.spec.layers[li].kind == LayerKind::conv) {
      conv_li = li;
      break;
    }
  if (conv_li == SIZE_MAX)
    throw std::invalid_argument("export_first_layer_pgm: no conv layer");
  const LayerSpec& l = m.spec.layers[conv_li];
  int in_c = m.spec.input_shape[0];
  int tiles = l.out_channels * in_c;
  int cols = 1;
  while (cols * cols < tiles) ++cols;
  int rows = (tiles + cols - 1) / cols;
  int tw = l.kernel_w + 1, th = l.kernel_h + 1;
  int width = cols * tw + 1, height = rows * th + 1;

  const auto& wts = m.weights[conv_li];
  double mn = *std::min_element(wts.begin(), wts.end());
  double mx = *std::max_element(wts.begin(), wts.end());
  double range = mx - mn > 0 ? mx - mn : 1.0;

  std::vector<unsigned char> img(size_t(width) * height, 0);
  for (int t = 0; t < tiles; ++t) {
    int k = t / in_c, ci = t % in_c;
    int ty = (t / cols) * th + 1, tx = (t % cols) * tw + 1;
    for (int y = 0; y < l.kernel_h; ++y)
      for (int x = 0; x < l.kernel_w; ++x) {
        double v = wts[((size_t(k) * in_c + ci) * l.kernel_h + y) * l.kernel_w + x];
        img[size_t(ty + y) * width + tx + x] =
            (unsigned char)(std::lround((v - mn) / range * 255.0));
      }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("export_first_layer_pgm: cannot open " + path.string());
  f << "P5\n" << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.data()), std::streamsize(img.size()));
}

}  // namespace voxseg
