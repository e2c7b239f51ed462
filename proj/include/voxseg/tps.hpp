#pragma once

// Interpolating thin-plate splines fitted to displaced 2D control points,
// and backward bilinear image warping. The spline interpolates the
// displacement field u with u(w_i) = d_i; the deformation is t(x) = x + u(x)
// with u(x) = affine(x) + sum_i c_i phi(|x - w_i|), phi(r) = r^2 ln r.
// Orthogonality side conditions (sum c = 0, sum c x = 0, sum c y = 0) make
// the affine part absorb translations exactly.

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "voxseg/volume.hpp"

namespace voxseg {

struct TPSDeformation {
  std::vector<std::array<double, 2>> control;
  std::vector<std::array<double, 2>> coeffs;  // c_i, (x, y) components
  std::array<double, 3> affine_x{0, 0, 0};    // u_x = a0 + a1 x + a2 y + ...
  std::array<double, 3> affine_y{0, 0, 0};

  static double kernel(double r) { return r > 0 ? r * r * std::log(r) : 0.0; }

  std::array<double, 2> displacement(double x, double y) const {
    double ux = affine_x[0] + affine_x[1] * x + affine_x[2] * y;
    double uy = affine_y[0] + affine_y[1] * x + affine_y[2] * y;
    for (size_t i = 0; i < control.size(); ++i) {
      double dx = x - control[i][0], dy = y - control[i][1];
      double k = kernel(std::sqrt(dx * dx + dy * dy));
      ux += coeffs[i][0] * k;
      uy += coeffs[i][1] * k;
    }
    return {ux, uy};
  }

  std::array<double, 2> apply(double x, double y) const {
    auto [ux, uy] = displacement(x, y);
    return {x + ux, y + uy};
  }
};

namespace detail {

// Partial-pivot Gaussian elimination solving A X = B in place for a small
// dense system with multiple right-hand sides.
inline void solve_dense(std::vector<double>& a, std::vector<double>& b, int n, int nrhs) {
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    double best = std::abs(a[size_t(col) * n + col]);
    for (int r = col + 1; r < n; ++r) {
      double v = std::abs(a[size_t(r) * n + col]);
      if (v > best) {
        best = v;
        pivot = r;
      }
    }
    if (best < 1e-12)
      throw std::invalid_argument("tps_fit: singular system (collinear or duplicate grid)");
    if (pivot != col) {
      for (int c = 0; c < n; ++c) std::swap(a[size_t(pivot) * n + c], a[size_t(col) * n + c]);
      for (int c = 0; c < nrhs; ++c)
        std::swap(b[size_t(pivot) * nrhs + c], b[size_t(col) * nrhs + c]);
    }
    double inv = 1.0 / a[size_t(col) * n + col];
    for (int r = col + 1; r < n; ++r) {
      double f = a[size_t(r) * n + col] * inv;
      if (f == 0.0) continue;
      for (int c = col; c < n; ++c) a[size_t(r) * n + c] -= f * a[size_t(col) * n + c];
      for (int c = 0; c < nrhs; ++c) b[size_t(r) * nrhs + c] -= f * b[size_t(col) * nrhs + c];
    }
  }
  for (int col = n - 1; col >= 0; --col) {
    double inv = 1.0 / a[size_t(col) * n + col];
    for (int c = 0; c < nrhs; ++c) {
      double s = b[size_t(col) * nrhs + c];
      for (int k = col + 1; k < n; ++k) s -= a[size_t(col) * n + k] * b[size_t(k) * nrhs + c];
      b[size_t(col) * nrhs + c] = s * inv;
    }
  }
}

}  // namespace detail

/// Fits the interpolating TPS to control-point displacements. Requires at
/// least three non-collinear control points.
inline TPSDeformation tps_fit(const std::vector<std::array<double, 2>>& grid,
                              const std::vector<std::array<double, 2>>& displacements) {
  const int k = int(grid.size());
  if (k < 3) throw std::invalid_argument("tps_fit: need at least 3 control points");
  if (displacements.size() != grid.size())
    throw std::invalid_argument("tps_fit: control/displacement count mismatch");

  const int n = k + 3;
  std::vector<double> a(size_t(n) * n, 0.0);
  std::vector<double> b(size_t(n) * 2, 0.0);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      double dx = grid[i][0] - grid[j][0], dy = grid[i][1] - grid[j][1];
      a[size_t(i) * n + j] = TPSDeformation::kernel(std::sqrt(dx * dx + dy * dy));
    }
    a[size_t(i) * n + k] = 1.0;
    a[size_t(i) * n + k + 1] = grid[i][0];
    a[size_t(i) * n + k + 2] = grid[i][1];
    a[size_t(k) * n + i] = 1.0;
    a[size_t(k + 1) * n + i] = grid[i][0];
    a[size_t(k + 2) * n + i] = grid[i][1];
    b[size_t(i) * 2 + 0] = displacements[i][0];
    b[size_t(i) * 2 + 1] = displacements[i][1];
  }
  detail::solve_dense(a, b, n, 2);

  TPSDeformation t;
  t.control = grid;
  t.coeffs.resize(k);
  for (int i = 0; i < k; ++i) t.coeffs[i] = {b[size_t(i) * 2], b[size_t(i) * 2 + 1]};
  t.affine_x = {b[size_t(k) * 2], b[size_t(k + 1) * 2], b[size_t(k + 2) * 2]};
  t.affine_y = {b[size_t(k) * 2 + 1], b[size_t(k + 1) * 2 + 1], b[size_t(k + 2) * 2 + 1]};
  return t;
}

/// Bilinear sample with replicate padding; pixel centers at integers.
template <class T>
double bilinear_sample(const Image2<T>& img, double x, double y) {
  int x0 = int(std::floor(x)), y0 = int(std::floor(y));
  double fx = x - x0, fy = y - y0;
  auto cl = [](int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
  double v00 = img.at(cl(x0, img.width), cl(y0, img.height));
  double v10 = img.at(cl(x0 + 1, img.width), cl(y0, img.height));
  double v01 = img.at(cl(x0, img.width), cl(y0 + 1, img.height));
  double v11 = img.at(cl(x0 + 1, img.width), cl(y0 + 1, img.height));
  return (1 - fy) * ((1 - fx) * v00 + fx * v10) + fy * ((1 - fx) * v01 + fx * v11);
}

/// Backward warping: out(x) = in(t(x)), bilinear, replicate padding.
inline ImageF tps_warp(const ImageF& img, const TPSDeformation& t) {
  ImageF out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      auto [sx, sy] = t.apply(double(x), double(y));
      out.at(x, y) = float(bilinear_sample(img, sx, sy));
    }
  return out;
}

}  // namespace voxseg
