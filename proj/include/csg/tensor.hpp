#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace csg {

// Dense H x W x C block of doubles, row-major with channel fastest.
struct LatentTensor {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  LatentTensor() = default;
  LatentTensor(int h, int w, int c)
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * w * c, 0.0) {
    if (h <= 0 || w <= 0 || c <= 0)
      throw std::invalid_argument("LatentTensor: dimensions must be positive.");
  }

  std::size_t size() const { return data.size(); }

  std::size_t index(int h, int w, int c) const {
    return (static_cast<std::size_t>(h) * width + w) * channels + c;
  }

  double& at(int h, int w, int c) { return data[index(h, w, c)]; }
  double at(int h, int w, int c) const { return data[index(h, w, c)]; }

  bool same_shape(const LatentTensor& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

inline void require_same_shape(const LatentTensor& a, const LatentTensor& b,
                               const char* who) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(who) + ": shape mismatch.");
}

inline LatentTensor zeros_like(const LatentTensor& a) {
  return LatentTensor(a.height, a.width, a.channels);
}

inline double mean_squared_error(const LatentTensor& a, const LatentTensor& b) {
  require_same_shape(a, b, "mean_squared_error");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

inline double max_abs_difference(const LatentTensor& a, const LatentTensor& b) {
  require_same_shape(a, b, "max_abs_difference");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

inline bool all_finite(const LatentTensor& a) {
  for (double v : a.data)
    if (!std::isfinite(v)) return false;
  return true;
}

// H x W field of doubles (masks, probability maps).
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<double> v;

  Grid() = default;
  Grid(int h, int w, double fill = 0.0)
      : height(h), width(w), v(static_cast<std::size_t>(h) * w, fill) {
    if (h <= 0 || w <= 0)
      throw std::invalid_argument("Grid: dimensions must be positive.");
  }

  std::size_t size() const { return v.size(); }
  double& at(int h, int w) { return v[static_cast<std::size_t>(h) * width + w]; }
  double at(int h, int w) const { return v[static_cast<std::size_t>(h) * width + w]; }
};

// H x W field of flags.
struct BoolGrid {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> v;

  BoolGrid() = default;
  BoolGrid(int h, int w, bool fill = false)
      : height(h), width(w),
        v(static_cast<std::size_t>(h) * w, fill ? 1 : 0) {
    if (h <= 0 || w <= 0)
      throw std::invalid_argument("BoolGrid: dimensions must be positive.");
  }

  std::size_t size() const { return v.size(); }
  bool at(int h, int w) const { return v[static_cast<std::size_t>(h) * width + w] != 0; }
  void set(int h, int w, bool b) { v[static_cast<std::size_t>(h) * width + w] = b ? 1 : 0; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : v) n += (b != 0);
    return n;
  }
};

// Row-major matrix of doubles; storage for network weights and gradients.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {
    if (r <= 0 || c <= 0)
      throw std::invalid_argument("Matrix: dimensions must be positive.");
  }

  std::size_t size() const { return a.size(); }
  double& at(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }
  const double* row(int r) const { return a.data() + static_cast<std::size_t>(r) * cols; }
  double* row(int r) { return a.data() + static_cast<std::size_t>(r) * cols; }
};

// y = M x with x of length cols, y of length rows.
inline void matvec(const Matrix& m, const double* x, double* y) {
  for (int r = 0; r < m.rows; ++r) {
    const double* w = m.row(r);
    double acc = 0.0;
    for (int c = 0; c < m.cols; ++c) acc += w[c] * x[c];
    y[r] = acc;
  }
}

// y += M^T x with x of length rows, y of length cols.
inline void matvec_transpose_add(const Matrix& m, const double* x, double* y) {
  for (int r = 0; r < m.rows; ++r) {
    const double* w = m.row(r);
    const double xr = x[r];
    for (int c = 0; c < m.cols; ++c) y[c] += w[c] * xr;
  }
}

// grad += outer(gy, x): accumulates d(Mx)/dM given upstream gy.
inline void accumulate_outer(Matrix& grad, const double* gy, const double* x) {
  for (int r = 0; r < grad.rows; ++r) {
    double* g = grad.row(r);
    const double gr = gy[r];
    for (int c = 0; c < grad.cols; ++c) g[c] += gr * x[c];
  }
}

}  // namespace csg
