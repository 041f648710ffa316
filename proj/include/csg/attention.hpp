#pragma once

#include <stdexcept>
#include <vector>

#include "csg/tensor.hpp"

namespace csg {

// Post-softmax cross-attention maps: one H x W map per prompt token.
// data layout: (token * H + h) * W + w.
struct TokenMaps {
  int tokens = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  TokenMaps() = default;
  TokenMaps(int l, int h, int w)
      : tokens(l), height(h), width(w),
        data(static_cast<std::size_t>(l) * h * w, 0.0) {
    if (l <= 0 || h <= 0 || w <= 0)
      throw std::invalid_argument("TokenMaps: dimensions must be positive.");
  }

  std::size_t index(int l, int h, int w) const {
    return (static_cast<std::size_t>(l) * height + h) * width + w;
  }
  double& at(int l, int h, int w) { return data[index(l, h, w)]; }
  double at(int l, int h, int w) const { return data[index(l, h, w)]; }

  bool same_shape(const TokenMaps& o) const {
    return tokens == o.tokens && height == o.height && width == o.width;
  }
};

// Post-softmax self-attention: rows are query pixels in row-major (h, w)
// order, columns key pixels in the same order. Each row sums to one.
struct PixelMatrix {
  int pixels = 0;
  std::vector<double> data;

  PixelMatrix() = default;
  explicit PixelMatrix(int p)
      : pixels(p), data(static_cast<std::size_t>(p) * p, 0.0) {
    if (p <= 0)
      throw std::invalid_argument("PixelMatrix: size must be positive.");
  }

  double& at(int q, int k) { return data[static_cast<std::size_t>(q) * pixels + k]; }
  double at(int q, int k) const { return data[static_cast<std::size_t>(q) * pixels + k]; }
};

// Attention maps captured from one denoiser call.
struct AttentionRecord {
  TokenMaps cross;
  PixelMatrix self_attn;
};

}  // namespace csg
