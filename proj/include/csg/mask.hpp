#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "csg/attention.hpp"
#include "csg/tensor.hpp"

namespace csg {

// Cross and self attention averaged over a trajectory's records.
struct AttentionSummary {
  TokenMaps cross_avg;
  PixelMatrix self_avg;
};

inline AttentionSummary accumulate_attention(
    const std::vector<AttentionRecord>& records) {
  if (records.empty())
    throw std::invalid_argument("accumulate_attention: no records.");
  AttentionSummary s;
  s.cross_avg = records[0].cross;
  s.self_avg = records[0].self_attn;
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (!records[r].cross.same_shape(s.cross_avg) ||
        records[r].self_attn.pixels != s.self_avg.pixels)
      throw std::invalid_argument("accumulate_attention: shape mismatch.");
    for (std::size_t i = 0; i < s.cross_avg.data.size(); ++i)
      s.cross_avg.data[i] += records[r].cross.data[i];
    for (std::size_t i = 0; i < s.self_avg.data.size(); ++i)
      s.self_avg.data[i] += records[r].self_attn.data[i];
  }
  const double inv = 1.0 / static_cast<double>(records.size());
  for (double& v : s.cross_avg.data) v *= inv;
  for (double& v : s.self_avg.data) v *= inv;
  return s;
}

// Self-attention smoothing of the edited token's cross map: each pixel's
// value becomes the Frobenius inner product of its self-attention row with
// the token map, i.e. the attention-weighted average over key pixels. Rows
// of A summing to 1 and map values in (0, 1) keep the output in (0, 1).
inline Grid regularize_mask(const AttentionSummary& s, int token_index) {
  const int H = s.cross_avg.height;
  const int W = s.cross_avg.width;
  if (token_index < 0 || token_index >= s.cross_avg.tokens)
    throw std::out_of_range("regularize_mask: token index out of range.");
  if (s.self_avg.pixels != H * W)
    throw std::invalid_argument("regularize_mask: self map size mismatch.");
  Grid m(H, W);
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w) {
      const int p = h * W + w;
      double acc = 0.0;
      for (int hh = 0; hh < H; ++hh)
        for (int ww = 0; ww < W; ++ww)
          acc += s.self_avg.at(p, hh * W + ww) * s.cross_avg.at(token_index, hh, ww);
      m.at(h, w) = acc;
    }
  return m;
}

// Background probability: elementwise complement of the content map.
inline Grid background_mask(const Grid& content) {
  Grid p(content.height, content.width);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (content.v[i] < 0.0 || content.v[i] > 1.0)
      throw std::domain_error("background_mask: content map outside [0, 1].");
    p.v[i] = 1.0 - content.v[i];
  }
  return p;
}

// Pixels whose background probability clears a cosine-ramp threshold that
// relaxes with noise level: threshold 0 at t = T (everything passes), rising
// toward 1 - cos(pi / delta) at t = 0. With delta = 1.5 the ramp crosses 1
// at t = T/4, so late steps guide nothing.
inline BoolGrid binary_schedule(const Grid& p, int t, int total_steps,
                                double delta) {
  if (total_steps < 1)
    throw std::invalid_argument("binary_schedule: total_steps must be positive.");
  if (t < 0 || t > total_steps)
    throw std::out_of_range("binary_schedule: level outside [0, T].");
  if (!(delta > 0.0))
    throw std::invalid_argument("binary_schedule: delta must be positive.");
  const double frac = static_cast<double>(total_steps - t) /
                      (static_cast<double>(total_steps) * delta);
  const double threshold = 1.0 - std::cos(std::numbers::pi * frac);
  BoolGrid b(p.height, p.width);
  for (int h = 0; h < p.height; ++h)
    for (int w = 0; w < p.width; ++w) b.set(h, w, p.at(h, w) >= threshold);
  return b;
}

// Diagonal of the per-pixel precision matrix: lambda_pre * (B ? P : 0),
// flattened in row-major pixel order. Channels share their pixel's weight.
inline std::vector<double> precision_diag(const Grid& p, const BoolGrid& b,
                                          double lambda_pre) {
  if (p.height != b.height || p.width != b.width)
    throw std::invalid_argument("precision_diag: grid shapes differ.");
  if (lambda_pre < 0.0)
    throw std::invalid_argument("precision_diag: lambda_pre must be >= 0.");
  std::vector<double> diag(p.size(), 0.0);
  for (std::size_t i = 0; i < p.size(); ++i)
    diag[i] = b.v[i] ? lambda_pre * p.v[i] : 0.0;
  return diag;
}

// Convex per-pixel blend of source and target token maps: background keeps
// the source attention, foreground keeps the target's. Per-pixel row sums
// are preserved.
inline TokenMaps mixup_cross_attention(const TokenMaps& m_src,
                                       const TokenMaps& m_tgt,
                                       const Grid& background) {
  if (!m_src.same_shape(m_tgt))
    throw std::invalid_argument("mixup: token map shapes differ.");
  if (background.height != m_src.height || background.width != m_src.width)
    throw std::invalid_argument("mixup: background grid shape differs.");
  TokenMaps out(m_src.tokens, m_src.height, m_src.width);
  for (int l = 0; l < m_src.tokens; ++l)
    for (int h = 0; h < m_src.height; ++h)
      for (int w = 0; w < m_src.width; ++w) {
        const double p = background.at(h, w);
        out.at(l, h, w) = m_src.at(l, h, w) * p + m_tgt.at(l, h, w) * (1.0 - p);
      }
  return out;
}

// Everything the guided sampler needs about the background.
struct MaskBundle {
  Grid content;     // regularized edited-token map
  Grid background;  // P = 1 - content
  double lambda_pre = 0.0;
  double delta = 1.5;
};

inline MaskBundle make_mask_bundle(const AttentionSummary& s, int token_index,
                                   double lambda_pre, double delta) {
  MaskBundle b;
  b.content = regularize_mask(s, token_index);
  b.background = background_mask(b.content);
  b.lambda_pre = lambda_pre;
  b.delta = delta;
  return b;
}

// Constant background probability; the fallback for backends that expose no
// attention.
inline MaskBundle uniform_mask_bundle(int height, int width,
                                      double background_value,
                                      double lambda_pre, double delta) {
  if (background_value < 0.0 || background_value > 1.0)
    throw std::invalid_argument("uniform_mask_bundle: value outside [0, 1].");
  MaskBundle b;
  b.background = Grid(height, width, background_value);
  b.content = Grid(height, width, 1.0 - background_value);
  b.lambda_pre = lambda_pre;
  b.delta = delta;
  return b;
}

}  // namespace csg
