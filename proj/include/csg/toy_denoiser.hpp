#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "csg/attention.hpp"
#include "csg/prompt.hpp"
#include "csg/rng.hpp"
#include "csg/schedule.hpp"
#include "csg/tensor.hpp"
#include "csg/weights_io.hpp"

namespace csg {

inline constexpr int kNetWidth = 32;
inline constexpr int kTimeFeatures = 16;  // 8 sin/cos pairs of t/T

// Bias-free single-block attention network. Time conditioning enters through
// the per-pixel input projection, token conditioning through cross-attention.
struct DenoiserWeights {
  int vocab = 8;
  int channels = 3;

  Matrix token_embedding;  // vocab x width
  Matrix time_proj;        // time_features x time_features
  Matrix input_proj;       // width x (channels + time_features)
  Matrix sa_query;         // width x width
  Matrix sa_key;           // width x width
  Matrix sa_value;         // width x width
  Matrix sa_out;           // width x width
  Matrix ca_query;         // width x width
  Matrix ca_key;           // width x width
  Matrix ca_value;         // width x width
  Matrix head_hidden;      // width x width
  Matrix head_out;         // channels x width
};

// Visits every weight matrix with a stable name; shared by serialization,
// the optimizer and the finite-difference check.
template <typename W, typename Fn>
void for_each_matrix(W& w, Fn&& fn) {
  fn("token_embedding", w.token_embedding);
  fn("time_proj", w.time_proj);
  fn("input_proj", w.input_proj);
  fn("sa_query", w.sa_query);
  fn("sa_key", w.sa_key);
  fn("sa_value", w.sa_value);
  fn("sa_out", w.sa_out);
  fn("ca_query", w.ca_query);
  fn("ca_key", w.ca_key);
  fn("ca_value", w.ca_value);
  fn("head_hidden", w.head_hidden);
  fn("head_out", w.head_out);
}

inline DenoiserWeights zero_weights(int vocab, int channels) {
  DenoiserWeights w;
  w.vocab = vocab;
  w.channels = channels;
  w.token_embedding = Matrix(vocab, kNetWidth);
  w.time_proj = Matrix(kTimeFeatures, kTimeFeatures);
  w.input_proj = Matrix(kNetWidth, channels + kTimeFeatures);
  w.sa_query = Matrix(kNetWidth, kNetWidth);
  w.sa_key = Matrix(kNetWidth, kNetWidth);
  w.sa_value = Matrix(kNetWidth, kNetWidth);
  w.sa_out = Matrix(kNetWidth, kNetWidth);
  w.ca_query = Matrix(kNetWidth, kNetWidth);
  w.ca_key = Matrix(kNetWidth, kNetWidth);
  w.ca_value = Matrix(kNetWidth, kNetWidth);
  w.head_hidden = Matrix(kNetWidth, kNetWidth);
  w.head_out = Matrix(channels, kNetWidth);
  return w;
}

// Uniform Xavier for projections, tight normal spread for token embeddings.
inline DenoiserWeights init_denoiser_weights(std::uint64_t seed, int vocab = 8,
                                             int channels = 3) {
  DenoiserWeights w = zero_weights(vocab, channels);
  CounterRng rng(seed, 0x696e6974ull);
  for_each_matrix(w, [&](const char* name, Matrix& m) {
    if (std::string(name) == "token_embedding") {
      for (double& v : m.a) v = 0.02 * rng.normal();
    } else {
      const double limit = std::sqrt(6.0 / (m.rows + m.cols));
      for (double& v : m.a) v = limit * (2.0 * rng.uniform() - 1.0);
    }
  });
  return w;
}

inline void check_weight_shapes(const DenoiserWeights& w) {
  const DenoiserWeights ref = zero_weights(w.vocab, w.channels);
  bool ok = true;
  for_each_matrix(ref, [&](const char* name, const Matrix& m) {
    const Matrix* mine = nullptr;
    for_each_matrix(const_cast<DenoiserWeights&>(w),
                    [&](const char* n2, Matrix& m2) {
                      if (std::string(n2) == name) mine = &m2;
                    });
    if (mine == nullptr || mine->rows != m.rows || mine->cols != m.cols)
      ok = false;
  });
  if (!ok) throw std::logic_error("denoiser weights: inconsistent shapes.");
}

inline void save_denoiser_weights(const std::string& path,
                                  const DenoiserWeights& w) {
  std::vector<NamedTensor> tensors;
  tensors.push_back({"meta",
                     {2},
                     {static_cast<double>(w.vocab),
                      static_cast<double>(w.channels)}});
  for_each_matrix(const_cast<DenoiserWeights&>(w),
                  [&](const char* name, Matrix& m) {
                    NamedTensor t;
                    t.name = name;
                    t.dims = {static_cast<std::uint32_t>(m.rows),
                              static_cast<std::uint32_t>(m.cols)};
                    t.values = m.a;
                    tensors.push_back(std::move(t));
                  });
  save_weights_file(path, tensors);
}

inline DenoiserWeights load_denoiser_weights(const std::string& path) {
  const std::vector<NamedTensor> tensors = load_weights_file(path);
  int vocab = -1;
  int channels = -1;
  for (const NamedTensor& t : tensors)
    if (t.name == "meta" && t.values.size() == 2) {
      vocab = static_cast<int>(t.values[0]);
      channels = static_cast<int>(t.values[1]);
    }
  if (vocab <= 0 || channels <= 0)
    throw std::runtime_error("denoiser weights: '" + path +
                             "' is missing its meta record.");
  DenoiserWeights w = zero_weights(vocab, channels);
  for_each_matrix(w, [&](const char* name, Matrix& m) {
    const NamedTensor* found = nullptr;
    for (const NamedTensor& t : tensors)
      if (t.name == name) found = &t;
    if (found == nullptr)
      throw std::runtime_error("denoiser weights: tensor '" +
                               std::string(name) + "' missing in '" + path + "'.");
    if (found->dims.size() != 2 ||
        static_cast<int>(found->dims[0]) != m.rows ||
        static_cast<int>(found->dims[1]) != m.cols)
      throw std::runtime_error("denoiser weights: tensor '" +
                               std::string(name) + "' has wrong shape.");
    m.a = found->values;
  });
  return w;
}

struct ForwardOptions {
  bool record_attention = false;
  const TokenMaps* cross_override = nullptr;
  // Skips both attention blocks and the head's SiLU, leaving a map that is
  // linear along every single parameter; used to probe exact gradients.
  bool linear_only = false;
};

struct ForwardResult {
  LatentTensor eps;
  std::optional<AttentionRecord> attention;
};

namespace detail {

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

// tau_i pairs: (sin, cos) of 2^i * pi * t / T for i = 0..7.
inline std::vector<double> time_features(int t, int total_steps) {
  std::vector<double> f(kTimeFeatures);
  const double u = static_cast<double>(t) / total_steps;
  for (int i = 0; i < kTimeFeatures / 2; ++i) {
    const double omega = std::ldexp(std::numbers::pi, i) * u;
    f[2 * i] = std::sin(omega);
    f[2 * i + 1] = std::cos(omega);
  }
  return f;
}

// Row-wise softmax of an n x m score block, in place.
inline void softmax_rows(std::vector<double>& s, int n, int m) {
  for (int p = 0; p < n; ++p) {
    double* row = s.data() + static_cast<std::size_t>(p) * m;
    double mx = row[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (int j = 0; j < m; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (int j = 0; j < m; ++j) row[j] /= total;
  }
}

// Activations retained for the backward pass.
struct Workspace {
  int pixels = 0;
  int tokens = 0;
  std::vector<double> tau;    // time input (16)
  std::vector<double> tf;     // projected time features (16)
  std::vector<double> u;      // P x (C + 16) network input
  std::vector<double> z0;     // P x d
  std::vector<double> q, k, v, attn, ctx, o, z1;   // self-attention
  std::vector<double> cq, ck, cv, cattn, cctx, z2; // cross-attention
  std::vector<double> h1, h2; // head
  std::vector<double> eps;    // P x C
  bool bypass = false;
  bool cross_forced = false;
};

inline void forward_into(const DenoiserWeights& w, const LatentTensor& x,
                         int t, int total_steps, const Prompt& y,
                         const ForwardOptions& opt, Workspace& ws) {
  if (x.channels != w.channels)
    throw std::logic_error("denoiser: channel count mismatch.");
  if (total_steps < 1)
    throw std::invalid_argument("denoiser: total_steps must be positive.");
  if (t < 0 || t > total_steps)
    throw std::out_of_range("denoiser: level outside [0, T].");
  if (y.tokens.empty() || y.edited_index < 0 ||
      y.edited_index >= static_cast<int>(y.tokens.size()))
    throw std::invalid_argument("denoiser: malformed prompt.");
  for (int tok : y.tokens)
    if (tok < 0 || tok >= w.vocab)
      throw std::out_of_range("denoiser: token id " + std::to_string(tok) +
                              " outside the vocabulary.");

  const int P = x.height * x.width;
  const int L = static_cast<int>(y.tokens.size());
  const int d = kNetWidth;
  const int in_dim = w.channels + kTimeFeatures;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  ws.pixels = P;
  ws.tokens = L;
  ws.bypass = opt.linear_only;
  ws.cross_forced = opt.cross_override != nullptr;

  ws.tau = time_features(t, total_steps);
  ws.tf.assign(kTimeFeatures, 0.0);
  matvec(w.time_proj, ws.tau.data(), ws.tf.data());

  ws.u.assign(static_cast<std::size_t>(P) * in_dim, 0.0);
  for (int p = 0; p < P; ++p) {
    double* up = ws.u.data() + static_cast<std::size_t>(p) * in_dim;
    for (int c = 0; c < w.channels; ++c)
      up[c] = x.data[static_cast<std::size_t>(p) * w.channels + c];
    for (int i = 0; i < kTimeFeatures; ++i) up[w.channels + i] = ws.tf[i];
  }

  ws.z0.assign(static_cast<std::size_t>(P) * d, 0.0);
  for (int p = 0; p < P; ++p)
    matvec(w.input_proj, ws.u.data() + static_cast<std::size_t>(p) * in_dim,
           ws.z0.data() + static_cast<std::size_t>(p) * d);

  if (!ws.bypass) {
    // Self-attention over pixels, single head, residual add.
    ws.q.assign(static_cast<std::size_t>(P) * d, 0.0);
    ws.k.assign(static_cast<std::size_t>(P) * d, 0.0);
    ws.v.assign(static_cast<std::size_t>(P) * d, 0.0);
    for (int p = 0; p < P; ++p) {
      const double* zp = ws.z0.data() + static_cast<std::size_t>(p) * d;
      matvec(w.sa_query, zp, ws.q.data() + static_cast<std::size_t>(p) * d);
      matvec(w.sa_key, zp, ws.k.data() + static_cast<std::size_t>(p) * d);
      matvec(w.sa_value, zp, ws.v.data() + static_cast<std::size_t>(p) * d);
    }
    ws.attn.assign(static_cast<std::size_t>(P) * P, 0.0);
    for (int p = 0; p < P; ++p) {
      const double* qp = ws.q.data() + static_cast<std::size_t>(p) * d;
      double* row = ws.attn.data() + static_cast<std::size_t>(p) * P;
      for (int j = 0; j < P; ++j) {
        const double* kj = ws.k.data() + static_cast<std::size_t>(j) * d;
        double acc = 0.0;
        for (int i = 0; i < d; ++i) acc += qp[i] * kj[i];
        row[j] = acc * scale;
      }
    }
    softmax_rows(ws.attn, P, P);
    ws.ctx.assign(static_cast<std::size_t>(P) * d, 0.0);
    for (int p = 0; p < P; ++p) {
      const double* row = ws.attn.data() + static_cast<std::size_t>(p) * P;
      double* cp = ws.ctx.data() + static_cast<std::size_t>(p) * d;
      for (int j = 0; j < P; ++j) {
        const double aj = row[j];
        const double* vj = ws.v.data() + static_cast<std::size_t>(j) * d;
        for (int i = 0; i < d; ++i) cp[i] += aj * vj[i];
      }
    }
    ws.o.assign(static_cast<std::size_t>(P) * d, 0.0);
    ws.z1.assign(static_cast<std::size_t>(P) * d, 0.0);
    for (int p = 0; p < P; ++p) {
      matvec(w.sa_out, ws.ctx.data() + static_cast<std::size_t>(p) * d,
             ws.o.data() + static_cast<std::size_t>(p) * d);
      for (int i = 0; i < d; ++i)
        ws.z1[static_cast<std::size_t>(p) * d + i] =
            ws.z0[static_cast<std::size_t>(p) * d + i] +
            ws.o[static_cast<std::size_t>(p) * d + i];
    }

    // Cross-attention from pixels to prompt tokens, residual add, no output
    // projection.
    ws.cq.assign(static_cast<std::size_t>(P) * d, 0.0);
    for (int p = 0; p < P; ++p)
      matvec(w.ca_query, ws.z1.data() + static_cast<std::size_t>(p) * d,
             ws.cq.data() + static_cast<std::size_t>(p) * d);
    ws.ck.assign(static_cast<std::size_t>(L) * d, 0.0);
    ws.cv.assign(static_cast<std::size_t>(L) * d, 0.0);
    for (int l = 0; l < L; ++l) {
      const double* e = w.token_embedding.row(y.tokens[static_cast<std::size_t>(l)]);
      matvec(w.ca_key, e, ws.ck.data() + static_cast<std::size_t>(l) * d);
      matvec(w.ca_value, e, ws.cv.data() + static_cast<std::size_t>(l) * d);
    }
    ws.cattn.assign(static_cast<std::size_t>(P) * L, 0.0);
    if (opt.cross_override != nullptr) {
      const TokenMaps& forced = *opt.cross_override;
      if (forced.tokens != L || forced.height != x.height ||
          forced.width != x.width)
        throw std::invalid_argument(
            "denoiser: forced cross-attention shape mismatch.");
      for (int p = 0; p < P; ++p)
        for (int l = 0; l < L; ++l)
          ws.cattn[static_cast<std::size_t>(p) * L + l] =
              forced.data[(static_cast<std::size_t>(l) * x.height +
                           p / x.width) * x.width + p % x.width];
    } else {
      for (int p = 0; p < P; ++p) {
        const double* qp = ws.cq.data() + static_cast<std::size_t>(p) * d;
        double* row = ws.cattn.data() + static_cast<std::size_t>(p) * L;
        for (int l = 0; l < L; ++l) {
          const double* kl = ws.ck.data() + static_cast<std::size_t>(l) * d;
          double acc = 0.0;
          for (int i = 0; i < d; ++i) acc += qp[i] * kl[i];
          row[l] = acc * scale;
        }
      }
      softmax_rows(ws.cattn, P, L);
    }
    ws.cctx.assign(static_cast<std::size_t>(P) * d, 0.0);
    ws.z2.assign(static_cast<std::size_t>(P) * d, 0.0);
    for (int p = 0; p < P; ++p) {
      const double* row = ws.cattn.data() + static_cast<std::size_t>(p) * L;
      double* cp = ws.cctx.data() + static_cast<std::size_t>(p) * d;
      for (int l = 0; l < L; ++l) {
        const double al = row[l];
        const double* vl = ws.cv.data() + static_cast<std::size_t>(l) * d;
        for (int i = 0; i < d; ++i) cp[i] += al * vl[i];
      }
      for (int i = 0; i < d; ++i)
        ws.z2[static_cast<std::size_t>(p) * d + i] =
            ws.z1[static_cast<std::size_t>(p) * d + i] + cp[i];
    }
  } else {
    if (opt.cross_override != nullptr)
      throw std::logic_error(
          "denoiser: cannot force cross-attention while bypassing it.");
    ws.z2 = ws.z0;
  }

  // Pointwise head: linear, SiLU, linear to channel count. Linear-only mode
  // swaps SiLU for the identity.
  ws.h1.assign(static_cast<std::size_t>(P) * d, 0.0);
  ws.h2.assign(static_cast<std::size_t>(P) * d, 0.0);
  ws.eps.assign(static_cast<std::size_t>(P) * w.channels, 0.0);
  for (int p = 0; p < P; ++p) {
    double* h1p = ws.h1.data() + static_cast<std::size_t>(p) * d;
    double* h2p = ws.h2.data() + static_cast<std::size_t>(p) * d;
    matvec(w.head_hidden, ws.z2.data() + static_cast<std::size_t>(p) * d, h1p);
    for (int i = 0; i < d; ++i) h2p[i] = ws.bypass ? h1p[i] : silu(h1p[i]);
    matvec(w.head_out, h2p,
           ws.eps.data() + static_cast<std::size_t>(p) * w.channels);
  }
}

}  // namespace detail

inline ForwardResult denoiser_forward(const DenoiserWeights& w,
                                      const LatentTensor& x, int t,
                                      int total_steps, const Prompt& y,
                                      const ForwardOptions& opt = {}) {
  detail::Workspace ws;
  detail::forward_into(w, x, t, total_steps, y, opt, ws);
  ForwardResult out;
  out.eps = LatentTensor(x.height, x.width, x.channels);
  out.eps.data = ws.eps;
  if (opt.record_attention) {
    if (opt.linear_only)
      throw std::logic_error("denoiser: nothing to record while bypassing.");
    AttentionRecord rec;
    rec.cross = TokenMaps(ws.tokens, x.height, x.width);
    for (int l = 0; l < ws.tokens; ++l)
      for (int h = 0; h < x.height; ++h)
        for (int wd = 0; wd < x.width; ++wd)
          rec.cross.at(l, h, wd) =
              ws.cattn[(static_cast<std::size_t>(h) * x.width + wd) * ws.tokens + l];
    rec.self_attn = PixelMatrix(ws.pixels);
    rec.self_attn.data = ws.attn;
    out.attention = std::move(rec);
  }
  return out;
}

// Mean squared error against a target noise tensor plus gradients for every
// weight matrix. The backward pass mirrors forward_into step by step.
struct LossGrad {
  double loss = 0.0;
  DenoiserWeights grad;
};

inline LossGrad denoiser_loss_grad(const DenoiserWeights& w,
                                   const LatentTensor& x, int t,
                                   int total_steps, const Prompt& y,
                                   const LatentTensor& target,
                                   bool linear_only = false) {
  require_same_shape(x, target, "denoiser_loss_grad");
  detail::Workspace ws;
  ForwardOptions opt;
  opt.linear_only = linear_only;
  detail::forward_into(w, x, t, total_steps, y, opt, ws);

  const int P = ws.pixels;
  const int L = ws.tokens;
  const int d = kNetWidth;
  const int C = w.channels;
  const int in_dim = C + kTimeFeatures;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const double n_elems = static_cast<double>(P) * C;

  LossGrad out;
  out.grad = zero_weights(w.vocab, C);
  DenoiserWeights& g = out.grad;

  // d_eps = 2 (eps - target) / N; loss = mean squared residual.
  std::vector<double> d_eps(static_cast<std::size_t>(P) * C);
  for (std::size_t i = 0; i < d_eps.size(); ++i) {
    const double r = ws.eps[i] - target.data[i];
    out.loss += r * r;
    d_eps[i] = 2.0 * r / n_elems;
  }
  out.loss /= n_elems;

  // Head backward.
  std::vector<double> d_z2(static_cast<std::size_t>(P) * d, 0.0);
  {
    std::vector<double> d_h2(d), d_h1(d);
    for (int p = 0; p < P; ++p) {
      const double* dep = d_eps.data() + static_cast<std::size_t>(p) * C;
      const double* h1p = ws.h1.data() + static_cast<std::size_t>(p) * d;
      const double* h2p = ws.h2.data() + static_cast<std::size_t>(p) * d;
      accumulate_outer(g.head_out, dep, h2p);
      std::fill(d_h2.begin(), d_h2.end(), 0.0);
      matvec_transpose_add(w.head_out, dep, d_h2.data());
      for (int i = 0; i < d; ++i)
        d_h1[i] = linear_only ? d_h2[i] : d_h2[i] * detail::silu_grad(h1p[i]);
      accumulate_outer(g.head_hidden, d_h1.data(),
                       ws.z2.data() + static_cast<std::size_t>(p) * d);
      matvec_transpose_add(w.head_hidden, d_h1.data(),
                           d_z2.data() + static_cast<std::size_t>(p) * d);
    }
  }

  std::vector<double> d_z0(static_cast<std::size_t>(P) * d, 0.0);
  if (!linear_only) {
    // Cross-attention backward.
    std::vector<double> d_z1 = d_z2;  // residual branch
    std::vector<double> d_cv(static_cast<std::size_t>(L) * d, 0.0);
    std::vector<double> d_ck(static_cast<std::size_t>(L) * d, 0.0);
    {
      std::vector<double> d_row(L), d_score(L), d_cq(d);
      for (int p = 0; p < P; ++p) {
        const double* d_cctx = d_z2.data() + static_cast<std::size_t>(p) * d;
        const double* row = ws.cattn.data() + static_cast<std::size_t>(p) * L;
        for (int l = 0; l < L; ++l) {
          const double* vl = ws.cv.data() + static_cast<std::size_t>(l) * d;
          double acc = 0.0;
          for (int i = 0; i < d; ++i) {
            acc += d_cctx[i] * vl[i];
            d_cv[static_cast<std::size_t>(l) * d + i] += row[l] * d_cctx[i];
          }
          d_row[l] = acc;
        }
        // Softmax Jacobian: ds_l = a_l (da_l - sum_j a_j da_j).
        double dot = 0.0;
        for (int l = 0; l < L; ++l) dot += row[l] * d_row[l];
        for (int l = 0; l < L; ++l) d_score[l] = row[l] * (d_row[l] - dot);
        std::fill(d_cq.begin(), d_cq.end(), 0.0);
        for (int l = 0; l < L; ++l) {
          const double* kl = ws.ck.data() + static_cast<std::size_t>(l) * d;
          const double* qp = ws.cq.data() + static_cast<std::size_t>(p) * d;
          const double ds = d_score[l] * scale;
          for (int i = 0; i < d; ++i) {
            d_cq[i] += ds * kl[i];
            d_ck[static_cast<std::size_t>(l) * d + i] += ds * qp[i];
          }
        }
        accumulate_outer(g.ca_query, d_cq.data(),
                         ws.z1.data() + static_cast<std::size_t>(p) * d);
        matvec_transpose_add(w.ca_query, d_cq.data(),
                             d_z1.data() + static_cast<std::size_t>(p) * d);
      }
    }
    {
      std::vector<double> d_e(d);
      for (int l = 0; l < L; ++l) {
        const int tok = y.tokens[static_cast<std::size_t>(l)];
        const double* e = w.token_embedding.row(tok);
        accumulate_outer(g.ca_key, d_ck.data() + static_cast<std::size_t>(l) * d, e);
        accumulate_outer(g.ca_value, d_cv.data() + static_cast<std::size_t>(l) * d, e);
        std::fill(d_e.begin(), d_e.end(), 0.0);
        matvec_transpose_add(w.ca_key, d_ck.data() + static_cast<std::size_t>(l) * d,
                             d_e.data());
        matvec_transpose_add(w.ca_value, d_cv.data() + static_cast<std::size_t>(l) * d,
                             d_e.data());
        double* ge = g.token_embedding.row(tok);
        for (int i = 0; i < d; ++i) ge[i] += d_e[i];
      }
    }

    // Self-attention backward.
    std::vector<double> d_ctx(static_cast<std::size_t>(P) * d, 0.0);
    for (int p = 0; p < P; ++p) {
      const double* d_o = d_z1.data() + static_cast<std::size_t>(p) * d;
      accumulate_outer(g.sa_out, d_o,
                       ws.ctx.data() + static_cast<std::size_t>(p) * d);
      matvec_transpose_add(w.sa_out, d_o,
                           d_ctx.data() + static_cast<std::size_t>(p) * d);
    }
    std::vector<double> d_q(static_cast<std::size_t>(P) * d, 0.0);
    std::vector<double> d_k(static_cast<std::size_t>(P) * d, 0.0);
    std::vector<double> d_v(static_cast<std::size_t>(P) * d, 0.0);
    {
      std::vector<double> d_row(P), d_score(P);
      for (int p = 0; p < P; ++p) {
        const double* dcp = d_ctx.data() + static_cast<std::size_t>(p) * d;
        const double* row = ws.attn.data() + static_cast<std::size_t>(p) * P;
        for (int j = 0; j < P; ++j) {
          const double* vj = ws.v.data() + static_cast<std::size_t>(j) * d;
          double acc = 0.0;
          for (int i = 0; i < d; ++i) {
            acc += dcp[i] * vj[i];
            d_v[static_cast<std::size_t>(j) * d + i] += row[j] * dcp[i];
          }
          d_row[j] = acc;
        }
        double dot = 0.0;
        for (int j = 0; j < P; ++j) dot += row[j] * d_row[j];
        for (int j = 0; j < P; ++j) d_score[j] = row[j] * (d_row[j] - dot);
        double* dqp = d_q.data() + static_cast<std::size_t>(p) * d;
        const double* qp = ws.q.data() + static_cast<std::size_t>(p) * d;
        for (int j = 0; j < P; ++j) {
          const double ds = d_score[j] * scale;
          const double* kj = ws.k.data() + static_cast<std::size_t>(j) * d;
          double* dkj = d_k.data() + static_cast<std::size_t>(j) * d;
          for (int i = 0; i < d; ++i) {
            dqp[i] += ds * kj[i];
            dkj[i] += ds * qp[i];
          }
        }
      }
    }
    for (int p = 0; p < P; ++p) {
      const double* zp = ws.z0.data() + static_cast<std::size_t>(p) * d;
      double* dz0p = d_z0.data() + static_cast<std::size_t>(p) * d;
      accumulate_outer(g.sa_query, d_q.data() + static_cast<std::size_t>(p) * d, zp);
      accumulate_outer(g.sa_key, d_k.data() + static_cast<std::size_t>(p) * d, zp);
      accumulate_outer(g.sa_value, d_v.data() + static_cast<std::size_t>(p) * d, zp);
      matvec_transpose_add(w.sa_query, d_q.data() + static_cast<std::size_t>(p) * d, dz0p);
      matvec_transpose_add(w.sa_key, d_k.data() + static_cast<std::size_t>(p) * d, dz0p);
      matvec_transpose_add(w.sa_value, d_v.data() + static_cast<std::size_t>(p) * d, dz0p);
      // Residual path from z1.
      for (int i = 0; i < d; ++i) dz0p[i] += d_z1[static_cast<std::size_t>(p) * d + i];
    }
  } else {
    d_z0 = d_z2;
  }

  // Input projection and time features.
  std::vector<double> d_tf(kTimeFeatures, 0.0);
  {
    std::vector<double> d_u(in_dim);
    for (int p = 0; p < P; ++p) {
      const double* up = ws.u.data() + static_cast<std::size_t>(p) * in_dim;
      const double* dz0p = d_z0.data() + static_cast<std::size_t>(p) * d;
      accumulate_outer(g.input_proj, dz0p, up);
      std::fill(d_u.begin(), d_u.end(), 0.0);
      matvec_transpose_add(w.input_proj, dz0p, d_u.data());
      for (int i = 0; i < kTimeFeatures; ++i) d_tf[i] += d_u[C + i];
    }
  }
  accumulate_outer(g.time_proj, d_tf.data(), ws.tau.data());

  return out;
}

// Schedule-free adapter exposing the network as a noise predictor for a
// fixed horizon T.
class ToyDenoiser final : public Denoiser {
 public:
  ToyDenoiser(DenoiserWeights w, int total_steps)
      : w_(std::move(w)), total_steps_(total_steps) {
    check_weight_shapes(w_);
    if (total_steps_ < 1)
      throw std::invalid_argument("ToyDenoiser: total_steps must be positive.");
  }

  DenoiserOutput predict(const LatentTensor& x, int t, const Prompt& y,
                         bool record_attention) const override {
    ForwardOptions opt;
    opt.record_attention = record_attention;
    ForwardResult r = denoiser_forward(w_, x, t, total_steps_, y, opt);
    return {std::move(r.eps), std::move(r.attention)};
  }

  bool provides_attention() const override { return true; }

  DenoiserOutput predict_with_cross(const LatentTensor& x, int t,
                                    const Prompt& y, const TokenMaps& forced,
                                    bool record_attention) const override {
    ForwardOptions opt;
    opt.record_attention = record_attention;
    opt.cross_override = &forced;
    ForwardResult r = denoiser_forward(w_, x, t, total_steps_, y, opt);
    return {std::move(r.eps), std::move(r.attention)};
  }

  const DenoiserWeights& weights() const { return w_; }
  int total_steps() const { return total_steps_; }

 private:
  DenoiserWeights w_;
  int total_steps_;
};

}  // namespace csg
