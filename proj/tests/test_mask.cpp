#include "csg/mask.hpp"

#include <cmath>
#include <numbers>
#include <gtest/gtest.h>

#include "csg/rng.hpp"

namespace csg {
namespace {

// Random stochastic attention: cross maps per token sum to 1 over pixels,
// self rows sum to 1 over keys.
AttentionRecord random_record(int tokens, int H, int W, CounterRng& rng) {
  AttentionRecord r;
  r.cross = TokenMaps(tokens, H, W);
  for (int l = 0; l < tokens; ++l) {
    double total = 0.0;
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        const double v = 0.05 + rng.uniform();
        r.cross.at(l, h, w) = v;
        total += v;
      }
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) r.cross.at(l, h, w) /= total;
  }
  const int P = H * W;
  r.self_attn = PixelMatrix(P);
  for (int q = 0; q < P; ++q) {
    double total = 0.0;
    for (int k = 0; k < P; ++k) {
      const double v = 0.05 + rng.uniform();
      r.self_attn.at(q, k) = v;
      total += v;
    }
    for (int k = 0; k < P; ++k) r.self_attn.at(q, k) /= total;
  }
  return r;
}

TEST(AccumulateAttention, AveragesElementwise) {
  CounterRng rng(3);
  std::vector<AttentionRecord> recs;
  for (int i = 0; i < 3; ++i) recs.push_back(random_record(2, 3, 4, rng));
  const AttentionSummary s = accumulate_attention(recs);
  for (std::size_t i = 0; i < s.cross_avg.data.size(); ++i) {
    const double mean = (recs[0].cross.data[i] + recs[1].cross.data[i] +
                         recs[2].cross.data[i]) /
                        3.0;
    EXPECT_NEAR(s.cross_avg.data[i], mean, 1e-15);
  }
  for (std::size_t i = 0; i < s.self_avg.data.size(); ++i) {
    const double mean = (recs[0].self_attn.data[i] + recs[1].self_attn.data[i] +
                         recs[2].self_attn.data[i]) /
                        3.0;
    EXPECT_NEAR(s.self_avg.data[i], mean, 1e-15);
  }
  EXPECT_THROW(accumulate_attention({}), std::invalid_argument);

  std::vector<AttentionRecord> bad = recs;
  bad.push_back(random_record(2, 4, 3, rng));
  EXPECT_THROW(accumulate_attention(bad), std::invalid_argument);
}

// Brute-force double sum over key pixels, written independently of the
// production loop structure.
TEST(RegularizeMask, MatchesBruteForceDoubleSum) {
  CounterRng rng(5);
  const int H = 4, W = 5, tokens = 3;
  const AttentionRecord rec = random_record(tokens, H, W, rng);
  const AttentionSummary s = accumulate_attention({rec});
  for (int tok = 0; tok < tokens; ++tok) {
    const Grid m = regularize_mask(s, tok);
    ASSERT_EQ(m.height, H);
    ASSERT_EQ(m.width, W);
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        long double acc = 0.0L;
        for (int kh = 0; kh < H; ++kh)
          for (int kw = 0; kw < W; ++kw)
            acc += static_cast<long double>(
                       rec.self_attn.at(h * W + w, kh * W + kw)) *
                   rec.cross.at(tok, kh, kw);
        EXPECT_NEAR(m.at(h, w), static_cast<double>(acc), 1e-12)
            << "tok=" << tok << " h=" << h << " w=" << w;
      }
  }
  EXPECT_THROW(regularize_mask(s, -1), std::out_of_range);
  EXPECT_THROW(regularize_mask(s, tokens), std::out_of_range);
}

TEST(RegularizeMask, IdentitySelfAttentionReturnsTokenMap) {
  const int H = 3, W = 3;
  CounterRng rng(7);
  AttentionRecord rec = random_record(1, H, W, rng);
  rec.self_attn = PixelMatrix(H * W);
  for (int q = 0; q < H * W; ++q) rec.self_attn.at(q, q) = 1.0;
  const Grid m = regularize_mask(accumulate_attention({rec}), 0);
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w)
      EXPECT_DOUBLE_EQ(m.at(h, w), rec.cross.at(0, h, w));
}

TEST(RegularizeMask, UniformSelfAttentionFlattensToMean) {
  const int H = 2, W = 3;
  CounterRng rng(9);
  AttentionRecord rec = random_record(1, H, W, rng);
  const int P = H * W;
  rec.self_attn = PixelMatrix(P);
  for (int q = 0; q < P; ++q)
    for (int k = 0; k < P; ++k) rec.self_attn.at(q, k) = 1.0 / P;
  double mean = 0.0;
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w) mean += rec.cross.at(0, h, w);
  mean /= P;
  const Grid m = regularize_mask(accumulate_attention({rec}), 0);
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w) EXPECT_NEAR(m.at(h, w), mean, 1e-15);
}

TEST(BackgroundMask, ExactComplement) {
  Grid content(2, 2);
  content.v = {0.0, 0.25, 0.5, 1.0};
  const Grid p = background_mask(content);
  EXPECT_DOUBLE_EQ(p.v[0], 1.0);
  EXPECT_DOUBLE_EQ(p.v[1], 0.75);
  EXPECT_DOUBLE_EQ(p.v[2], 0.5);
  EXPECT_DOUBLE_EQ(p.v[3], 0.0);

  Grid bad(1, 1);
  bad.v = {1.5};
  EXPECT_THROW(background_mask(bad), std::domain_error);
  bad.v = {-0.1};
  EXPECT_THROW(background_mask(bad), std::domain_error);
}

TEST(BinarySchedule, EndpointsAndQuarterCrossing) {
  const int T = 40;
  const double delta = 1.5;
  Grid p(3, 3);
  for (std::size_t i = 0; i < p.size(); ++i)
    p.v[i] = static_cast<double>(i) / 8.0;  // 0 .. 1

  // t = T: threshold = 1 - cos(0) = 0, everything passes.
  const BoolGrid all_on = binary_schedule(p, T, T, delta);
  EXPECT_EQ(all_on.count(), p.size());

  // t = 0 with delta 1.5: threshold = 1 - cos(2 pi / 3) = 1.5 > 1, nothing
  // passes.
  const BoolGrid all_off = binary_schedule(p, 0, T, delta);
  EXPECT_EQ(all_off.count(), 0u);

  // The ramp crosses 1 when (T - t)/(T delta) = 1/2, i.e. t = T/4.
  const BoolGrid at_quarter = binary_schedule(p, T / 4, T, delta);
  EXPECT_EQ(at_quarter.count(), 1u);  // only the exact-1.0 pixel survives
  EXPECT_TRUE(at_quarter.at(2, 2));

  EXPECT_THROW(binary_schedule(p, -1, T, delta), std::out_of_range);
  EXPECT_THROW(binary_schedule(p, T + 1, T, delta), std::out_of_range);
  EXPECT_THROW(binary_schedule(p, 1, 0, delta), std::invalid_argument);
  EXPECT_THROW(binary_schedule(p, 1, T, 0.0), std::invalid_argument);
}

// As t falls the threshold rises monotonically, so the active sets nest.
TEST(BinarySchedule, ActiveSetsNestAsLevelFalls) {
  const int T = 50;
  CounterRng rng(11);
  Grid p(6, 6);
  for (double& v : p.v) v = rng.uniform();
  BoolGrid prev = binary_schedule(p, T, T, 1.5);
  for (int t = T - 1; t >= 0; --t) {
    const BoolGrid cur = binary_schedule(p, t, T, 1.5);
    for (std::size_t i = 0; i < cur.size(); ++i)
      EXPECT_LE(cur.v[i], prev.v[i]) << "t=" << t << " i=" << i;
    prev = cur;
  }
}

TEST(PrecisionDiag, GatedScaledBackground) {
  Grid p(2, 2);
  p.v = {0.9, 0.4, 0.7, 0.1};
  BoolGrid b(2, 2);
  b.set(0, 0, true);
  b.set(1, 0, true);
  const std::vector<double> diag = precision_diag(p, b, 50.0);
  ASSERT_EQ(diag.size(), 4u);
  EXPECT_DOUBLE_EQ(diag[0], 45.0);
  EXPECT_DOUBLE_EQ(diag[1], 0.0);
  EXPECT_DOUBLE_EQ(diag[2], 35.0);
  EXPECT_DOUBLE_EQ(diag[3], 0.0);

  EXPECT_THROW(precision_diag(p, BoolGrid(3, 2), 1.0), std::invalid_argument);
  EXPECT_THROW(precision_diag(p, b, -1.0), std::invalid_argument);

  // lambda_pre = 0 zeroes every entry regardless of the mask.
  for (double v : precision_diag(p, b, 0.0)) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(MixupCrossAttention, BlendsPerPixel) {
  const int H = 2, W = 2;
  CounterRng rng(13);
  const AttentionRecord a = random_record(2, H, W, rng);
  const AttentionRecord b = random_record(2, H, W, rng);

  // P = 1 everywhere: output is the source maps.
  Grid ones(H, W, 1.0);
  TokenMaps keep_src = mixup_cross_attention(a.cross, b.cross, ones);
  for (std::size_t i = 0; i < keep_src.data.size(); ++i)
    EXPECT_DOUBLE_EQ(keep_src.data[i], a.cross.data[i]);

  // P = 0 everywhere: output is the target maps.
  Grid zeros(H, W, 0.0);
  TokenMaps keep_tgt = mixup_cross_attention(a.cross, b.cross, zeros);
  for (std::size_t i = 0; i < keep_tgt.data.size(); ++i)
    EXPECT_DOUBLE_EQ(keep_tgt.data[i], b.cross.data[i]);

  // P = 0.5: exact midpoint.
  Grid half(H, W, 0.5);
  TokenMaps mid = mixup_cross_attention(a.cross, b.cross, half);
  for (std::size_t i = 0; i < mid.data.size(); ++i)
    EXPECT_NEAR(mid.data[i],
                0.5 * (a.cross.data[i] + b.cross.data[i]), 1e-15);

  EXPECT_THROW(mixup_cross_attention(a.cross, b.cross, Grid(3, 2, 0.5)),
               std::invalid_argument);
  TokenMaps wrong(3, H, W);
  EXPECT_THROW(mixup_cross_attention(a.cross, wrong, half),
               std::invalid_argument);
}

// Blending two stochastic map stacks with any background field preserves the
// per-pixel sum across tokens whenever both stacks share that sum.
TEST(MixupCrossAttention, PreservesPerPixelTokenSums) {
  const int H = 4, W = 4, tokens = 3;
  CounterRng rng(17);
  // Build per-pixel stochastic stacks: at each pixel the token values sum to 1.
  TokenMaps src(tokens, H, W), tgt(tokens, H, W);
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w) {
      double sa = 0.0, sb = 0.0;
      for (int l = 0; l < tokens; ++l) {
        src.at(l, h, w) = 0.1 + rng.uniform();
        tgt.at(l, h, w) = 0.1 + rng.uniform();
        sa += src.at(l, h, w);
        sb += tgt.at(l, h, w);
      }
      for (int l = 0; l < tokens; ++l) {
        src.at(l, h, w) /= sa;
        tgt.at(l, h, w) /= sb;
      }
    }
  Grid p(H, W);
  for (double& v : p.v) v = rng.uniform();
  const TokenMaps mixed = mixup_cross_attention(src, tgt, p);
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w) {
      double total = 0.0;
      for (int l = 0; l < tokens; ++l) total += mixed.at(l, h, w);
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
}

TEST(MaskBundle, ConstructionAndUniformFallback) {
  CounterRng rng(19);
  const AttentionRecord rec = random_record(2, 3, 3, rng);
  const AttentionSummary s = accumulate_attention({rec});
  const MaskBundle b = make_mask_bundle(s, 1, 50.0, 1.5);
  EXPECT_EQ(b.content.height, 3);
  EXPECT_DOUBLE_EQ(b.lambda_pre, 50.0);
  EXPECT_DOUBLE_EQ(b.delta, 1.5);
  for (std::size_t i = 0; i < b.content.size(); ++i)
    EXPECT_NEAR(b.content.v[i] + b.background.v[i], 1.0, 1e-15);

  const MaskBundle u = uniform_mask_bundle(4, 5, 0.8, 10.0, 1.5);
  EXPECT_EQ(u.background.height, 4);
  EXPECT_EQ(u.background.width, 5);
  for (double v : u.background.v) EXPECT_DOUBLE_EQ(v, 0.8);
  for (double v : u.content.v) EXPECT_NEAR(v, 0.2, 1e-15);
  EXPECT_THROW(uniform_mask_bundle(4, 5, 1.2, 10.0, 1.5),
               std::invalid_argument);
}

}  // namespace
}  // namespace csg
