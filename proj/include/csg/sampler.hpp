#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "csg/mask.hpp"
#include "csg/prompt.hpp"
#include "csg/schedule.hpp"
#include "csg/tensor.hpp"

namespace csg {

enum class SelfAttnSource { inversion, reconstruction };

inline SelfAttnSource self_attn_source_from_string(const std::string& name) {
  if (name == "inversion") return SelfAttnSource::inversion;
  if (name == "reconstruction") return SelfAttnSource::reconstruction;
  throw std::invalid_argument("self_attn_source '" + name + "' unknown.");
}

inline const char* to_string(SelfAttnSource s) {
  return s == SelfAttnSource::inversion ? "inversion" : "reconstruction";
}

struct GuidanceConfig {
  double lambda_pre = 50.0;
  double delta = 1.5;
  double cfg_scale = 3.0;
  bool mixup_enabled = true;
  int steps = 50;
  SelfAttnSource self_attn_source = SelfAttnSource::inversion;
  // Constant background probability for backends without attention maps.
  std::optional<double> fixed_background;
};

inline void validate_guidance_config(const GuidanceConfig& cfg) {
  if (cfg.lambda_pre < 0.0)
    throw std::invalid_argument("guidance config: lambda_pre must be >= 0.");
  if (!(cfg.delta > 0.0))
    throw std::invalid_argument("guidance config: delta must be positive.");
  if (cfg.cfg_scale < 1.0)
    throw std::invalid_argument("guidance config: cfg_scale must be >= 1.");
  if (cfg.steps < 1)
    throw std::invalid_argument("guidance config: steps must be >= 1.");
  if (cfg.fixed_background &&
      (*cfg.fixed_background < 0.0 || *cfg.fixed_background > 1.0))
    throw std::invalid_argument(
        "guidance config: fixed_background outside [0, 1].");
}

// Pass-through wrapper that counts backend calls made on its behalf.
class CountingDenoiser final : public Denoiser {
 public:
  explicit CountingDenoiser(const Denoiser& inner) : inner_(inner) {}

  DenoiserOutput predict(const LatentTensor& x, int t, const Prompt& y,
                         bool record_attention) const override {
    ++calls_;
    return inner_.predict(x, t, y, record_attention);
  }

  bool provides_attention() const override { return inner_.provides_attention(); }

  DenoiserOutput predict_with_cross(const LatentTensor& x, int t,
                                    const Prompt& y, const TokenMaps& forced,
                                    bool record_attention) const override {
    ++calls_;
    return inner_.predict_with_cross(x, t, y, forced, record_attention);
  }

  long calls() const { return calls_; }

 private:
  const Denoiser& inner_;
  mutable long calls_ = 0;
};

// Classifier-free combination eps_u + w (eps_c - eps_u). Both branches are
// always evaluated so the backend call pattern does not depend on w; at
// w = 1 the conditional prediction is returned without arithmetic. Callers
// are expected to pass w >= 1. Any attention comes from the conditional call.
inline DenoiserOutput cfg_eps(const Denoiser& d, const LatentTensor& x, int t,
                              const Prompt& y, double w,
                              bool record_attention = false) {
  DenoiserOutput cond = d.predict(x, t, y, record_attention);
  const DenoiserOutput uncond = d.predict(x, t, null_prompt_like(y), false);
  if (w == 1.0) return cond;
  require_same_shape(cond.eps, uncond.eps, "cfg_eps");
  for (std::size_t i = 0; i < cond.eps.size(); ++i)
    cond.eps.data[i] =
        uncond.eps.data[i] + w * (cond.eps.data[i] - uncond.eps.data[i]);
  return cond;
}

// Source trajectory x_0 .. x_T plus, when the backend exposes attention, one
// record per inversion step. src_attention[i] holds the maps computed at
// (x_i, level i), i.e. the source maps for diffusion level i.
struct TrajectoryCache {
  std::vector<LatentTensor> latents;
  std::vector<AttentionRecord> src_attention;
  std::optional<AttentionSummary> summary;
  Prompt src_prompt;
};

// Deterministic inversion under the source prompt; never uses guidance.
// Attention is recorded whenever the backend can produce it, so the cache is
// usable both for mixup and for mask building.
inline TrajectoryCache invert_with_cache(const LatentTensor& x0,
                                         const Prompt& y_src,
                                         const Denoiser& d,
                                         const NoiseSchedule& s,
                                         const GuidanceConfig& cfg) {
  validate_schedule(s);
  if (cfg.mixup_enabled && !d.provides_attention())
    throw std::invalid_argument(
        "invert_with_cache: mixup needs an attention backend; disable mixup.");
  TrajectoryCache cache;
  cache.src_prompt = y_src;
  cache.latents.reserve(static_cast<std::size_t>(s.steps) + 1);
  cache.latents.push_back(x0);
  const bool record = d.provides_attention();
  for (int t = 0; t < s.steps; ++t) {
    DenoiserOutput out = d.predict(cache.latents.back(), t, y_src, record);
    if (record) {
      if (!out.attention)
        throw std::logic_error("invert_with_cache: backend promised attention "
                               "but returned none.");
      cache.src_attention.push_back(std::move(*out.attention));
    }
    cache.latents.push_back(
        ddim_update(cache.latents.back(), out.eps, s.at(t), s.at(t + 1)));
    if (!all_finite(cache.latents.back()))
      throw std::runtime_error("invert_with_cache: non-finite latent at level " +
                               std::to_string(t + 1) + ".");
  }
  if (record) cache.summary = accumulate_attention(cache.src_attention);
  return cache;
}

// Omega_t (x_tgt - x_src): the precision-weighted pull toward the cached
// source latent, one diagonal weight per pixel shared across channels. The
// caller scales by -gamma_t per the update equation.
inline LatentTensor guidance_term(const LatentTensor& x_tgt,
                                  const LatentTensor& x_src,
                                  const std::vector<double>& omega_diag,
                                  const NoiseSchedule& s, int t) {
  require_same_shape(x_tgt, x_src, "guidance_term");
  if (t < 1 || t > s.steps)
    throw std::out_of_range("guidance_term: level must lie in [1, T].");
  if (omega_diag.size() !=
      static_cast<std::size_t>(x_tgt.height) * x_tgt.width)
    throw std::invalid_argument("guidance_term: diagonal length mismatch.");
  LatentTensor g = zeros_like(x_tgt);
  for (int h = 0; h < x_tgt.height; ++h)
    for (int w = 0; w < x_tgt.width; ++w) {
      const double o = omega_diag[static_cast<std::size_t>(h) * x_tgt.width + w];
      for (int c = 0; c < x_tgt.channels; ++c) {
        const std::size_t i = x_tgt.index(h, w, c);
        g.data[i] = o * (x_tgt.data[i] - x_src.data[i]);
      }
    }
  return g;
}

struct StepStats {
  int t = 0;
  double alpha = 0.0;
  double gamma = 0.0;
  double guidance_l2 = 0.0;
  double omega_active_fraction = 0.0;
};

// One guided generation step from level t to t - 1:
//   1. noise estimate for the target prompt, optionally with the source
//      cross-attention blended in through the background mask;
//   2. classifier-free mixing against the null prompt;
//   3. plain deterministic update with that estimate;
//   4. subtract gamma_t * Omega_t (x_t - x_src_t), pulling background pixels
//      toward the cached source trajectory.
inline LatentTensor csg_reverse_step(const LatentTensor& x, int t,
                                     const TrajectoryCache& cache,
                                     const MaskBundle& masks,
                                     const Prompt& y_tgt, const Denoiser& d,
                                     const NoiseSchedule& s,
                                     const GuidanceConfig& cfg,
                                     StepStats* stats = nullptr) {
  if (t < 1 || t > s.steps)
    throw std::out_of_range("csg_reverse_step: level must lie in [1, T].");
  if (static_cast<int>(cache.latents.size()) != s.steps + 1)
    throw std::logic_error("csg_reverse_step: cache does not match schedule.");

  LatentTensor eps;
  if (cfg.mixup_enabled) {
    if (!d.provides_attention())
      throw std::invalid_argument(
          "csg_reverse_step: mixup needs an attention backend.");
    if (cache.src_attention.empty())
      throw std::logic_error(
          "csg_reverse_step: mixup needs recorded source attention.");
    // Source maps for level t; inversion recorded levels 0..T-1, so the top
    // level reuses the T-1 record.
    const std::size_t rec =
        static_cast<std::size_t>(std::min(t, s.steps - 1));
    if (rec >= cache.src_attention.size())
      throw std::logic_error("csg_reverse_step: missing source attention.");
    const AttentionRecord& src_rec = cache.src_attention[rec];
    DenoiserOutput probe = d.predict(x, t, y_tgt, true);
    if (!probe.attention)
      throw std::logic_error("csg_reverse_step: backend returned no attention.");
    const TokenMaps mixed = mixup_cross_attention(
        src_rec.cross, probe.attention->cross, masks.background);
    DenoiserOutput cond = d.predict_with_cross(x, t, y_tgt, mixed, false);
    const DenoiserOutput uncond =
        d.predict(x, t, null_prompt_like(y_tgt), false);
    eps = std::move(cond.eps);
    if (cfg.cfg_scale != 1.0) {
      for (std::size_t i = 0; i < eps.size(); ++i)
        eps.data[i] = uncond.eps.data[i] +
                      cfg.cfg_scale * (eps.data[i] - uncond.eps.data[i]);
    }
  } else {
    eps = cfg_eps(d, x, t, y_tgt, cfg.cfg_scale).eps;
  }

  LatentTensor out = ddim_update(x, eps, s.at(t), s.at(t - 1));

  const double g = gamma(s, t);
  const BoolGrid active =
      binary_schedule(masks.background, t, s.steps, masks.delta);
  const std::vector<double> diag =
      precision_diag(masks.background, active, masks.lambda_pre);
  const LatentTensor& x_src = cache.latents[static_cast<std::size_t>(t)];
  const LatentTensor pull = guidance_term(x, x_src, diag, s, t);
  double guidance_sq = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double corr = g * pull.data[i];
    // Exact-zero corrections are skipped so a disabled guide leaves the
    // update bit-identical to the plain one.
    if (corr == 0.0) continue;
    out.data[i] -= corr;
    guidance_sq += corr * corr;
  }

  if (!all_finite(out))
    throw std::runtime_error("csg_reverse_step: non-finite latent at level " +
                             std::to_string(t - 1) + ".");

  if (stats != nullptr) {
    stats->t = t;
    stats->alpha = s.at(t);
    stats->gamma = g;
    stats->guidance_l2 = std::sqrt(guidance_sq);
    stats->omega_active_fraction =
        static_cast<double>(active.count()) / static_cast<double>(active.size());
  }
  return out;
}

struct EditReport {
  GuidanceConfig config;
  std::vector<StepStats> steps;
  long backend_calls = 0;
  long expected_backend_calls = 0;
  double mask_background_mean = 0.0;
};

struct EditResult {
  LatentTensor image;
  EditReport report;
  std::optional<MaskBundle> masks;
};

// Full edit: invert under the source prompt, then regenerate under the
// target prompt with score guidance and attention mixup.
inline EditResult edit(const LatentTensor& x_src, const Prompt& y_src,
                       const Prompt& y_tgt, const Denoiser& d,
                       const NoiseSchedule& s, const GuidanceConfig& cfg) {
  validate_edit_pair(y_src, y_tgt);
  validate_guidance_config(cfg);
  if (cfg.steps != s.steps)
    throw std::invalid_argument("edit: config steps do not match the schedule.");
  const bool needs_masks = cfg.mixup_enabled || cfg.lambda_pre > 0.0;
  if (cfg.mixup_enabled && !d.provides_attention())
    throw std::invalid_argument(
        "edit: mixup requires an attention backend; disable mixup.");

  CountingDenoiser counted(d);
  TrajectoryCache cache = invert_with_cache(x_src, y_src, counted, s, cfg);

  const bool recon_pass =
      needs_masks && cache.summary &&
      cfg.self_attn_source == SelfAttnSource::reconstruction;
  EditResult result;
  if (needs_masks) {
    if (cache.summary) {
      AttentionSummary summary = *cache.summary;
      if (recon_pass) {
        // Use attention gathered while re-generating the source instead of
        // while inverting it. Mixup still blends the inversion-time maps;
        // only the mask summary changes.
        std::vector<AttentionRecord> recs;
        LatentTensor x = cache.latents.back();
        for (int t = s.steps; t >= 1; --t) {
          DenoiserOutput out = counted.predict(x, t, y_src, true);
          if (!out.attention)
            throw std::logic_error("edit: backend returned no attention.");
          recs.push_back(std::move(*out.attention));
          x = ddim_update(x, out.eps, s.at(t), s.at(t - 1));
        }
        summary = accumulate_attention(recs);
      }
      result.masks = make_mask_bundle(summary, y_src.edited_index,
                                      cfg.lambda_pre, cfg.delta);
    } else if (cfg.fixed_background) {
      result.masks = uniform_mask_bundle(x_src.height, x_src.width,
                                         *cfg.fixed_background,
                                         cfg.lambda_pre, cfg.delta);
    } else {
      throw std::invalid_argument(
          "edit: guidance needs attention maps or a fixed_background value.");
    }
  } else {
    // Guidance is off; an all-zero diagonal leaves the update untouched.
    result.masks = uniform_mask_bundle(x_src.height, x_src.width, 0.0,
                                       0.0, cfg.delta);
  }

  LatentTensor x = cache.latents.back();
  result.report.config = cfg;
  result.report.steps.reserve(static_cast<std::size_t>(s.steps));
  for (int t = s.steps; t >= 1; --t) {
    StepStats stats;
    x = csg_reverse_step(x, t, cache, *result.masks, y_tgt, counted, s, cfg,
                         &stats);
    result.report.steps.push_back(stats);
  }
  double bg_mean = 0.0;
  for (double v : result.masks->background.v) bg_mean += v;
  result.report.mask_background_mean =
      bg_mean / static_cast<double>(result.masks->background.size());
  result.report.backend_calls = counted.calls();
  const long per_step = cfg.mixup_enabled ? 3 : 2;
  result.report.expected_backend_calls =
      static_cast<long>(s.steps) * (1 + per_step) +
      (recon_pass ? static_cast<long>(s.steps) : 0);
  if (result.report.backend_calls != result.report.expected_backend_calls)
    throw std::logic_error("edit: backend call count drifted from the "
                           "step-count contract.");
  result.image = std::move(x);
  return result;
}

// Baseline: plain inversion followed by classifier-free regeneration under
// the target prompt. Written against the primitive steps on purpose so the
// guided path can be checked against it.
inline LatentTensor naive_ddim_translate(const LatentTensor& x_src,
                                         const Prompt& y_src,
                                         const Prompt& y_tgt,
                                         const Denoiser& d,
                                         const NoiseSchedule& s,
                                         double cfg_scale) {
  validate_edit_pair(y_src, y_tgt);
  LatentTensor x = x_src;
  for (int t = 0; t < s.steps; ++t) {
    const LatentTensor eps = d.predict(x, t, y_src, false).eps;
    x = ddim_update(x, eps, s.at(t), s.at(t + 1));
  }
  for (int t = s.steps; t >= 1; --t) {
    const LatentTensor eps = cfg_eps(d, x, t, y_tgt, cfg_scale).eps;
    x = ddim_update(x, eps, s.at(t), s.at(t - 1));
  }
  return x;
}

// Invert and regenerate under the same prompt without guidance; measures
// how well the deterministic loop round-trips.
inline LatentTensor ddim_round_trip(const LatentTensor& x0, const Prompt& y,
                                    const Denoiser& d, const NoiseSchedule& s) {
  LatentTensor x = x0;
  for (int t = 0; t < s.steps; ++t) {
    const LatentTensor eps = d.predict(x, t, y, false).eps;
    x = ddim_update(x, eps, s.at(t), s.at(t + 1));
  }
  for (int t = s.steps; t >= 1; --t) {
    const LatentTensor eps = d.predict(x, t, y, false).eps;
    x = ddim_update(x, eps, s.at(t), s.at(t - 1));
  }
  return x;
}

}  // namespace csg
