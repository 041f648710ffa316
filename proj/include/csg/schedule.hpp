#pragma once

#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "csg/attention.hpp"
#include "csg/prompt.hpp"
#include "csg/tensor.hpp"

namespace csg {

// Cumulative signal levels alpha[0..T] with alpha[0] = 1, strictly
// decreasing, alpha[T] > 0. Index t is the diffusion level.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> alpha;

  double at(int t) const {
    if (t < 0 || t > steps)
      throw std::out_of_range("NoiseSchedule: level " + std::to_string(t) +
                              " outside [0, " + std::to_string(steps) + "].");
    return alpha[static_cast<std::size_t>(t)];
  }
};

inline void validate_schedule(const NoiseSchedule& s) {
  if (s.steps < 1) throw std::invalid_argument("schedule: needs at least one step.");
  if (static_cast<int>(s.alpha.size()) != s.steps + 1)
    throw std::invalid_argument("schedule: alpha must hold T+1 values.");
  if (s.alpha[0] != 1.0)
    throw std::invalid_argument("schedule: alpha_0 must equal 1.");
  for (int t = 1; t <= s.steps; ++t)
    if (!(s.alpha[t] < s.alpha[t - 1]))
      throw std::invalid_argument("schedule: alpha must be strictly decreasing.");
  if (!(s.alpha[s.steps] > 0.0))
    throw std::invalid_argument("schedule: alpha_T must stay positive.");
}

enum class ScheduleKind { linear_alpha, cosine_alpha };

inline ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "linear_alpha") return ScheduleKind::linear_alpha;
  if (name == "cosine_alpha") return ScheduleKind::cosine_alpha;
  throw std::invalid_argument("schedule kind '" + name + "' unknown.");
}

inline const char* to_string(ScheduleKind k) {
  return k == ScheduleKind::linear_alpha ? "linear_alpha" : "cosine_alpha";
}

inline NoiseSchedule make_schedule(int steps, double alpha_final, ScheduleKind kind) {
  if (steps < 1) throw std::invalid_argument("make_schedule: steps must be >= 1.");
  if (!(alpha_final > 0.0 && alpha_final < 1.0))
    throw std::invalid_argument("make_schedule: alpha_final must lie in (0, 1).");
  NoiseSchedule s;
  s.steps = steps;
  s.alpha.resize(static_cast<std::size_t>(steps) + 1);
  for (int t = 0; t <= steps; ++t) {
    const double frac = static_cast<double>(t) / steps;
    if (kind == ScheduleKind::linear_alpha) {
      s.alpha[t] = 1.0 + (alpha_final - 1.0) * frac;
    } else {
      const double c = std::cos(std::numbers::pi * frac / 2.0);
      s.alpha[t] = alpha_final + (1.0 - alpha_final) * c * c;
    }
  }
  // Pin the endpoints; cos(pi/2) is not exactly zero in floating point.
  s.alpha[0] = 1.0;
  s.alpha[steps] = alpha_final;
  validate_schedule(s);
  return s;
}

// Coefficient linking the score-form and the predicted-x0 form of one
// deterministic reverse step from level t to t-1.
inline double gamma(const NoiseSchedule& s, int t) {
  if (t < 1 || t > s.steps)
    throw std::domain_error("gamma: level must lie in [1, T].");
  const double a_prev = s.at(t - 1);
  const double a_cur = s.at(t);
  if (a_cur >= 1.0)
    throw std::domain_error("gamma: alpha_t must be below 1.");
  return std::sqrt(a_prev / a_cur) - std::sqrt((1.0 - a_prev) / (1.0 - a_cur));
}

// Clean-image estimate implied by a noise prediction at level t.
inline LatentTensor predict_x0(const LatentTensor& x, const LatentTensor& eps,
                               const NoiseSchedule& s, int t) {
  require_same_shape(x, eps, "predict_x0");
  const double a = s.at(t);
  const double sa = std::sqrt(a);
  const double sn = std::sqrt(1.0 - a);
  LatentTensor out = zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i)
    out.data[i] = (x.data[i] - sn * eps.data[i]) / sa;
  return out;
}

// Score of the diffused marginal expressed through the noise prediction.
inline LatentTensor score_from_eps(const LatentTensor& eps,
                                   const NoiseSchedule& s, int t) {
  const double a = s.at(t);
  if (a >= 1.0)
    throw std::domain_error("score_from_eps: alpha_t must be below 1.");
  const double inv = -1.0 / std::sqrt(1.0 - a);
  LatentTensor out = zeros_like(eps);
  for (std::size_t i = 0; i < eps.size(); ++i)
    out.data[i] = inv * eps.data[i];
  return out;
}

// Deterministic transport between two signal levels given a noise estimate:
// project to the implied x0, then re-noise at the destination level. Both
// inversion and generation go through this single code path.
inline LatentTensor ddim_update(const LatentTensor& x, const LatentTensor& eps,
                                double alpha_from, double alpha_to) {
  require_same_shape(x, eps, "ddim_update");
  const double sf = std::sqrt(alpha_from);
  const double snf = std::sqrt(1.0 - alpha_from);
  const double st = std::sqrt(alpha_to);
  const double snt = std::sqrt(1.0 - alpha_to);
  LatentTensor out = zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = (x.data[i] - snf * eps.data[i]) / sf;
    out.data[i] = st * f + snt * eps.data[i];
  }
  return out;
}

struct DenoiserOutput {
  LatentTensor eps;
  std::optional<AttentionRecord> attention;
};

// Noise predictor interface. Implementations must be pure: identical inputs
// give bitwise-identical outputs, and record_attention must not change eps.
class Denoiser {
 public:
  virtual ~Denoiser() = default;

  virtual DenoiserOutput predict(const LatentTensor& x, int t, const Prompt& y,
                                 bool record_attention) const = 0;

  virtual bool provides_attention() const { return false; }

  // Forward pass with the post-softmax cross-attention maps replaced by
  // `forced` before value mixing. Only attention backends support this.
  virtual DenoiserOutput predict_with_cross(const LatentTensor& /*x*/, int /*t*/,
                                            const Prompt& /*y*/,
                                            const TokenMaps& /*forced*/,
                                            bool /*record_attention*/) const {
    throw std::logic_error("denoiser: backend has no cross-attention to override.");
  }
};

// Single inversion step from level t to t+1.
inline LatentTensor ddim_invert_step(const LatentTensor& x, int t,
                                     const Denoiser& d, const Prompt& y,
                                     const NoiseSchedule& s) {
  if (t < 0 || t >= s.steps)
    throw std::out_of_range("ddim_invert_step: level must lie in [0, T-1].");
  const LatentTensor eps = d.predict(x, t, y, false).eps;
  return ddim_update(x, eps, s.at(t), s.at(t + 1));
}

// Single generation step from level t to t-1.
inline LatentTensor ddim_reverse_step(const LatentTensor& x, int t,
                                      const Denoiser& d, const Prompt& y,
                                      const NoiseSchedule& s) {
  if (t < 1 || t > s.steps)
    throw std::out_of_range("ddim_reverse_step: level must lie in [1, T].");
  const LatentTensor eps = d.predict(x, t, y, false).eps;
  return ddim_update(x, eps, s.at(t), s.at(t - 1));
}

}  // namespace csg
