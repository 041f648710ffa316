#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csg/rng.hpp"
#include "csg/schedule.hpp"
#include "csg/tensor.hpp"

namespace csg {

// Isotropic Gaussian mixture over flattened images: one mixture per class.
struct ClassSpec {
  std::vector<double> weights;
  std::vector<std::vector<double>> means;
  double variance = 1.0;
};

struct GmmTask {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<ClassSpec> classes;

  int dim() const { return height * width * channels; }
};

inline void validate_task(const GmmTask& task) {
  if (task.height <= 0 || task.width <= 0 || task.channels <= 0)
    throw std::invalid_argument("gmm task: dimensions must be positive.");
  if (task.classes.empty())
    throw std::invalid_argument("gmm task: needs at least one class.");
  const std::size_t d = static_cast<std::size_t>(task.dim());
  for (const ClassSpec& c : task.classes) {
    if (c.weights.empty() || c.weights.size() != c.means.size())
      throw std::invalid_argument("gmm task: weights and means must pair up.");
    double total = 0.0;
    for (double w : c.weights) {
      if (w < 0.0) throw std::invalid_argument("gmm task: negative weight.");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw std::invalid_argument("gmm task: weights must sum to 1.");
    if (!(c.variance > 0.0))
      throw std::invalid_argument("gmm task: variance must be positive.");
    for (const auto& m : c.means)
      if (m.size() != d)
        throw std::invalid_argument("gmm task: mean dimension mismatch.");
  }
}

inline void check_class_id(const GmmTask& task, int class_id) {
  if (class_id < 0 || class_id >= static_cast<int>(task.classes.size()))
    throw std::out_of_range("gmm task: class id " + std::to_string(class_id) +
                            " out of range.");
}

namespace detail {

// Per-component log joint log(w_j) + log N(x; sqrt(a) mu_j, v I) for the
// level-t marginal, where v = a * sigma^2 + 1 - a.
inline std::vector<double> component_log_joint(const ClassSpec& spec,
                                               const std::vector<double>& x,
                                               double a) {
  const std::size_t d = x.size();
  const double v = a * spec.variance + 1.0 - a;
  const double sa = std::sqrt(a);
  const double norm = -0.5 * static_cast<double>(d) *
                      std::log(2.0 * std::numbers::pi * v);
  std::vector<double> lj(spec.weights.size());
  for (std::size_t j = 0; j < spec.weights.size(); ++j) {
    double q = 0.0;
    const std::vector<double>& mu = spec.means[j];
    for (std::size_t i = 0; i < d; ++i) {
      const double r = x[i] - sa * mu[i];
      q += r * r;
    }
    lj[j] = (spec.weights[j] > 0.0 ? std::log(spec.weights[j])
                                   : -std::numeric_limits<double>::infinity()) +
            norm - 0.5 * q / v;
  }
  return lj;
}

inline double log_sum_exp(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// Responsibilities softmax(lj) plus the log marginal.
inline double responsibilities(const std::vector<double>& lj,
                               std::vector<double>& r) {
  const double lse = log_sum_exp(lj);
  r.resize(lj.size());
  for (std::size_t j = 0; j < lj.size(); ++j) r[j] = std::exp(lj[j] - lse);
  return lse;
}

struct MixtureEval {
  double logpdf = 0.0;
  std::vector<double> score;  // d/dx log p_t(x)
};

// Score of the diffused mixture: sum_j r_j (sqrt(a) mu_j - x) / v.
inline MixtureEval eval_mixture(const ClassSpec& spec,
                                const std::vector<double>& x, double a) {
  const std::size_t d = x.size();
  const double v = a * spec.variance + 1.0 - a;
  const double sa = std::sqrt(a);
  std::vector<double> lj = component_log_joint(spec, x, a);
  std::vector<double> r;
  MixtureEval out;
  out.logpdf = responsibilities(lj, r);
  out.score.assign(d, 0.0);
  for (std::size_t j = 0; j < spec.weights.size(); ++j) {
    if (r[j] == 0.0) continue;
    const std::vector<double>& mu = spec.means[j];
    const double rj = r[j];
    for (std::size_t i = 0; i < d; ++i)
      out.score[i] += rj * (sa * mu[i] - x[i]) / v;
  }
  return out;
}

inline void check_input(const GmmTask& task, const LatentTensor& x) {
  if (x.height != task.height || x.width != task.width ||
      x.channels != task.channels)
    throw std::logic_error("gmm: input shape does not match task.");
}

}  // namespace detail

// Log density of the class-conditional diffused marginal at level t.
inline double marginal_logpdf(const GmmTask& task, int class_id,
                              const LatentTensor& x, int t,
                              const NoiseSchedule& s) {
  check_class_id(task, class_id);
  detail::check_input(task, x);
  const auto lj =
      detail::component_log_joint(task.classes[class_id], x.data, s.at(t));
  return detail::log_sum_exp(lj);
}

// Exact noise prediction eps = -sqrt(1 - a_t) * score. Zero at t = 0.
inline LatentTensor eps_hat(const GmmTask& task, int class_id,
                            const LatentTensor& x, int t,
                            const NoiseSchedule& s) {
  check_class_id(task, class_id);
  detail::check_input(task, x);
  LatentTensor out = zeros_like(x);
  if (t == 0) return out;
  const double a = s.at(t);
  const auto ev = detail::eval_mixture(task.classes[class_id], x.data, a);
  const double c = -std::sqrt(1.0 - a);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = c * ev.score[i];
  return out;
}

// Exact posterior mean E[x0 | x_t]: responsibility-weighted shrinkage of x
// toward each component mean.
inline LatentTensor posterior_mean_x0(const GmmTask& task, int class_id,
                                      const LatentTensor& x, int t,
                                      const NoiseSchedule& s) {
  check_class_id(task, class_id);
  detail::check_input(task, x);
  const ClassSpec& spec = task.classes[class_id];
  const double a = s.at(t);
  const double sa = std::sqrt(a);
  const double v = a * spec.variance + 1.0 - a;
  const auto lj = detail::component_log_joint(spec, x.data, a);
  std::vector<double> r;
  detail::responsibilities(lj, r);
  LatentTensor out = zeros_like(x);
  for (std::size_t j = 0; j < spec.weights.size(); ++j) {
    if (r[j] == 0.0) continue;
    const std::vector<double>& mu = spec.means[j];
    const double rj = r[j];
    // E[x0 | x, component j] = mu_j + sqrt(a) sigma^2 / v * (x - sqrt(a) mu_j)
    const double shrink = sa * spec.variance / v;
    for (std::size_t i = 0; i < out.size(); ++i)
      out.data[i] += rj * (mu[i] + shrink * (x.data[i] - sa * mu[i]));
  }
  return out;
}

// Draw a clean image from the class mixture.
inline LatentTensor sample_x0(const GmmTask& task, int class_id,
                              std::uint64_t seed) {
  check_class_id(task, class_id);
  const ClassSpec& spec = task.classes[class_id];
  CounterRng rng(seed, 0x67736d6dull);
  const std::size_t j = rng.categorical(spec.weights);
  const double sigma = std::sqrt(spec.variance);
  LatentTensor out(task.height, task.width, task.channels);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] = spec.means[j][i] + sigma * rng.normal();
  return out;
}

// Noise predictor backed by the analytic mixture. Prompts resolve to a class
// through the edited token; an all-null prompt means the unconditional
// marginal, i.e. the uniform mixture over classes.
class AnalyticGmmDenoiser final : public Denoiser {
 public:
  AnalyticGmmDenoiser(GmmTask task, std::map<int, int> token_to_class,
                      NoiseSchedule schedule)
      : task_(std::move(task)),
        token_to_class_(std::move(token_to_class)),
        schedule_(std::move(schedule)) {
    validate_task(task_);
    validate_schedule(schedule_);
    for (const auto& [tok, cid] : token_to_class_) check_class_id(task_, cid);
  }

  DenoiserOutput predict(const LatentTensor& x, int t, const Prompt& y,
                         bool /*record_attention*/) const override {
    detail::check_input(task_, x);
    DenoiserOutput out;
    if (t == 0) {
      out.eps = zeros_like(x);
      return out;
    }
    const double a = schedule_.at(t);
    std::vector<double> score;
    if (all_null(y)) {
      score = unconditional_score(x.data, a);
    } else {
      const int tok = y.tokens[static_cast<std::size_t>(y.edited_index)];
      const auto it = token_to_class_.find(tok);
      if (it == token_to_class_.end())
        throw std::out_of_range("gmm denoiser: token " + std::to_string(tok) +
                                " has no class mapping.");
      score = detail::eval_mixture(task_.classes[it->second], x.data, a).score;
    }
    const double c = -std::sqrt(1.0 - a);
    out.eps = zeros_like(x);
    for (std::size_t i = 0; i < out.eps.size(); ++i)
      out.eps.data[i] = c * score[i];
    return out;
  }

  bool provides_attention() const override { return false; }

  const GmmTask& task() const { return task_; }

 private:
  // p(x) = (1/C) sum_c p_c(x); score mixes class scores by class posterior.
  std::vector<double> unconditional_score(const std::vector<double>& x,
                                          double a) const {
    const std::size_t nc = task_.classes.size();
    std::vector<double> lp(nc);
    std::vector<detail::MixtureEval> ev(nc);
    for (std::size_t c = 0; c < nc; ++c) {
      ev[c] = detail::eval_mixture(task_.classes[c], x, a);
      lp[c] = ev[c].logpdf - std::log(static_cast<double>(nc));
    }
    std::vector<double> post;
    detail::responsibilities(lp, post);
    std::vector<double> score(x.size(), 0.0);
    for (std::size_t c = 0; c < nc; ++c) {
      if (post[c] == 0.0) continue;
      for (std::size_t i = 0; i < score.size(); ++i)
        score[i] += post[c] * ev[c].score[i];
    }
    return score;
  }

  GmmTask task_;
  std::map<int, int> token_to_class_;
  NoiseSchedule schedule_;
};

inline void to_json(nlohmann::json& j, const ClassSpec& c) {
  j = nlohmann::json{{"weights", c.weights},
                     {"means", c.means},
                     {"variance", c.variance}};
}

inline void from_json(const nlohmann::json& j, ClassSpec& c) {
  j.at("weights").get_to(c.weights);
  j.at("means").get_to(c.means);
  j.at("variance").get_to(c.variance);
}

inline void to_json(nlohmann::json& j, const GmmTask& t) {
  j = nlohmann::json{{"height", t.height},
                     {"width", t.width},
                     {"channels", t.channels},
                     {"classes", t.classes}};
}

inline void from_json(const nlohmann::json& j, GmmTask& t) {
  j.at("height").get_to(t.height);
  j.at("width").get_to(t.width);
  j.at("channels").get_to(t.channels);
  j.at("classes").get_to(t.classes);
}

// Small two-class reference task shared by tests and examples: smooth
// deterministic component means on an 8 x 8 x 3 canvas.
inline GmmTask reference_gmm_task(double variance = 0.09) {
  GmmTask task;
  task.height = 8;
  task.width = 8;
  task.channels = 3;
  const int d = task.dim();
  auto field = [&](double fh, double fw, double phase, int c0) {
    std::vector<double> m(static_cast<std::size_t>(d));
    for (int h = 0; h < task.height; ++h)
      for (int w = 0; w < task.width; ++w)
        for (int c = 0; c < task.channels; ++c) {
          const double val =
              0.5 * std::sin(fh * (h + 1) + phase * (c + 1)) *
              std::cos(fw * (w + 1) + 0.3 * ((c + c0) % 3));
          m[(static_cast<std::size_t>(h) * task.width + w) * task.channels + c] = val;
        }
    return m;
  };
  ClassSpec a;
  a.weights = {0.6, 0.4};
  a.means = {field(0.7, 0.4, 0.5, 0), field(0.3, 0.9, 1.1, 1)};
  a.variance = variance;
  ClassSpec b;
  b.weights = {0.5, 0.5};
  b.means = {field(1.1, 0.2, 2.0, 2), field(0.5, 0.6, 2.7, 0)};
  b.variance = variance;
  task.classes = {a, b};
  validate_task(task);
  return task;
}

}  // namespace csg
