#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "csg/rng.hpp"
#include "csg/schedule.hpp"
#include "csg/scene.hpp"
#include "csg/tensor.hpp"
#include "csg/toy_denoiser.hpp"
#include "csg/util.hpp"

namespace csg {

struct TrainConfig {
  int epochs = 24;
  int batch_size = 16;
  double learning_rate = 2e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double p_uncond = 0.1;  // chance a sample trains the null prompt
  int threads = 1;
  std::uint64_t seed = 0;
};

struct EpochStats {
  int epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
};

struct TrainResult {
  DenoiserWeights weights;
  std::vector<EpochStats> log;
  // Validation error of the constant-zero predictor on the same tuples;
  // the quality bar for a usable model.
  double zero_predictor_val_mse = 0.0;
};

struct TrainingScene {
  LatentTensor image;
  Prompt prompt;
};

namespace detail {

// Fixed per-scene evaluation tuples so validation error is comparable
// across epochs.
struct ValTuple {
  LatentTensor x_t;
  int t = 0;
  Prompt prompt;
  LatentTensor target;
};

inline ValTuple make_val_tuple(const TrainingScene& sc, const NoiseSchedule& s,
                               std::uint64_t seed) {
  CounterRng rng(seed, 0x76616c74ull);
  ValTuple v;
  v.t = rng.uniform_int(1, s.steps);
  v.prompt = sc.prompt;
  v.target = zeros_like(sc.image);
  for (double& e : v.target.data) e = rng.normal();
  const double sa = std::sqrt(s.at(v.t));
  const double sn = std::sqrt(1.0 - s.at(v.t));
  v.x_t = zeros_like(sc.image);
  for (std::size_t i = 0; i < v.x_t.size(); ++i)
    v.x_t.data[i] = sa * sc.image.data[i] + sn * v.target.data[i];
  return v;
}

struct AdamState {
  DenoiserWeights m;
  DenoiserWeights v;
  long step = 0;
};

inline void adam_update(DenoiserWeights& w, const DenoiserWeights& grad,
                        AdamState& st, const TrainConfig& cfg) {
  ++st.step;
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  auto* gw = const_cast<DenoiserWeights*>(&grad);
  for_each_matrix(w, [&](const char* name, Matrix& mat) {
    Matrix* gm = nullptr;
    Matrix* mm = nullptr;
    Matrix* vm = nullptr;
    for_each_matrix(*gw, [&](const char* n, Matrix& m2) {
      if (std::string(n) == name) gm = &m2;
    });
    for_each_matrix(st.m, [&](const char* n, Matrix& m2) {
      if (std::string(n) == name) mm = &m2;
    });
    for_each_matrix(st.v, [&](const char* n, Matrix& m2) {
      if (std::string(n) == name) vm = &m2;
    });
    for (std::size_t i = 0; i < mat.a.size(); ++i) {
      const double gi = gm->a[i];
      mm->a[i] = b1 * mm->a[i] + (1.0 - b1) * gi;
      vm->a[i] = b2 * vm->a[i] + (1.0 - b2) * gi * gi;
      const double mhat = mm->a[i] / corr1;
      const double vhat = vm->a[i] / corr2;
      mat.a[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  });
}

inline void add_grad(DenoiserWeights& acc, const DenoiserWeights& g) {
  auto* gp = const_cast<DenoiserWeights*>(&g);
  for_each_matrix(acc, [&](const char* name, Matrix& mat) {
    for_each_matrix(*gp, [&](const char* n, Matrix& m2) {
      if (std::string(n) == name)
        for (std::size_t i = 0; i < mat.a.size(); ++i) mat.a[i] += m2.a[i];
    });
  });
}

inline void scale_grad(DenoiserWeights& g, double s) {
  for_each_matrix(g, [&](const char*, Matrix& mat) {
    for (double& v : mat.a) v *= s;
  });
}

}  // namespace detail

// Epsilon-prediction training: draw (t, noise) per sample, diffuse the clean
// image, regress the noise. A p_uncond fraction of samples swap in the null
// prompt so the unconditional branch is learned too. Per-sample gradients
// are reduced in sample order, so results do not depend on thread count.
inline TrainResult train_denoiser(const std::vector<TrainingScene>& train,
                                  const std::vector<TrainingScene>& val,
                                  const NoiseSchedule& schedule,
                                  const TrainConfig& cfg,
                                  std::vector<EpochStats>* live_log = nullptr) {
  if (train.empty())
    throw std::invalid_argument("train_denoiser: empty training set.");
  if (cfg.epochs < 1 || cfg.batch_size < 1)
    throw std::invalid_argument("train_denoiser: bad epochs or batch size.");
  validate_schedule(schedule);

  TrainResult result;
  result.weights = init_denoiser_weights(derive_seed(cfg.seed, 0xA11C0DEull),
                                         kVocabSize, kSceneChannels);

  std::vector<detail::ValTuple> val_tuples;
  val_tuples.reserve(val.size());
  for (std::size_t i = 0; i < val.size(); ++i)
    val_tuples.push_back(detail::make_val_tuple(
        val[i], schedule, derive_seed(cfg.seed, 0xB000000ull + i)));
  {
    double zero = 0.0;
    for (const auto& v : val_tuples) {
      double acc = 0.0;
      for (double e : v.target.data) acc += e * e;
      zero += acc / static_cast<double>(v.target.size());
    }
    result.zero_predictor_val_mse =
        val_tuples.empty() ? 0.0 : zero / static_cast<double>(val_tuples.size());
  }

  detail::AdamState adam;
  adam.m = zero_weights(kVocabSize, kSceneChannels);
  adam.v = zero_weights(kVocabSize, kSceneChannels);

  const int n = static_cast<int>(train.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Deterministic shuffle per epoch.
    CounterRng shuffle_rng(derive_seed(cfg.seed, 0x5BL + epoch), 0);
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);

    double epoch_loss = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, n - start);
      std::vector<LossGrad> per_sample(static_cast<std::size_t>(bsz));
      parallel_for(bsz, cfg.threads, [&](int b) {
        const int idx = order[static_cast<std::size_t>(start + b)];
        const TrainingScene& sc = train[static_cast<std::size_t>(idx)];
        CounterRng rng(derive_seed(cfg.seed, 0xE0000000ull + epoch),
                       static_cast<std::uint64_t>(start + b));
        const int t = rng.uniform_int(1, schedule.steps);
        LatentTensor target = zeros_like(sc.image);
        for (double& e : target.data) e = rng.normal();
        const double sa = std::sqrt(schedule.at(t));
        const double sn = std::sqrt(1.0 - schedule.at(t));
        LatentTensor x_t = zeros_like(sc.image);
        for (std::size_t i = 0; i < x_t.size(); ++i)
          x_t.data[i] = sa * sc.image.data[i] + sn * target.data[i];
        const Prompt& prompt = (rng.uniform() < cfg.p_uncond)
                                   ? null_prompt_like(sc.prompt)
                                   : sc.prompt;
        per_sample[static_cast<std::size_t>(b)] = denoiser_loss_grad(
            result.weights, x_t, t, schedule.steps, prompt, target);
      });
      DenoiserWeights grad = zero_weights(kVocabSize, kSceneChannels);
      double batch_loss = 0.0;
      for (const LossGrad& lg : per_sample) {
        detail::add_grad(grad, lg.grad);
        batch_loss += lg.loss;
      }
      detail::scale_grad(grad, 1.0 / bsz);
      detail::adam_update(result.weights, grad, adam, cfg);
      epoch_loss += batch_loss / bsz;
      ++batches;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_mse = epoch_loss / std::max(1, batches);
    std::vector<double> val_losses(val_tuples.size(), 0.0);
    parallel_for(static_cast<int>(val_tuples.size()), cfg.threads, [&](int i) {
      const auto& v = val_tuples[static_cast<std::size_t>(i)];
      const ForwardResult r = denoiser_forward(result.weights, v.x_t, v.t,
                                               schedule.steps, v.prompt);
      val_losses[static_cast<std::size_t>(i)] =
          mean_squared_error(r.eps, v.target);
    });
    double val_sum = 0.0;
    for (double l : val_losses) val_sum += l;
    stats.val_mse =
        val_tuples.empty() ? 0.0 : val_sum / static_cast<double>(val_tuples.size());
    result.log.push_back(stats);
    if (live_log != nullptr) live_log->push_back(stats);
  }
  // Weights are stored on disk as 32-bit reals; snap the in-memory copy to
  // the same grid so a save/load round trip is bit-identical.
  for_each_matrix(result.weights, [](const char*, Matrix& mat) {
    for (double& v : mat.a) v = static_cast<double>(static_cast<float>(v));
  });
  return result;
}

// CSV log: epoch,train_mse,val_mse.
inline void write_training_log(const std::string& path,
                               const std::vector<EpochStats>& log) {
  std::ofstream out(path);
  if (!out)
    throw std::runtime_error("training log: cannot open '" + path + "'.");
  out << "epoch,train_mse,val_mse\n";
  for (const EpochStats& e : log)
    out << e.epoch << "," << format_double(e.train_mse) << ","
        << format_double(e.val_mse) << "\n";
  if (!out)
    throw std::runtime_error("training log: short write to '" + path + "'.");
}

// One labeled tuple for the finite-difference gradient test.
struct GradCheckSample {
  LatentTensor x_t;
  int t = 0;
  int total_steps = 0;
  Prompt prompt;
  LatentTensor target;
};

// Small fixed tuple; the network is resolution-agnostic, so an 8 x 8 input
// keeps the full-parameter sweep fast.
inline GradCheckSample reference_gradcheck_sample(std::uint64_t seed = 17) {
  GradCheckSample s;
  s.t = 37;
  s.total_steps = 50;
  s.prompt.tokens = {1, 5};
  s.prompt.edited_index = 1;
  CounterRng rng(seed, 0x67636b73ull);
  s.x_t = LatentTensor(8, 8, 3);
  for (double& v : s.x_t.data) v = rng.normal();
  s.target = LatentTensor(8, 8, 3);
  for (double& v : s.target.data) v = rng.normal();
  return s;
}

// Central finite differences against the analytic gradient over every
// parameter. Returns the worst relative error, with the denominator floored
// so near-zero gradients compare on an absolute scale.
inline double gradient_check(const DenoiserWeights& weights,
                             const GradCheckSample& s, double fd_step = 1e-4,
                             bool linear_only = false) {
  DenoiserWeights w = weights;
  const LossGrad analytic = denoiser_loss_grad(
      w, s.x_t, s.t, s.total_steps, s.prompt, s.target, linear_only);
  double worst = 0.0;
  auto* gp = const_cast<DenoiserWeights*>(&analytic.grad);
  for_each_matrix(w, [&](const char* name, Matrix& mat) {
    Matrix* gm = nullptr;
    for_each_matrix(*gp, [&](const char* n, Matrix& m2) {
      if (std::string(n) == name) gm = &m2;
    });
    ForwardOptions opt;
    opt.linear_only = linear_only;
    auto loss_only = [&]() {
      const ForwardResult r =
          denoiser_forward(w, s.x_t, s.t, s.total_steps, s.prompt, opt);
      return mean_squared_error(r.eps, s.target);
    };
    for (std::size_t i = 0; i < mat.a.size(); ++i) {
      const double keep = mat.a[i];
      mat.a[i] = keep + fd_step;
      const double up = loss_only();
      mat.a[i] = keep - fd_step;
      const double dn = loss_only();
      mat.a[i] = keep;
      const double fd = (up - dn) / (2.0 * fd_step);
      const double ga = gm->a[i];
      const double denom = std::max(std::abs(ga) + std::abs(fd), 1e-4);
      worst = std::max(worst, std::abs(ga - fd) / denom);
    }
  });
  return worst;
}

}  // namespace csg
