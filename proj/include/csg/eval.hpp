#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "csg/rng.hpp"
#include "csg/scene.hpp"
#include "csg/tensor.hpp"
#include "csg/weights_io.hpp"

namespace csg {

enum class DistanceKind { pixel_l2, gradmap_l2 };

inline DistanceKind distance_kind_from_string(const std::string& name) {
  if (name == "pixel_l2") return DistanceKind::pixel_l2;
  if (name == "gradmap_l2") return DistanceKind::gradmap_l2;
  throw std::invalid_argument("distance kind '" + name + "' unknown.");
}

inline const char* to_string(DistanceKind k) {
  return k == DistanceKind::pixel_l2 ? "pixel_l2" : "gradmap_l2";
}

// Per-channel gradient magnitude from forward differences; the difference
// toward a missing neighbor is zero, so flat regions and global brightness
// shifts both map to zero.
inline LatentTensor gradient_magnitude_map(const LatentTensor& x) {
  LatentTensor g = zeros_like(x);
  for (int h = 0; h < x.height; ++h)
    for (int w = 0; w < x.width; ++w)
      for (int c = 0; c < x.channels; ++c) {
        const double v = x.at(h, w, c);
        const double dh = (h + 1 < x.height) ? x.at(h + 1, w, c) - v : 0.0;
        const double dw = (w + 1 < x.width) ? x.at(h, w + 1, c) - v : 0.0;
        g.at(h, w, c) = std::sqrt(dh * dh + dw * dw);
      }
  return g;
}

// Mean squared difference of the two gradient-magnitude maps; insensitive to
// constant offsets, sensitive to moved or reshaped content.
inline double structure_distance(const LatentTensor& a, const LatentTensor& b) {
  require_same_shape(a, b, "structure_distance");
  return mean_squared_error(gradient_magnitude_map(a),
                            gradient_magnitude_map(b));
}

struct DistanceMatrix {
  int n = 0;
  std::vector<double> entries;  // n x n, row-major

  DistanceMatrix() = default;
  explicit DistanceMatrix(int count)
      : n(count), entries(static_cast<std::size_t>(count) * count, 0.0) {}

  double at(int i, int j) const {
    return entries[static_cast<std::size_t>(i) * n + j];
  }
  double& at(int i, int j) {
    return entries[static_cast<std::size_t>(i) * n + j];
  }
};

// Pairwise distances with zero diagonal; symmetric by construction.
inline DistanceMatrix distance_matrix(const std::vector<LatentTensor>& images,
                                      DistanceKind kind) {
  if (images.size() < 2)
    throw std::invalid_argument("distance_matrix: needs at least two images.");
  for (std::size_t i = 1; i < images.size(); ++i)
    require_same_shape(images[0], images[i], "distance_matrix");
  std::vector<LatentTensor> maps;
  if (kind == DistanceKind::gradmap_l2) {
    maps.reserve(images.size());
    for (const LatentTensor& img : images)
      maps.push_back(gradient_magnitude_map(img));
  }
  const std::vector<LatentTensor>& basis =
      kind == DistanceKind::gradmap_l2 ? maps : images;
  DistanceMatrix g(static_cast<int>(images.size()));
  for (int i = 0; i < g.n; ++i)
    for (int j = i + 1; j < g.n; ++j) {
      const double d =
          mean_squared_error(basis[static_cast<std::size_t>(i)],
                             basis[static_cast<std::size_t>(j)]);
      g.at(i, j) = d;
      g.at(j, i) = d;
    }
  return g;
}

struct RdResult {
  double rd = 0.0;
  double gamma_star = 0.0;
};

// Least-squares scale fit between two pairwise-distance matrices:
// rd = min over gamma of (1/n) |G_tgt - gamma G_src|_F^2, with the closed-form
// minimizer gamma* = <G_src, G_tgt> / |G_src|^2. A zero source matrix fixes
// gamma* = 0 and scores the target matrix alone.
inline RdResult relational_distance(const DistanceMatrix& g_src,
                                    const DistanceMatrix& g_tgt) {
  if (g_src.n != g_tgt.n || g_src.entries.size() != g_tgt.entries.size())
    throw std::invalid_argument("relational_distance: matrix sizes differ.");
  if (g_src.n < 1)
    throw std::invalid_argument("relational_distance: empty matrices.");
  double dot = 0.0;
  double src_sq = 0.0;
  for (std::size_t i = 0; i < g_src.entries.size(); ++i) {
    dot += g_src.entries[i] * g_tgt.entries[i];
    src_sq += g_src.entries[i] * g_src.entries[i];
  }
  RdResult r;
  r.gamma_star = src_sq == 0.0 ? 0.0 : dot / src_sq;
  double mismatch = 0.0;
  for (std::size_t i = 0; i < g_src.entries.size(); ++i) {
    const double d = g_tgt.entries[i] - r.gamma_star * g_src.entries[i];
    mismatch += d * d;
  }
  r.rd = mismatch / static_cast<double>(g_src.n);
  return r;
}

// Mean squared difference restricted to ground-truth background pixels.
inline double bg_distance(const LatentTensor& x_src, const LatentTensor& x_tgt,
                          const BoolGrid& bg_mask) {
  require_same_shape(x_src, x_tgt, "bg_distance");
  if (bg_mask.height != x_src.height || bg_mask.width != x_src.width)
    throw std::invalid_argument("bg_distance: mask shape mismatch.");
  double acc = 0.0;
  std::size_t covered = 0;
  for (int h = 0; h < x_src.height; ++h)
    for (int w = 0; w < x_src.width; ++w) {
      if (!bg_mask.at(h, w)) continue;
      for (int c = 0; c < x_src.channels; ++c) {
        const double d = x_tgt.at(h, w, c) - x_src.at(h, w, c);
        acc += d * d;
        ++covered;
      }
    }
  if (covered == 0)
    throw std::invalid_argument("bg_distance: background mask is empty.");
  return acc / static_cast<double>(covered);
}

// One-hidden-layer shape classifier: 768 -> 64 ReLU -> 3 logits. Supplies
// the prompt-alignment score for generated images.
struct SceneClassifier {
  Matrix w1;
  std::vector<double> b1;
  Matrix w2;
  std::vector<double> b2;
  bool trained = false;

  SceneClassifier()
      : w1(64, kSceneSize * kSceneSize * kSceneChannels),
        b1(64, 0.0),
        w2(kShapeClassCount, 64),
        b2(static_cast<std::size_t>(kShapeClassCount), 0.0) {}
};

namespace detail {

inline std::vector<double> classifier_logits(const SceneClassifier& clf,
                                             const LatentTensor& image,
                                             std::vector<double>* hidden_out) {
  if (static_cast<int>(image.size()) != clf.w1.cols)
    throw std::invalid_argument("classifier: input size mismatch.");
  std::vector<double> h(static_cast<std::size_t>(clf.w1.rows), 0.0);
  matvec(clf.w1, image.data.data(), h.data());
  for (std::size_t i = 0; i < h.size(); ++i) {
    h[i] += clf.b1[i];
    if (h[i] < 0.0) h[i] = 0.0;
  }
  std::vector<double> logits(static_cast<std::size_t>(clf.w2.rows), 0.0);
  matvec(clf.w2, h.data(), logits.data());
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += clf.b2[i];
  if (hidden_out != nullptr) *hidden_out = std::move(h);
  return logits;
}

inline std::vector<double> softmax_stable(std::vector<double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double& v : logits) {
    v = std::exp(v - m);
    sum += v;
  }
  for (double& v : logits) v /= sum;
  return logits;
}

}  // namespace detail

// Softmax class probabilities for one image; sums to 1.
inline std::vector<double> class_probabilities(const SceneClassifier& clf,
                                               const LatentTensor& image) {
  if (!clf.trained)
    throw std::invalid_argument("classifier: untrained; fit or load weights.");
  return detail::softmax_stable(detail::classifier_logits(clf, image, nullptr));
}

// Probability the classifier assigns to the requested shape class.
inline double alignment_score(const SceneClassifier& clf,
                              const LatentTensor& image, ShapeClass target) {
  const std::vector<double> p = class_probabilities(clf, image);
  return p[static_cast<std::size_t>(target)];
}

inline int predicted_class(const SceneClassifier& clf,
                           const LatentTensor& image) {
  const std::vector<double> p = class_probabilities(clf, image);
  return static_cast<int>(
      std::max_element(p.begin(), p.end()) - p.begin());
}

struct ClassifierConfig {
  int epochs = 40;
  int batch_size = 32;
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-4;
  // Smoothed targets and noise augmentation keep the classifier calibrated
  // on blurry generated images instead of only on crisp renders.
  double label_smoothing = 0.05;
  double max_aug_noise = 0.2;
  std::uint64_t seed = 0;
};

struct ClassifierEpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

struct ClassifierTrainResult {
  SceneClassifier clf;
  std::vector<ClassifierEpochStats> log;
  double val_accuracy = 0.0;
};

namespace detail {

struct ClassifierGrad {
  Matrix w1;
  std::vector<double> b1;
  Matrix w2;
  std::vector<double> b2;

  explicit ClassifierGrad(const SceneClassifier& clf)
      : w1(clf.w1.rows, clf.w1.cols),
        b1(clf.b1.size(), 0.0),
        w2(clf.w2.rows, clf.w2.cols),
        b2(clf.b2.size(), 0.0) {}
};

struct ClassifierAdam {
  ClassifierGrad m;
  ClassifierGrad v;
  long step = 0;

  explicit ClassifierAdam(const SceneClassifier& clf) : m(clf), v(clf) {}
};

inline void adam_step_vec(std::vector<double>& w, const std::vector<double>& g,
                          std::vector<double>& m, std::vector<double>& v,
                          double lr, double b1, double b2, double eps,
                          double bc1, double bc2) {
  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
    w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
  }
}

}  // namespace detail

// Cross-entropy training with Adam; batching and augmentation are seeded so
// retraining reproduces the same weights.
inline ClassifierTrainResult train_classifier(
    const std::vector<LoadedScene>& train, const std::vector<LoadedScene>& val,
    const ClassifierConfig& cfg) {
  if (train.empty())
    throw std::invalid_argument("train_classifier: empty training set.");
  if (cfg.epochs < 1 || cfg.batch_size < 1)
    throw std::invalid_argument("train_classifier: bad epochs or batch size.");

  ClassifierTrainResult result;
  SceneClassifier& clf = result.clf;
  {
    CounterRng rng(derive_seed(cfg.seed, 0xC1A55ull), 0);
    const double s1 = std::sqrt(6.0 / (clf.w1.rows + clf.w1.cols));
    for (double& v : clf.w1.a) v = s1 * (2.0 * rng.uniform() - 1.0);
    const double s2 = std::sqrt(6.0 / (clf.w2.rows + clf.w2.cols));
    for (double& v : clf.w2.a) v = s2 * (2.0 * rng.uniform() - 1.0);
  }

  detail::ClassifierAdam adam(clf);
  const int n = static_cast<int>(train.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const double smooth_off = cfg.label_smoothing / kShapeClassCount;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    CounterRng shuffle_rng(derive_seed(cfg.seed, 0xC5E0ull + epoch), 0);
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);

    double epoch_loss = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, n - start);
      detail::ClassifierGrad grad(clf);
      double batch_loss = 0.0;
      for (int b = 0; b < bsz; ++b) {
        const LoadedScene& sc =
            train[static_cast<std::size_t>(order[static_cast<std::size_t>(start + b)])];
        CounterRng rng(derive_seed(cfg.seed, 0xAE000000ull + epoch),
                       static_cast<std::uint64_t>(start + b));
        LatentTensor x = sc.image;
        const double sigma = cfg.max_aug_noise * rng.uniform();
        for (double& v : x.data) v += sigma * rng.normal();

        std::vector<double> hidden;
        std::vector<double> logits = detail::classifier_logits(clf, x, &hidden);
        const std::vector<double> p = detail::softmax_stable(logits);
        const int label = static_cast<int>(sc.shape);
        std::vector<double> target(p.size(), smooth_off);
        target[static_cast<std::size_t>(label)] +=
            1.0 - cfg.label_smoothing;
        double loss = 0.0;
        std::vector<double> dlogits(p.size(), 0.0);
        for (std::size_t k = 0; k < p.size(); ++k) {
          loss -= target[k] * std::log(std::max(p[k], 1e-300));
          dlogits[k] = p[k] - target[k];
        }
        batch_loss += loss;

        accumulate_outer(grad.w2, dlogits.data(), hidden.data());
        for (std::size_t k = 0; k < dlogits.size(); ++k)
          grad.b2[k] += dlogits[k];
        std::vector<double> dh(hidden.size(), 0.0);
        matvec_transpose_add(clf.w2, dlogits.data(), dh.data());
        for (std::size_t k = 0; k < dh.size(); ++k)
          if (hidden[k] <= 0.0) dh[k] = 0.0;
        accumulate_outer(grad.w1, dh.data(), x.data.data());
        for (std::size_t k = 0; k < dh.size(); ++k) grad.b1[k] += dh[k];
      }
      const double inv = 1.0 / bsz;
      for (double& v : grad.w1.a) v *= inv;
      for (double& v : grad.b1) v *= inv;
      for (double& v : grad.w2.a) v *= inv;
      for (double& v : grad.b2) v *= inv;
      for (std::size_t i = 0; i < clf.w1.a.size(); ++i)
        grad.w1.a[i] += cfg.weight_decay * clf.w1.a[i];
      for (std::size_t i = 0; i < clf.w2.a.size(); ++i)
        grad.w2.a[i] += cfg.weight_decay * clf.w2.a[i];

      ++adam.step;
      const double bc1 = 1.0 - std::pow(cfg.beta1, adam.step);
      const double bc2 = 1.0 - std::pow(cfg.beta2, adam.step);
      detail::adam_step_vec(clf.w1.a, grad.w1.a, adam.m.w1.a, adam.v.w1.a,
                            cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, bc1, bc2);
      detail::adam_step_vec(clf.b1, grad.b1, adam.m.b1, adam.v.b1, cfg.lr,
                            cfg.beta1, cfg.beta2, cfg.adam_eps, bc1, bc2);
      detail::adam_step_vec(clf.w2.a, grad.w2.a, adam.m.w2.a, adam.v.w2.a,
                            cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, bc1, bc2);
      detail::adam_step_vec(clf.b2, grad.b2, adam.m.b2, adam.v.b2, cfg.lr,
                            cfg.beta1, cfg.beta2, cfg.adam_eps, bc1, bc2);
      epoch_loss += batch_loss / bsz;
      ++batches;
    }

    clf.trained = true;
    int correct = 0;
    for (const LoadedScene& sc : val)
      if (predicted_class(clf, sc.image) == static_cast<int>(sc.shape))
        ++correct;
    ClassifierEpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = epoch_loss / std::max(1, batches);
    stats.val_accuracy =
        val.empty() ? 0.0 : static_cast<double>(correct) / val.size();
    result.log.push_back(stats);
  }

  // Snap to the 32-bit storage grid so save/load round-trips bitwise.
  auto snap = [](std::vector<double>& v) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  };
  snap(clf.w1.a);
  snap(clf.b1);
  snap(clf.w2.a);
  snap(clf.b2);
  result.val_accuracy = result.log.empty() ? 0.0 : result.log.back().val_accuracy;
  if (!val.empty()) {
    int correct = 0;
    for (const LoadedScene& sc : val)
      if (predicted_class(clf, sc.image) == static_cast<int>(sc.shape))
        ++correct;
    result.val_accuracy = static_cast<double>(correct) / val.size();
  }
  return result;
}

inline void save_classifier(const std::string& path,
                            const SceneClassifier& clf) {
  if (!clf.trained)
    throw std::invalid_argument("save_classifier: refusing to save an "
                                "untrained classifier.");
  std::vector<NamedTensor> tensors;
  tensors.push_back({"w1",
                     {static_cast<std::uint32_t>(clf.w1.rows),
                      static_cast<std::uint32_t>(clf.w1.cols)},
                     clf.w1.a});
  tensors.push_back({"b1",
                     {static_cast<std::uint32_t>(clf.b1.size())},
                     clf.b1});
  tensors.push_back({"w2",
                     {static_cast<std::uint32_t>(clf.w2.rows),
                      static_cast<std::uint32_t>(clf.w2.cols)},
                     clf.w2.a});
  tensors.push_back({"b2",
                     {static_cast<std::uint32_t>(clf.b2.size())},
                     clf.b2});
  save_weights_file(path, tensors);
}

inline SceneClassifier load_classifier(const std::string& path) {
  const std::vector<NamedTensor> tensors = load_weights_file(path);
  SceneClassifier clf;
  bool got_w1 = false, got_b1 = false, got_w2 = false, got_b2 = false;
  for (const NamedTensor& t : tensors) {
    if (t.name == "w1") {
      if (t.dims.size() != 2 ||
          static_cast<int>(t.dims[0]) != clf.w1.rows ||
          static_cast<int>(t.dims[1]) != clf.w1.cols)
        throw std::runtime_error("load_classifier: w1 shape mismatch.");
      clf.w1.a = t.values;
      got_w1 = true;
    } else if (t.name == "b1") {
      if (t.values.size() != clf.b1.size())
        throw std::runtime_error("load_classifier: b1 shape mismatch.");
      clf.b1 = t.values;
      got_b1 = true;
    } else if (t.name == "w2") {
      if (t.dims.size() != 2 ||
          static_cast<int>(t.dims[0]) != clf.w2.rows ||
          static_cast<int>(t.dims[1]) != clf.w2.cols)
        throw std::runtime_error("load_classifier: w2 shape mismatch.");
      clf.w2.a = t.values;
      got_w2 = true;
    } else if (t.name == "b2") {
      if (t.values.size() != clf.b2.size())
        throw std::runtime_error("load_classifier: b2 shape mismatch.");
      clf.b2 = t.values;
      got_b2 = true;
    } else {
      throw std::runtime_error("load_classifier: unexpected tensor '" +
                               t.name + "'.");
    }
  }
  if (!(got_w1 && got_b1 && got_w2 && got_b2))
    throw std::runtime_error("load_classifier: file is missing tensors.");
  clf.trained = true;
  return clf;
}

}  // namespace csg
