#include "csg/eval.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <gtest/gtest.h>
#include <vector>

#include "csg/rng.hpp"
#include "csg/scene.hpp"

namespace csg {
namespace {

LatentTensor random_image(int h, int w, int c, std::uint64_t seed) {
  LatentTensor x(h, w, c);
  CounterRng rng(seed);
  for (double& v : x.data) v = 2.0 * rng.uniform() - 1.0;
  return x;
}

std::string temp_path(const char* stem) {
  return (std::filesystem::temp_directory_path() /
          (std::string(stem) + std::to_string(::getpid()) + ".csgw"))
      .string();
}

TEST(DistanceKindParsing, RoundTripAndUnknown) {
  EXPECT_EQ(distance_kind_from_string("pixel_l2"), DistanceKind::pixel_l2);
  EXPECT_EQ(distance_kind_from_string("gradmap_l2"), DistanceKind::gradmap_l2);
  EXPECT_STREQ(to_string(DistanceKind::pixel_l2), "pixel_l2");
  EXPECT_STREQ(to_string(DistanceKind::gradmap_l2), "gradmap_l2");
  EXPECT_THROW(distance_kind_from_string("cosine"), std::invalid_argument);
}

TEST(DistanceMatrix, PixelEntriesMatchMeanSquaredError) {
  std::vector<LatentTensor> imgs;
  for (std::uint64_t i = 0; i < 4; ++i) imgs.push_back(random_image(3, 5, 3, i));
  const DistanceMatrix g = distance_matrix(imgs, DistanceKind::pixel_l2);
  ASSERT_EQ(g.n, 4);
  for (int i = 0; i < g.n; ++i) {
    EXPECT_EQ(g.at(i, i), 0.0);
    for (int j = 0; j < g.n; ++j) {
      EXPECT_EQ(g.at(i, j), g.at(j, i));
      const double ref = mean_squared_error(imgs[static_cast<std::size_t>(i)],
                                            imgs[static_cast<std::size_t>(j)]);
      EXPECT_DOUBLE_EQ(g.at(i, j), ref);
    }
  }

  // One-channel offset oracle: constant 0.1 gap in channel 0 of 3.
  LatentTensor a(4, 4, 3), b(4, 4, 3);
  for (double& v : a.data) v = 0.25;
  b = a;
  for (int h = 0; h < 4; ++h)
    for (int w = 0; w < 4; ++w) b.at(h, w, 0) += 0.1;
  const DistanceMatrix g2 = distance_matrix({a, b}, DistanceKind::pixel_l2);
  EXPECT_NEAR(g2.at(0, 1), 0.1 * 0.1 / 3.0, 1e-12);

  EXPECT_THROW(distance_matrix({a}, DistanceKind::pixel_l2),
               std::invalid_argument);
  LatentTensor c(5, 4, 3);
  EXPECT_THROW(distance_matrix({a, c}, DistanceKind::pixel_l2),
               std::invalid_argument);
}

TEST(StructureDistance, IgnoresBrightnessButSeesMovedContent) {
  // Values on a coarse dyadic grid so the +0.25 shift cancels exactly in
  // every forward difference.
  LatentTensor a(6, 6, 3);
  CounterRng rng(9);
  for (double& v : a.data) v = rng.uniform_int(-8, 8) / 16.0;
  LatentTensor shifted = a;
  for (double& v : shifted.data) v += 0.25;
  EXPECT_EQ(structure_distance(a, shifted), 0.0);

  const Scene here = generate_scene(BgClass::solid_warm, ShapeClass::disc, 1, 2);
  const Scene there = generate_scene(BgClass::solid_warm, ShapeClass::disc, 8, 2);
  ASSERT_TRUE(here.meta.center_h != there.meta.center_h ||
              here.meta.center_w != there.meta.center_w ||
              here.meta.half_extent != there.meta.half_extent);
  EXPECT_GT(structure_distance(here.image, there.image), 1e-4);

  LatentTensor wrong(5, 6, 3);
  EXPECT_THROW(structure_distance(a, wrong), std::invalid_argument);
}

TEST(RelationalDistance, ExactScaleRecoveryOnPowerOfTwo) {
  DistanceMatrix src(4);
  CounterRng rng(17);
  for (int i = 0; i < src.n; ++i)
    for (int j = i + 1; j < src.n; ++j) {
      const double d = rng.uniform();
      src.at(i, j) = d;
      src.at(j, i) = d;
    }
  DistanceMatrix tgt = src;
  for (double& v : tgt.entries) v *= 4.0;
  const RdResult r = relational_distance(src, tgt);
  EXPECT_EQ(r.gamma_star, 4.0);
  EXPECT_EQ(r.rd, 0.0);

  // Self comparison is an exact zero with unit scale.
  const RdResult self = relational_distance(src, src);
  EXPECT_EQ(self.gamma_star, 1.0);
  EXPECT_EQ(self.rd, 0.0);
}

TEST(RelationalDistance, DegenerateAndErrorCases) {
  DistanceMatrix zero(3);
  DistanceMatrix tgt(3);
  tgt.at(0, 1) = 2.0;
  tgt.at(1, 0) = 2.0;
  const RdResult r = relational_distance(zero, tgt);
  EXPECT_EQ(r.gamma_star, 0.0);
  EXPECT_DOUBLE_EQ(r.rd, 8.0 / 3.0);

  DistanceMatrix other(4);
  EXPECT_THROW(relational_distance(zero, other), std::invalid_argument);
}

// The closed-form minimizer must agree with a direct scan of the objective.
TEST(RelationalDistance, ClosedFormMatchesGridScan) {
  CounterRng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    DistanceMatrix src(5), tgt(5);
    for (int i = 0; i < 5; ++i)
      for (int j = i + 1; j < 5; ++j) {
        const double a = rng.uniform();
        const double b = rng.uniform();
        src.at(i, j) = a;
        src.at(j, i) = a;
        tgt.at(i, j) = b;
        tgt.at(j, i) = b;
      }
    const RdResult closed = relational_distance(src, tgt);

    double best_rd = std::numeric_limits<double>::infinity();
    double best_gamma = 0.0;
    for (long k = -100000; k <= 100000; ++k) {
      const double gamma = static_cast<double>(k) * 1e-4;
      double mismatch = 0.0;
      for (std::size_t e = 0; e < src.entries.size(); ++e) {
        const double d = tgt.entries[e] - gamma * src.entries[e];
        mismatch += d * d;
      }
      mismatch /= static_cast<double>(src.n);
      if (mismatch < best_rd) {
        best_rd = mismatch;
        best_gamma = gamma;
      }
    }
    EXPECT_NEAR(closed.rd, best_rd, 1e-6) << "trial=" << trial;
    EXPECT_NEAR(closed.gamma_star, best_gamma, 1e-4) << "trial=" << trial;
    EXPECT_LE(closed.rd, best_rd + 1e-12);
  }
}

TEST(BgDistance, RestrictedMseOracle) {
  const Scene sc = generate_scene(BgClass::checker, ShapeClass::square, 4, 5);
  BoolGrid bg(kSceneSize, kSceneSize);
  for (int h = 0; h < kSceneSize; ++h)
    for (int w = 0; w < kSceneSize; ++w) bg.set(h, w, !sc.fg_mask.at(h, w));

  EXPECT_EQ(bg_distance(sc.image, sc.image, bg), 0.0);

  // Foreground-only change is invisible to the background score.
  LatentTensor fg_changed = sc.image;
  for (int h = 0; h < kSceneSize; ++h)
    for (int w = 0; w < kSceneSize; ++w)
      if (sc.fg_mask.at(h, w))
        for (int c = 0; c < kSceneChannels; ++c) fg_changed.at(h, w, c) = 0.0;
  EXPECT_EQ(bg_distance(sc.image, fg_changed, bg), 0.0);

  // Uniform 0.2 background shift scores exactly its square.
  LatentTensor bg_changed = sc.image;
  for (int h = 0; h < kSceneSize; ++h)
    for (int w = 0; w < kSceneSize; ++w)
      if (bg.at(h, w))
        for (int c = 0; c < kSceneChannels; ++c) bg_changed.at(h, w, c) += 0.2;
  EXPECT_NEAR(bg_distance(sc.image, bg_changed, bg), 0.04, 1e-12);

  BoolGrid empty(kSceneSize, kSceneSize);
  EXPECT_THROW(bg_distance(sc.image, bg_changed, empty), std::invalid_argument);
  BoolGrid wrong(kSceneSize + 1, kSceneSize);
  EXPECT_THROW(bg_distance(sc.image, bg_changed, wrong), std::invalid_argument);
}

std::vector<LoadedScene> tiny_corpus(int n, std::uint64_t base_seed) {
  std::vector<LoadedScene> out;
  for (int i = 0; i < n; ++i) {
    const BgClass bg = static_cast<BgClass>(i % 4);
    const ShapeClass shape = static_cast<ShapeClass>(i % 3);
    const Scene sc = generate_scene(bg, shape, derive_seed(base_seed, 2 * i),
                                    derive_seed(base_seed, 2 * i + 1));
    LoadedScene ls;
    ls.image = sc.image;
    ls.fg_mask = sc.fg_mask;
    ls.prompt = sc.prompt;
    ls.bg = bg;
    ls.shape = shape;
    out.push_back(std::move(ls));
  }
  return out;
}

TEST(Classifier, GatesRefusesAndValidates) {
  SceneClassifier raw;
  const Scene sc = generate_scene(BgClass::solid_warm, ShapeClass::disc, 1, 1);
  EXPECT_THROW(class_probabilities(raw, sc.image), std::invalid_argument);
  EXPECT_THROW(save_classifier(temp_path("untrained"), raw),
               std::invalid_argument);
  EXPECT_THROW(train_classifier({}, {}, ClassifierConfig{}),
               std::invalid_argument);
  ClassifierConfig bad;
  bad.epochs = 0;
  EXPECT_THROW(train_classifier(tiny_corpus(3, 1), {}, bad),
               std::invalid_argument);
}

TEST(Classifier, ProbabilitiesSumToOneAndTrainingIsSeeded) {
  const std::vector<LoadedScene> train = tiny_corpus(36, 5);
  const std::vector<LoadedScene> val = tiny_corpus(9, 99);
  ClassifierConfig cfg;
  cfg.epochs = 4;
  cfg.seed = 3;
  const ClassifierTrainResult a = train_classifier(train, val, cfg);
  const ClassifierTrainResult b = train_classifier(train, val, cfg);
  ASSERT_EQ(a.clf.w1.a.size(), b.clf.w1.a.size());
  for (std::size_t i = 0; i < a.clf.w1.a.size(); ++i)
    EXPECT_EQ(a.clf.w1.a[i], b.clf.w1.a[i]);
  EXPECT_EQ(a.val_accuracy, b.val_accuracy);
  ASSERT_EQ(a.log.size(), 4u);

  for (const LoadedScene& sc : val) {
    const std::vector<double> p = class_probabilities(a.clf, sc.image);
    ASSERT_EQ(p.size(), static_cast<std::size_t>(kShapeClassCount));
    double sum = 0.0;
    for (double v : p) {
      EXPECT_GE(v, 0.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
    const double score = alignment_score(a.clf, sc.image, sc.shape);
    EXPECT_GE(score, 0.0);
    EXPECT_LE(score, 1.0);
    const int pred = predicted_class(a.clf, sc.image);
    EXPECT_GE(pred, 0);
    EXPECT_LT(pred, kShapeClassCount);
  }
}

TEST(Classifier, SaveLoadRoundTripIsBitwise) {
  const std::vector<LoadedScene> train = tiny_corpus(24, 8);
  ClassifierConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 11;
  const ClassifierTrainResult r = train_classifier(train, {}, cfg);
  const std::string path = temp_path("clf");
  save_classifier(path, r.clf);
  const SceneClassifier loaded = load_classifier(path);
  std::filesystem::remove(path);
  EXPECT_TRUE(loaded.trained);
  for (std::size_t i = 0; i < r.clf.w1.a.size(); ++i)
    EXPECT_EQ(loaded.w1.a[i], r.clf.w1.a[i]);
  for (std::size_t i = 0; i < r.clf.b1.size(); ++i)
    EXPECT_EQ(loaded.b1[i], r.clf.b1[i]);
  for (std::size_t i = 0; i < r.clf.w2.a.size(); ++i)
    EXPECT_EQ(loaded.w2.a[i], r.clf.w2.a[i]);
  for (std::size_t i = 0; i < r.clf.b2.size(); ++i)
    EXPECT_EQ(loaded.b2[i], r.clf.b2[i]);

  const Scene probe = generate_scene(BgClass::stripes, ShapeClass::cross, 2, 3);
  const std::vector<double> p0 = class_probabilities(r.clf, probe.image);
  const std::vector<double> p1 = class_probabilities(loaded, probe.image);
  for (std::size_t i = 0; i < p0.size(); ++i) EXPECT_EQ(p0[i], p1[i]);

  EXPECT_THROW(load_classifier(temp_path("missing")), std::runtime_error);
}

}  // namespace
}  // namespace csg
