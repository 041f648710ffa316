#pragma once

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csg/image_io.hpp"
#include "csg/prompt.hpp"
#include "csg/rng.hpp"
#include "csg/tensor.hpp"

namespace csg {

inline constexpr int kSceneSize = 16;
inline constexpr int kSceneChannels = 3;
inline constexpr int kVocabSize = 8;  // null + 4 backgrounds + 3 shapes
inline constexpr double kSceneNoiseStd = 0.02;

enum class BgClass { solid_warm, solid_cool, stripes, checker };
enum class ShapeClass { disc, square, cross };

inline constexpr int kBgClassCount = 4;
inline constexpr int kShapeClassCount = 3;

inline int bg_token(BgClass b) { return 1 + static_cast<int>(b); }
inline int shape_token(ShapeClass s) { return 5 + static_cast<int>(s); }

inline const char* to_string(BgClass b) {
  switch (b) {
    case BgClass::solid_warm: return "solid_warm";
    case BgClass::solid_cool: return "solid_cool";
    case BgClass::stripes: return "stripes";
    case BgClass::checker: return "checker";
  }
  throw std::logic_error("BgClass: bad value.");
}

inline const char* to_string(ShapeClass s) {
  switch (s) {
    case ShapeClass::disc: return "disc";
    case ShapeClass::square: return "square";
    case ShapeClass::cross: return "cross";
  }
  throw std::logic_error("ShapeClass: bad value.");
}

inline BgClass bg_class_from_string(const std::string& name) {
  for (int i = 0; i < kBgClassCount; ++i)
    if (name == to_string(static_cast<BgClass>(i))) return static_cast<BgClass>(i);
  throw std::invalid_argument("background class '" + name + "' unknown.");
}

inline ShapeClass shape_class_from_string(const std::string& name) {
  for (int i = 0; i < kShapeClassCount; ++i)
    if (name == to_string(static_cast<ShapeClass>(i)))
      return static_cast<ShapeClass>(i);
  throw std::invalid_argument("shape class '" + name + "' unknown.");
}

inline Prompt encode_prompt(BgClass bg, ShapeClass shape) {
  Prompt p;
  p.tokens = {bg_token(bg), shape_token(shape)};
  p.edited_index = 1;
  return p;
}

inline BgClass bg_class_from_token(int token) {
  if (token < 1 || token > kBgClassCount)
    throw std::invalid_argument("token " + std::to_string(token) +
                                " is not a background token.");
  return static_cast<BgClass>(token - 1);
}

inline ShapeClass shape_class_from_token(int token) {
  if (token < 1 + kBgClassCount || token >= kVocabSize)
    throw std::invalid_argument("token " + std::to_string(token) +
                                " is not a shape token.");
  return static_cast<ShapeClass>(token - 1 - kBgClassCount);
}

struct SceneMeta {
  BgClass bg = BgClass::solid_warm;
  ShapeClass shape = ShapeClass::disc;
  int center_h = 0;
  int center_w = 0;
  int half_extent = 0;
};

struct Scene {
  LatentTensor image;
  BoolGrid fg_mask;
  Prompt prompt;
  SceneMeta meta;
};

namespace detail {

using Rgb = std::array<double, 3>;

// Every shape color differs from every background color by at least 0.2 in
// some channel, so drawn pixels never coincide with the background.
inline Rgb bg_color(BgClass b, int h, int w) {
  switch (b) {
    case BgClass::solid_warm: return {0.55, 0.15, -0.45};
    case BgClass::solid_cool: return {-0.45, 0.05, 0.55};
    case BgClass::stripes:
      return ((h / 2) % 2 == 0) ? Rgb{0.35, 0.35, -0.25}
                                : Rgb{-0.30, -0.30, 0.20};
    case BgClass::checker:
      return ((h / 2 + w / 2) % 2 == 0) ? Rgb{0.40, -0.20, 0.30}
                                        : Rgb{-0.35, 0.25, -0.30};
  }
  throw std::logic_error("BgClass: bad value.");
}

inline Rgb shape_color(ShapeClass s) {
  switch (s) {
    case ShapeClass::disc: return {0.90, 0.85, 0.70};
    case ShapeClass::square: return {-0.85, -0.80, -0.90};
    case ShapeClass::cross: return {0.90, -0.70, -0.60};
  }
  throw std::logic_error("ShapeClass: bad value.");
}

inline bool shape_covers(ShapeClass s, int h, int w, int ch, int cw, int r) {
  const int dh = h - ch;
  const int dw = w - cw;
  switch (s) {
    case ShapeClass::disc:
      return dh * dh + dw * dw <= r * r;
    case ShapeClass::square:
      // Half-open box keeps the footprint at (2r)^2 before clipping.
      return dh >= -r && dh < r && dw >= -r && dw < r;
    case ShapeClass::cross:
      return (std::abs(dh) <= 1 && std::abs(dw) <= r) ||
             (std::abs(dw) <= 1 && std::abs(dh) <= r);
  }
  throw std::logic_error("ShapeClass: bad value.");
}

}  // namespace detail

// Noiseless scene for a fixed geometry; the mask is exactly the drawn support.
inline Scene render_scene(BgClass bg, ShapeClass shape, int center_h,
                          int center_w, int half_extent) {
  if (half_extent < 3 || half_extent > 5)
    throw std::invalid_argument("render_scene: half_extent must lie in [3, 5].");
  Scene sc;
  sc.image = LatentTensor(kSceneSize, kSceneSize, kSceneChannels);
  sc.fg_mask = BoolGrid(kSceneSize, kSceneSize);
  sc.prompt = encode_prompt(bg, shape);
  sc.meta = {bg, shape, center_h, center_w, half_extent};
  for (int h = 0; h < kSceneSize; ++h)
    for (int w = 0; w < kSceneSize; ++w) {
      const bool on = detail::shape_covers(shape, h, w, center_h, center_w,
                                           half_extent);
      const detail::Rgb c = on ? detail::shape_color(shape)
                               : detail::bg_color(bg, h, w);
      sc.fg_mask.set(h, w, on);
      for (int k = 0; k < kSceneChannels; ++k) sc.image.at(h, w, k) = c[k];
    }
  return sc;
}

// Pure background, no shape. Used to verify the mask invariant.
inline LatentTensor render_background(BgClass bg) {
  LatentTensor img(kSceneSize, kSceneSize, kSceneChannels);
  for (int h = 0; h < kSceneSize; ++h)
    for (int w = 0; w < kSceneSize; ++w) {
      const detail::Rgb c = detail::bg_color(bg, h, w);
      for (int k = 0; k < kSceneChannels; ++k) img.at(h, w, k) = c[k];
    }
  return img;
}

// Random geometry plus light pixel noise, clamped to [-1, 1]. The mask
// describes the noiseless support; geometry and noise use separate seeds so
// paired edits can share layouts.
inline Scene generate_scene(BgClass bg, ShapeClass shape,
                            std::uint64_t geometry_seed,
                            std::uint64_t noise_seed) {
  CounterRng geo(geometry_seed, 0x67656f6dull);
  const int ch = geo.uniform_int(4, kSceneSize - 5);
  const int cw = geo.uniform_int(4, kSceneSize - 5);
  const int r = geo.uniform_int(3, 5);
  Scene sc = render_scene(bg, shape, ch, cw, r);
  CounterRng noise(noise_seed, 0x6e6f6973ull);
  for (double& v : sc.image.data) {
    v += kSceneNoiseStd * noise.normal();
    if (v < -1.0) v = -1.0;
    if (v > 1.0) v = 1.0;
  }
  return sc;
}

struct DatasetEntry {
  std::string image_file;
  std::string mask_file;
  std::vector<int> tokens;
  BgClass bg = BgClass::solid_warm;
  ShapeClass shape = ShapeClass::disc;
  std::string split;
};

struct DatasetSummary {
  int total = 0;
  int train_count = 0;
  int val_count = 0;
  std::string manifest_path;
};

// Writes n scenes (PPM), their masks (PGM) and a JSONL manifest into dir.
// class_mix, when given, holds 12 weights over (bg, shape) pairs in
// bg-major order; empty means uniform. Every tenth scene goes to the
// validation split. Reruns with the same arguments are byte-identical.
inline DatasetSummary build_dataset(const std::string& dir, int n,
                                    std::uint64_t seed,
                                    const std::vector<double>& class_mix = {}) {
  if (n <= 0) throw std::invalid_argument("build_dataset: n must be positive.");
  std::vector<double> mix = class_mix;
  if (mix.empty()) {
    mix.assign(static_cast<std::size_t>(kBgClassCount * kShapeClassCount), 1.0);
  } else if (mix.size() !=
             static_cast<std::size_t>(kBgClassCount * kShapeClassCount)) {
    throw std::invalid_argument("build_dataset: class_mix needs 12 weights.");
  }
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path root(dir);
  const fs::path manifest = root / "manifest.jsonl";
  std::ofstream out(manifest);
  if (!out)
    throw std::runtime_error("build_dataset: cannot open '" +
                             manifest.string() + "'.");
  CounterRng classes(seed, 0x636c7378ull);
  DatasetSummary summary;
  summary.total = n;
  for (int i = 0; i < n; ++i) {
    const std::size_t pair = classes.categorical(mix);
    const BgClass bg = static_cast<BgClass>(pair / kShapeClassCount);
    const ShapeClass shape = static_cast<ShapeClass>(pair % kShapeClassCount);
    const Scene sc = generate_scene(
        bg, shape, derive_seed(seed, 2 * static_cast<std::uint64_t>(i)),
        derive_seed(seed, 2 * static_cast<std::uint64_t>(i) + 1));
    char image_name[32];
    char mask_name[32];
    std::snprintf(image_name, sizeof image_name, "scene_%05d.ppm", i);
    std::snprintf(mask_name, sizeof mask_name, "scene_%05d_mask.pgm", i);
    write_ppm((root / image_name).string(), sc.image);
    write_pgm((root / mask_name).string(), sc.fg_mask);
    const bool is_val = (i % 10 == 9);
    if (is_val)
      ++summary.val_count;
    else
      ++summary.train_count;
    nlohmann::json line = {{"image", image_name},
                           {"mask", mask_name},
                           {"tokens", sc.prompt.tokens},
                           {"bg_class", to_string(bg)},
                           {"shape_class", to_string(shape)},
                           {"split", is_val ? "val" : "train"}};
    out << line.dump() << "\n";
  }
  if (!out)
    throw std::runtime_error("build_dataset: short write to manifest.");
  summary.manifest_path = manifest.string();
  return summary;
}

struct LoadedScene {
  LatentTensor image;
  BoolGrid fg_mask;
  Prompt prompt;
  BgClass bg = BgClass::solid_warm;
  ShapeClass shape = ShapeClass::disc;
};

struct LoadedDataset {
  std::vector<LoadedScene> train;
  std::vector<LoadedScene> val;
};

inline LoadedDataset load_dataset(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest_path);
  if (!in)
    throw std::runtime_error("load_dataset: cannot open '" + manifest_path + "'.");
  const fs::path root = fs::path(manifest_path).parent_path();
  LoadedDataset ds;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_dataset: bad manifest line " +
                               std::to_string(line_no) + ": " + e.what());
    }
    LoadedScene sc;
    sc.image = read_ppm((root / j.at("image").get<std::string>()).string());
    const Grid m = read_pgm((root / j.at("mask").get<std::string>()).string());
    sc.fg_mask = BoolGrid(m.height, m.width);
    for (std::size_t i = 0; i < m.size(); ++i) sc.fg_mask.v[i] = m.v[i] > 0.5;
    sc.prompt.tokens = j.at("tokens").get<std::vector<int>>();
    sc.prompt.edited_index = 1;
    validate_prompt(sc.prompt, kVocabSize);
    sc.bg = bg_class_from_string(j.at("bg_class").get<std::string>());
    sc.shape = shape_class_from_string(j.at("shape_class").get<std::string>());
    const std::string split = j.at("split").get<std::string>();
    if (split == "train")
      ds.train.push_back(std::move(sc));
    else if (split == "val")
      ds.val.push_back(std::move(sc));
    else
      throw std::runtime_error("load_dataset: split '" + split + "' unknown.");
  }
  if (ds.train.empty() && ds.val.empty())
    throw std::runtime_error("load_dataset: manifest holds no scenes.");
  return ds;
}

}  // namespace csg
