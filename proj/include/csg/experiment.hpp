#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "csg/eval.hpp"
#include "csg/gmm.hpp"
#include "csg/image_io.hpp"
#include "csg/sampler.hpp"
#include "csg/scene.hpp"
#include "csg/schedule.hpp"
#include "csg/toy_denoiser.hpp"
#include "csg/util.hpp"

namespace csg {

enum class Method { ddim, csg_no_mixup, csg };

inline Method method_from_string(const std::string& name) {
  if (name == "ddim") return Method::ddim;
  if (name == "csg_no_mixup") return Method::csg_no_mixup;
  if (name == "csg") return Method::csg;
  throw std::invalid_argument("method '" + name + "' unknown.");
}

inline const char* to_string(Method m) {
  switch (m) {
    case Method::ddim: return "ddim";
    case Method::csg_no_mixup: return "csg_no_mixup";
    case Method::csg: return "csg";
  }
  throw std::logic_error("Method: bad value.");
}

// One JSON document drives every subcommand; sections not used by a
// subcommand are ignored. The guidance step count always mirrors the
// schedule, so the two cannot drift apart.
struct ExperimentConfig {
  // schedule
  int steps = 50;
  double alpha_final = 0.02;
  ScheduleKind schedule_kind = ScheduleKind::cosine_alpha;
  // backend
  std::string backend_kind = "toy";
  std::string weights_path;
  GmmTask gmm_task;
  std::map<int, int> token_to_class;
  // method + guidance
  Method method = Method::csg;
  GuidanceConfig guidance;
  // task
  std::string task_name;
  std::string src_bg = "any";
  ShapeClass src_shape = ShapeClass::disc;
  ShapeClass tgt_shape = ShapeClass::square;
  int edited_index = 1;
  int n_scenes = 16;
  std::uint64_t seed = 0;
  // io
  std::string output_dir = "out";
  std::string classifier_path;
  // untouched copy for subcommand-specific sections
  nlohmann::json raw;
};

namespace detail {

inline const nlohmann::json& require_field(const nlohmann::json& j,
                                           const std::string& key,
                                           const std::string& where) {
  const auto it = j.find(key);
  if (it == j.end())
    throw std::invalid_argument("config: missing field '" + where + key + "'.");
  return *it;
}

template <typename T>
inline T field_or(const nlohmann::json& j, const std::string& key, T fallback) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config: field '" + key + "' has the wrong "
                                "type: " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in)
    throw std::invalid_argument("config: cannot open '" + path + "'.");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config: '" + path + "' is not valid JSON: " +
                                e.what());
  }
}

// Applies one `section.key=value` override; the value is parsed as JSON when
// possible and kept as a string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& spec) {
  const std::size_t eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::invalid_argument("override '" + spec +
                                "' is not of the form key=value.");
  const std::string path = spec.substr(0, eq);
  const std::string value = spec.substr(eq + 1);
  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(value);
  } catch (const nlohmann::json::exception&) {
    parsed = value;
  }
  nlohmann::json* node = &doc;
  std::size_t begin = 0;
  while (true) {
    const std::size_t dot = path.find('.', begin);
    const std::string key = path.substr(
        begin, dot == std::string::npos ? std::string::npos : dot - begin);
    if (key.empty())
      throw std::invalid_argument("override '" + spec + "' has an empty key.");
    if (dot == std::string::npos) {
      (*node)[key] = parsed;
      return;
    }
    node = &(*node)[key];
    begin = dot + 1;
  }
}

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  ExperimentConfig cfg;
  cfg.raw = j;

  if (j.contains("schedule")) {
    const nlohmann::json& s = j.at("schedule");
    cfg.steps = detail::field_or<int>(s, "T", cfg.steps);
    cfg.alpha_final = detail::field_or<double>(s, "alpha_T", cfg.alpha_final);
    cfg.schedule_kind = schedule_kind_from_string(
        detail::field_or<std::string>(s, "kind", "cosine_alpha"));
  }
  if (cfg.steps < 1)
    throw std::invalid_argument("config: schedule.T must be >= 1.");

  if (j.contains("backend")) {
    const nlohmann::json& b = j.at("backend");
    cfg.backend_kind = detail::field_or<std::string>(b, "kind", "toy");
    if (cfg.backend_kind == "toy") {
      cfg.weights_path = detail::field_or<std::string>(b, "weights", "");
    } else if (cfg.backend_kind == "analytic") {
      const auto task = b.find("task");
      if (task == b.end() || (task->is_string() && *task == "reference")) {
        cfg.gmm_task = reference_gmm_task();
      } else {
        try {
          cfg.gmm_task = task->get<GmmTask>();
        } catch (const nlohmann::json::exception& e) {
          throw std::invalid_argument(
              std::string("config: backend.task is malformed: ") + e.what());
        }
      }
      if (b.contains("token_to_class")) {
        for (const auto& [key, val] : b.at("token_to_class").items())
          cfg.token_to_class[std::stoi(key)] = val.get<int>();
      } else {
        for (std::size_t c = 0; c < cfg.gmm_task.classes.size(); ++c)
          cfg.token_to_class[static_cast<int>(c) + 1] = static_cast<int>(c);
      }
    } else {
      throw std::invalid_argument("config: backend.kind '" + cfg.backend_kind +
                                  "' unknown.");
    }
  }

  if (j.contains("guidance")) {
    const nlohmann::json& g = j.at("guidance");
    cfg.guidance.lambda_pre =
        detail::field_or<double>(g, "lambda_pre", cfg.guidance.lambda_pre);
    cfg.guidance.delta = detail::field_or<double>(g, "delta", cfg.guidance.delta);
    cfg.guidance.cfg_scale =
        detail::field_or<double>(g, "cfg_scale", cfg.guidance.cfg_scale);
    cfg.guidance.mixup_enabled =
        detail::field_or<bool>(g, "mixup_enabled", cfg.guidance.mixup_enabled);
    cfg.guidance.self_attn_source = self_attn_source_from_string(
        detail::field_or<std::string>(g, "self_attn_source", "inversion"));
    if (g.contains("fixed_background"))
      cfg.guidance.fixed_background = g.at("fixed_background").get<double>();
  }
  cfg.guidance.steps = cfg.steps;

  cfg.method = method_from_string(
      detail::field_or<std::string>(j, "method", "csg"));

  if (j.contains("task")) {
    const nlohmann::json& t = j.at("task");
    const auto src = detail::require_field(t, "src_prompt", "task.")
                         .get<std::vector<std::string>>();
    const auto tgt = detail::require_field(t, "tgt_prompt", "task.")
                         .get<std::vector<std::string>>();
    if (src.size() != 2 || tgt.size() != 2)
      throw std::invalid_argument(
          "config: task prompts must be [background, shape] pairs.");
    if (src[0] != tgt[0])
      throw std::invalid_argument(
          "config: prompts may differ only at the edited shape slot.");
    cfg.src_bg = src[0];
    if (cfg.src_bg != "any") bg_class_from_string(cfg.src_bg);
    cfg.src_shape = shape_class_from_string(src[1]);
    cfg.tgt_shape = shape_class_from_string(tgt[1]);
    cfg.edited_index = detail::field_or<int>(t, "k", 1);
    if (cfg.edited_index != 1)
      throw std::invalid_argument(
          "config: task.k must be 1; scene prompts edit the shape slot.");
    cfg.n_scenes = detail::field_or<int>(t, "n_scenes", cfg.n_scenes);
    if (cfg.n_scenes < 1)
      throw std::invalid_argument("config: task.n_scenes must be >= 1.");
    cfg.seed = detail::field_or<std::uint64_t>(t, "seed", cfg.seed);
    cfg.task_name = detail::field_or<std::string>(
        t, "name", src[1] + "_to_" + tgt[1]);
  }

  cfg.output_dir = detail::field_or<std::string>(j, "output_dir", cfg.output_dir);
  cfg.classifier_path = detail::field_or<std::string>(j, "classifier", "");
  return cfg;
}

inline NoiseSchedule schedule_from_config(const ExperimentConfig& cfg) {
  return make_schedule(cfg.steps, cfg.alpha_final, cfg.schedule_kind);
}

// Builds the denoiser the config asks for. The toy backend needs a trained
// weights file; the analytic backend needs a mixture task.
inline std::unique_ptr<Denoiser> make_denoiser(const ExperimentConfig& cfg) {
  if (cfg.backend_kind == "toy") {
    if (cfg.weights_path.empty())
      throw std::invalid_argument("config: backend.weights is required for "
                                  "the toy backend.");
    return std::make_unique<ToyDenoiser>(load_denoiser_weights(cfg.weights_path),
                                         cfg.steps);
  }
  return std::make_unique<AnalyticGmmDenoiser>(cfg.gmm_task, cfg.token_to_class,
                                               schedule_from_config(cfg));
}

struct MetricsRow {
  std::string task;
  std::string method;
  std::uint64_t seed = 0;
  double bg_mse = 0.0;
  double structure_proxy = 0.0;
  double rd = 0.0;
  double gamma_star = 0.0;
  double alignment = 0.0;
};

inline void write_metrics_csv(const std::string& path,
                              const std::vector<MetricsRow>& rows) {
  std::ofstream out(path);
  if (!out)
    throw std::runtime_error("metrics csv: cannot open '" + path + "'.");
  out << "task,method,seed,bg_mse,structure_proxy,rd,gamma_star,alignment\n";
  for (const MetricsRow& r : rows)
    out << r.task << "," << r.method << "," << r.seed << ","
        << format_double(r.bg_mse) << "," << format_double(r.structure_proxy)
        << "," << format_double(r.rd) << "," << format_double(r.gamma_star)
        << "," << format_double(r.alignment) << "\n";
  if (!out)
    throw std::runtime_error("metrics csv: short write to '" + path + "'.");
}

// stod rejects subnormal magnitudes via ERANGE; from_chars round-trips every
// finite double the writer can produce.
inline double parse_csv_double(const std::string& cell) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = first + cell.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw std::runtime_error("metrics csv: bad number '" + cell + "'.");
  return v;
}

inline std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in)
    throw std::runtime_error("metrics csv: cannot open '" + path + "'.");
  std::vector<MetricsRow> rows;
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("metrics csv: '" + path + "' is empty.");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t begin = 0;
    while (true) {
      const std::size_t comma = line.find(',', begin);
      cells.push_back(line.substr(
          begin, comma == std::string::npos ? std::string::npos : comma - begin));
      if (comma == std::string::npos) break;
      begin = comma + 1;
    }
    if (cells.size() != 8)
      throw std::runtime_error("metrics csv: malformed row '" + line + "'.");
    MetricsRow r;
    r.task = cells[0];
    r.method = cells[1];
    r.seed = std::stoull(cells[2]);
    r.bg_mse = parse_csv_double(cells[3]);
    r.structure_proxy = parse_csv_double(cells[4]);
    r.rd = parse_csv_double(cells[5]);
    r.gamma_star = parse_csv_double(cells[6]);
    r.alignment = parse_csv_double(cells[7]);
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  return v.size() % 2 == 1 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

inline nlohmann::json stats_of(const std::vector<double>& v) {
  return {{"mean", mean_of(v)}, {"median", median_of(v)}};
}

}  // namespace detail

// Paired win rate of method a over method b on bg_mse (lower wins); pairs
// are matched on (task, seed). Ties count half, so any method scores exactly
// 0.5 against itself.
inline double win_rate(const std::vector<MetricsRow>& rows,
                       const std::string& method_a,
                       const std::string& method_b) {
  std::map<std::pair<std::string, std::uint64_t>, double> a_vals;
  for (const MetricsRow& r : rows)
    if (r.method == method_a) a_vals[{r.task, r.seed}] = r.bg_mse;
  double wins = 0.0;
  int pairs = 0;
  for (const MetricsRow& r : rows) {
    if (r.method != method_b) continue;
    const auto it = a_vals.find({r.task, r.seed});
    if (it == a_vals.end()) continue;
    ++pairs;
    if (it->second < r.bg_mse)
      wins += 1.0;
    else if (it->second == r.bg_mse)
      wins += 0.5;
  }
  if (pairs == 0)
    throw std::invalid_argument("win_rate: no paired rows for '" + method_a +
                                "' vs '" + method_b + "'.");
  return wins / pairs;
}

// Per-method means/medians plus pairwise win rates on bg_mse.
inline nlohmann::json summarize_rows(const std::vector<MetricsRow>& rows) {
  if (rows.empty())
    throw std::invalid_argument("summarize_rows: no rows.");
  std::vector<std::string> methods;
  for (const MetricsRow& r : rows)
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end())
      methods.push_back(r.method);
  std::sort(methods.begin(), methods.end());

  nlohmann::json per_method;
  for (const std::string& m : methods) {
    std::vector<double> bg, sp, rd, gs, al;
    for (const MetricsRow& r : rows) {
      if (r.method != m) continue;
      bg.push_back(r.bg_mse);
      sp.push_back(r.structure_proxy);
      rd.push_back(r.rd);
      gs.push_back(r.gamma_star);
      al.push_back(r.alignment);
    }
    per_method[m] = {{"n", bg.size()},
                     {"bg_mse", detail::stats_of(bg)},
                     {"structure_proxy", detail::stats_of(sp)},
                     {"rd", detail::stats_of(rd)},
                     {"gamma_star", detail::stats_of(gs)},
                     {"alignment", detail::stats_of(al)}};
  }

  nlohmann::json wins;
  for (const std::string& a : methods)
    for (const std::string& b : methods)
      wins[a + "_vs_" + b] = win_rate(rows, a, b);

  return {{"methods", per_method}, {"win_rates_bg_mse", wins}};
}

struct ReportPaths {
  std::string csv;
  std::string summary;
};

inline ReportPaths write_report(const std::vector<MetricsRow>& rows,
                                const std::string& out_dir) {
  if (rows.empty())
    throw std::invalid_argument("write_report: no rows.");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  ReportPaths paths;
  paths.csv = (fs::path(out_dir) / "metrics.csv").string();
  paths.summary = (fs::path(out_dir) / "summary.json").string();
  write_metrics_csv(paths.csv, rows);
  std::ofstream out(paths.summary);
  if (!out)
    throw std::runtime_error("write_report: cannot open '" + paths.summary +
                             "'.");
  out << summarize_rows(rows).dump(2) << "\n";
  if (!out)
    throw std::runtime_error("write_report: short write to '" + paths.summary +
                             "'.");
  return paths;
}

inline nlohmann::json guidance_config_json(const GuidanceConfig& g) {
  nlohmann::json j = {{"lambda_pre", g.lambda_pre},
                      {"delta", g.delta},
                      {"cfg_scale", g.cfg_scale},
                      {"mixup_enabled", g.mixup_enabled},
                      {"steps", g.steps},
                      {"self_attn_source", to_string(g.self_attn_source)}};
  if (g.fixed_background) j["fixed_background"] = *g.fixed_background;
  return j;
}

inline nlohmann::json edit_report_json(const EditReport& report,
                                       const std::string& output_image) {
  nlohmann::json steps = nlohmann::json::array();
  for (const StepStats& s : report.steps)
    steps.push_back({{"t", s.t},
                     {"alpha", s.alpha},
                     {"gamma", s.gamma},
                     {"guidance_l2", s.guidance_l2},
                     {"omega_active_fraction", s.omega_active_fraction}});
  return {{"config", guidance_config_json(report.config)},
          {"output_image", output_image},
          {"backend_calls", report.backend_calls},
          {"expected_backend_calls", report.expected_backend_calls},
          {"mask_background_mean", report.mask_background_mean},
          {"steps", steps}};
}

struct BatchResult {
  std::vector<MetricsRow> rows;
  std::vector<nlohmann::json> manifest;
};

using EventSink = std::function<void(const nlohmann::json&)>;

// Runs one method over n seeded scenes, writes images plus per-edit reports,
// and returns per-scene metric rows. Scene seeds depend only on the task
// seed and index, so different methods see identical inputs.
inline BatchResult run_edit_batch(const ExperimentConfig& cfg, Method method,
                                  const Denoiser& d, const SceneClassifier& clf,
                                  int jobs, const EventSink& event = {}) {
  if (cfg.backend_kind != "toy")
    throw std::invalid_argument(
        "run_edit_batch: scene metrics need the toy backend; the analytic "
        "backend supports the invert subcommand.");
  const NoiseSchedule schedule = schedule_from_config(cfg);
  GuidanceConfig guidance = cfg.guidance;
  if (method == Method::csg_no_mixup) guidance.mixup_enabled = false;

  namespace fs = std::filesystem;
  const fs::path root(cfg.output_dir);
  const fs::path source_dir = root / "source";
  const fs::path method_dir = root / to_string(method);
  fs::create_directories(source_dir);
  fs::create_directories(method_dir);

  struct SceneSlot {
    Scene scene;
    Prompt y_src;
    Prompt y_tgt;
    LatentTensor edited;
    nlohmann::json report;
    MetricsRow row;
  };
  std::vector<SceneSlot> slots(static_cast<std::size_t>(cfg.n_scenes));

  for (int i = 0; i < cfg.n_scenes; ++i) {
    SceneSlot& slot = slots[static_cast<std::size_t>(i)];
    const BgClass bg = cfg.src_bg == "any"
                           ? static_cast<BgClass>(i % kBgClassCount)
                           : bg_class_from_string(cfg.src_bg);
    slot.scene = generate_scene(
        bg, cfg.src_shape, derive_seed(cfg.seed, 2 * static_cast<std::uint64_t>(i)),
        derive_seed(cfg.seed, 2 * static_cast<std::uint64_t>(i) + 1));
    slot.y_src = slot.scene.prompt;
    slot.y_tgt = encode_prompt(bg, cfg.tgt_shape);
    char name[32];
    std::snprintf(name, sizeof name, "src_%05d.ppm", i);
    write_ppm((source_dir / name).string(), slot.scene.image);
    std::snprintf(name, sizeof name, "src_%05d_mask.pgm", i);
    write_pgm((source_dir / name).string(), slot.scene.fg_mask);
  }

  parallel_for(cfg.n_scenes, jobs, [&](int i) {
    SceneSlot& slot = slots[static_cast<std::size_t>(i)];
    char name[32];
    std::snprintf(name, sizeof name, "edit_%05d.ppm", i);
    const std::string edited_rel =
        (fs::path(to_string(method)) / name).string();
    if (method == Method::ddim) {
      slot.edited = naive_ddim_translate(slot.scene.image, slot.y_src,
                                         slot.y_tgt, d, schedule,
                                         guidance.cfg_scale);
    } else {
      EditResult res = edit(slot.scene.image, slot.y_src, slot.y_tgt, d,
                            schedule, guidance);
      slot.edited = std::move(res.image);
      slot.report = edit_report_json(res.report, edited_rel);
    }
    write_ppm((root / edited_rel).string(), slot.edited);
    if (!slot.report.is_null()) {
      std::snprintf(name, sizeof name, "report_%05d.json", i);
      std::ofstream out(method_dir / name);
      out << slot.report.dump(2) << "\n";
      if (!out)
        throw std::runtime_error("run_edit_batch: cannot write edit report.");
    }

    BoolGrid bg_mask(slot.scene.fg_mask.height, slot.scene.fg_mask.width);
    for (std::size_t p = 0; p < bg_mask.v.size(); ++p)
      bg_mask.v[p] = slot.scene.fg_mask.v[p] ? 0 : 1;
    MetricsRow& row = slot.row;
    row.task = cfg.task_name.empty()
                   ? std::string(to_string(cfg.src_shape)) + "_to_" +
                         to_string(cfg.tgt_shape)
                   : cfg.task_name;
    row.method = to_string(method);
    row.seed = static_cast<std::uint64_t>(i);
    row.bg_mse = bg_distance(slot.scene.image, slot.edited, bg_mask);
    row.structure_proxy = structure_distance(slot.scene.image, slot.edited);
    row.alignment = alignment_score(clf, slot.edited, cfg.tgt_shape);
  });

  // Relational distance is a batch-level quantity; every row of the batch
  // carries the same value for spreadsheet convenience.
  double batch_rd = 0.0;
  double batch_gamma = 0.0;
  if (cfg.n_scenes >= 2) {
    std::vector<LatentTensor> sources;
    std::vector<LatentTensor> edits;
    sources.reserve(slots.size());
    edits.reserve(slots.size());
    for (const SceneSlot& slot : slots) {
      sources.push_back(slot.scene.image);
      edits.push_back(slot.edited);
    }
    const RdResult rd =
        relational_distance(distance_matrix(sources, DistanceKind::pixel_l2),
                            distance_matrix(edits, DistanceKind::pixel_l2));
    batch_rd = rd.rd;
    batch_gamma = rd.gamma_star;
  }

  BatchResult result;
  result.rows.reserve(slots.size());
  for (int i = 0; i < cfg.n_scenes; ++i) {
    SceneSlot& slot = slots[static_cast<std::size_t>(i)];
    slot.row.rd = batch_rd;
    slot.row.gamma_star = batch_gamma;
    result.rows.push_back(slot.row);
    char src_name[32];
    char mask_name[32];
    char edit_name[32];
    std::snprintf(src_name, sizeof src_name, "src_%05d.ppm", i);
    std::snprintf(mask_name, sizeof mask_name, "src_%05d_mask.pgm", i);
    std::snprintf(edit_name, sizeof edit_name, "edit_%05d.ppm", i);
    result.manifest.push_back(
        {{"task", slot.row.task},
         {"method", slot.row.method},
         {"seed", slot.row.seed},
         {"src_image", (fs::path("source") / src_name).string()},
         {"mask", (fs::path("source") / mask_name).string()},
         {"edited_image",
          (fs::path(to_string(method)) / edit_name).string()},
         {"src_shape", to_string(cfg.src_shape)},
         {"tgt_shape", to_string(cfg.tgt_shape)}});
    if (event)
      event({{"event", "scene"},
             {"method", slot.row.method},
             {"index", i},
             {"bg_mse", slot.row.bg_mse},
             {"alignment", slot.row.alignment}});
  }
  return result;
}

inline void write_manifest(const std::string& path,
                           const std::vector<nlohmann::json>& lines) {
  std::ofstream out(path);
  if (!out)
    throw std::runtime_error("manifest: cannot open '" + path + "'.");
  for (const nlohmann::json& line : lines) out << line.dump() << "\n";
  if (!out)
    throw std::runtime_error("manifest: short write to '" + path + "'.");
}

// The three-method comparison on identical scenes: plain DDIM translation,
// guidance without mixup, and the full method.
inline BatchResult run_ablation(const ExperimentConfig& cfg, const Denoiser& d,
                                const SceneClassifier& clf, int jobs,
                                const EventSink& event = {}) {
  BatchResult combined;
  for (Method m : {Method::ddim, Method::csg_no_mixup, Method::csg}) {
    BatchResult part = run_edit_batch(cfg, m, d, clf, jobs, event);
    combined.rows.insert(combined.rows.end(), part.rows.begin(),
                         part.rows.end());
    combined.manifest.insert(combined.manifest.end(), part.manifest.begin(),
                             part.manifest.end());
  }
  return combined;
}

// Recomputes metric rows from the files an edit run left behind; an
// independent pass over the artifacts rather than a replay of the run.
inline std::vector<MetricsRow> eval_from_artifacts(
    const std::string& manifest_path, const SceneClassifier& clf) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest_path);
  if (!in)
    throw std::invalid_argument("eval: cannot open '" + manifest_path + "'.");
  const fs::path root = fs::path(manifest_path).parent_path();

  struct Entry {
    MetricsRow row;
    LatentTensor src;
    LatentTensor edited;
  };
  std::vector<Entry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("eval: bad manifest line " +
                               std::to_string(line_no) + ": " + e.what());
    }
    Entry e;
    e.row.task = j.at("task").get<std::string>();
    e.row.method = j.at("method").get<std::string>();
    e.row.seed = j.at("seed").get<std::uint64_t>();
    e.src = read_ppm((root / j.at("src_image").get<std::string>()).string());
    e.edited =
        read_ppm((root / j.at("edited_image").get<std::string>()).string());
    const Grid m = read_pgm((root / j.at("mask").get<std::string>()).string());
    BoolGrid bg_mask(m.height, m.width);
    for (std::size_t p = 0; p < m.size(); ++p) bg_mask.v[p] = m.v[p] <= 0.5;
    const ShapeClass tgt =
        shape_class_from_string(j.at("tgt_shape").get<std::string>());
    e.row.bg_mse = bg_distance(e.src, e.edited, bg_mask);
    e.row.structure_proxy = structure_distance(e.src, e.edited);
    e.row.alignment = alignment_score(clf, e.edited, tgt);
    entries.push_back(std::move(e));
  }
  if (entries.empty())
    throw std::invalid_argument("eval: manifest holds no entries.");

  // Batch-level relational distance per (task, method) group.
  std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < entries.size(); ++i)
    groups[{entries[i].row.task, entries[i].row.method}].push_back(i);
  for (const auto& [key, idx] : groups) {
    if (idx.size() < 2) continue;
    std::vector<LatentTensor> sources;
    std::vector<LatentTensor> edits;
    for (std::size_t i : idx) {
      sources.push_back(entries[i].src);
      edits.push_back(entries[i].edited);
    }
    const RdResult rd =
        relational_distance(distance_matrix(sources, DistanceKind::pixel_l2),
                            distance_matrix(edits, DistanceKind::pixel_l2));
    for (std::size_t i : idx) {
      entries[i].row.rd = rd.rd;
      entries[i].row.gamma_star = rd.gamma_star;
    }
  }

  std::vector<MetricsRow> rows;
  rows.reserve(entries.size());
  for (Entry& e : entries) rows.push_back(std::move(e.row));
  return rows;
}

}  // namespace csg
