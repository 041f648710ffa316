// csglab: batch driver for the guided-editing engine. One JSON config file
// drives every subcommand; --set overrides individual fields. stdout carries
// machine-parseable JSON Lines events, stderr carries diagnostics.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "csg/eval.hpp"
#include "csg/experiment.hpp"
#include "csg/gmm.hpp"
#include "csg/image_io.hpp"
#include "csg/sampler.hpp"
#include "csg/scene.hpp"
#include "csg/toy_denoiser.hpp"
#include "csg/training.hpp"
#include "csg/weights_io.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void emit(const json& event) { std::cout << event.dump() << "\n" << std::flush; }

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  int jobs = 1;
};

csg::ExperimentConfig load_config(const CommonArgs& args) {
  json doc = args.config_path.empty() ? json::object()
                                      : csg::load_json_file(args.config_path);
  for (const std::string& spec : args.overrides)
    csg::apply_override(doc, spec);
  return csg::parse_experiment_config(doc);
}

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file");
  cmd->add_option("--set", args.overrides,
                  "Override a config field, e.g. --set guidance.lambda_pre=0");
  cmd->add_option("--jobs", args.jobs, "Worker threads for scene-level work")
      ->check(CLI::PositiveNumber);
}

int run_make_dataset(const CommonArgs& args) {
  const csg::ExperimentConfig cfg = load_config(args);
  const json ds = cfg.raw.value("dataset", json::object());
  const std::string dir =
      ds.value("dir", (fs::path(cfg.output_dir) / "dataset").string());
  const int n = ds.value("n", 1200);
  const std::uint64_t seed = ds.value("seed", cfg.seed);
  std::vector<double> mix;
  if (ds.contains("class_mix")) mix = ds.at("class_mix").get<std::vector<double>>();
  const csg::DatasetSummary summary = csg::build_dataset(dir, n, seed, mix);
  emit({{"event", "dataset"},
        {"manifest", summary.manifest_path},
        {"total", summary.total},
        {"train", summary.train_count},
        {"val", summary.val_count}});
  return 0;
}

csg::NoiseSchedule config_schedule(const csg::ExperimentConfig& cfg) {
  return csg::schedule_from_config(cfg);
}

int run_train(const CommonArgs& args) {
  const csg::ExperimentConfig cfg = load_config(args);
  const json tr = cfg.raw.value("train", json::object());
  const std::string manifest = tr.contains("manifest")
      ? tr.at("manifest").get<std::string>()
      : (fs::path(cfg.output_dir) / "dataset" / "manifest.jsonl").string();
  const csg::LoadedDataset ds = csg::load_dataset(manifest);

  csg::TrainConfig tc;
  tc.epochs = tr.value("epochs", tc.epochs);
  tc.batch_size = tr.value("batch_size", tc.batch_size);
  tc.learning_rate = tr.value("lr", tc.learning_rate);
  tc.p_uncond = tr.value("p_uncond", tc.p_uncond);
  tc.seed = tr.value("seed", cfg.seed);
  tc.threads = args.jobs;

  std::vector<csg::TrainingScene> train;
  std::vector<csg::TrainingScene> val;
  for (const csg::LoadedScene& sc : ds.train)
    train.push_back({sc.image, sc.prompt});
  for (const csg::LoadedScene& sc : ds.val) val.push_back({sc.image, sc.prompt});

  const csg::NoiseSchedule schedule = config_schedule(cfg);
  csg::TrainResult result = csg::train_denoiser(train, val, schedule, tc);
  for (const csg::EpochStats& e : result.log)
    emit({{"event", "epoch"},
          {"epoch", e.epoch},
          {"train_mse", e.train_mse},
          {"val_mse", e.val_mse}});

  fs::create_directories(cfg.output_dir);
  const std::string weights = tr.contains("weights_out")
      ? tr.at("weights_out").get<std::string>()
      : (fs::path(cfg.output_dir) / "denoiser.csgw").string();
  csg::save_denoiser_weights(weights, result.weights);
  const std::string log_path =
      (fs::path(cfg.output_dir) / "training_log.csv").string();
  csg::write_training_log(log_path, result.log);
  emit({{"event", "trained"},
        {"weights", weights},
        {"log", log_path},
        {"final_val_mse", result.log.back().val_mse},
        {"zero_predictor_val_mse", result.zero_predictor_val_mse}});
  return 0;
}

int run_train_classifier(const CommonArgs& args) {
  const csg::ExperimentConfig cfg = load_config(args);
  const json tr = cfg.raw.value("classifier_train", json::object());
  const std::string manifest = tr.contains("manifest")
      ? tr.at("manifest").get<std::string>()
      : (fs::path(cfg.output_dir) / "dataset" / "manifest.jsonl").string();
  const csg::LoadedDataset ds = csg::load_dataset(manifest);

  csg::ClassifierConfig cc;
  cc.epochs = tr.value("epochs", cc.epochs);
  cc.batch_size = tr.value("batch_size", cc.batch_size);
  cc.lr = tr.value("lr", cc.lr);
  cc.seed = tr.value("seed", cfg.seed);

  csg::ClassifierTrainResult result =
      csg::train_classifier(ds.train, ds.val, cc);
  for (const csg::ClassifierEpochStats& e : result.log)
    emit({{"event", "classifier_epoch"},
          {"epoch", e.epoch},
          {"train_loss", e.train_loss},
          {"val_accuracy", e.val_accuracy}});

  fs::create_directories(cfg.output_dir);
  const std::string out = tr.contains("weights_out")
      ? tr.at("weights_out").get<std::string>()
      : (fs::path(cfg.output_dir) / "classifier.csgw").string();
  csg::save_classifier(out, result.clf);
  emit({{"event", "classifier_trained"},
        {"weights", out},
        {"val_accuracy", result.val_accuracy}});
  return 0;
}

int run_invert(const CommonArgs& args) {
  const csg::ExperimentConfig cfg = load_config(args);
  const csg::NoiseSchedule schedule = config_schedule(cfg);
  const std::unique_ptr<csg::Denoiser> d = csg::make_denoiser(cfg);
  const json iv = cfg.raw.value("invert", json::object());

  csg::LatentTensor x0;
  csg::Prompt y;
  if (iv.contains("image")) {
    x0 = csg::read_ppm(iv.at("image").get<std::string>());
    y.tokens = iv.at("tokens").get<std::vector<int>>();
    y.edited_index = iv.value("k", 1);
  } else if (cfg.backend_kind == "analytic") {
    const int class_id = iv.value("class_id", 0);
    const std::uint64_t sample_seed = iv.value("seed", cfg.seed);
    x0 = csg::sample_x0(cfg.gmm_task, class_id, sample_seed);
    for (const auto& [tok, cid] : cfg.token_to_class)
      if (cid == class_id && y.tokens.empty()) y.tokens = {tok};
    if (y.tokens.empty())
      throw std::invalid_argument("invert: no token maps to class " +
                                  std::to_string(class_id) + ".");
    y.edited_index = 0;
  } else {
    throw std::invalid_argument(
        "invert: the toy backend needs invert.image and invert.tokens.");
  }

  const csg::TrajectoryCache cache =
      csg::invert_with_cache(x0, y, *d, schedule, cfg.guidance);
  fs::create_directories(cfg.output_dir);
  const std::string latent_path =
      (fs::path(cfg.output_dir) / "latent.csgw").string();
  csg::save_latent_file(latent_path, cache.latents.back());

  csg::LatentTensor x = cache.latents.back();
  for (int t = schedule.steps; t >= 1; --t) {
    const csg::LatentTensor eps = d->predict(x, t, y, false).eps;
    x = csg::ddim_update(x, eps, schedule.at(t), schedule.at(t - 1));
  }
  const std::string recon_path =
      (fs::path(cfg.output_dir) / "reconstruction.ppm").string();
  csg::write_ppm(recon_path, x);
  emit({{"event", "inverted"},
        {"latent", latent_path},
        {"reconstruction", recon_path},
        {"round_trip_mse", csg::mean_squared_error(x, x0)}});
  return 0;
}

csg::SceneClassifier load_config_classifier(const csg::ExperimentConfig& cfg) {
  if (cfg.classifier_path.empty())
    throw std::invalid_argument(
        "config: 'classifier' (weights path) is required for edit metrics.");
  return csg::load_classifier(cfg.classifier_path);
}

int run_edit(const CommonArgs& args) {
  const csg::ExperimentConfig cfg = load_config(args);
  const std::unique_ptr<csg::Denoiser> d = csg::make_denoiser(cfg);
  const csg::SceneClassifier clf = load_config_classifier(cfg);
  const csg::BatchResult batch =
      csg::run_edit_batch(cfg, cfg.method, *d, clf, args.jobs, emit);
  csg::write_manifest(
      (fs::path(cfg.output_dir) / "edits.jsonl").string(), batch.manifest);
  const csg::ReportPaths paths = csg::write_report(batch.rows, cfg.output_dir);
  emit({{"event", "report"},
        {"csv", paths.csv},
        {"summary", paths.summary},
        {"rows", batch.rows.size()}});
  return 0;
}

int run_ablate(const CommonArgs& args) {
  const csg::ExperimentConfig cfg = load_config(args);
  const std::unique_ptr<csg::Denoiser> d = csg::make_denoiser(cfg);
  const csg::SceneClassifier clf = load_config_classifier(cfg);
  const csg::BatchResult batch =
      csg::run_ablation(cfg, *d, clf, args.jobs, emit);
  csg::write_manifest(
      (fs::path(cfg.output_dir) / "edits.jsonl").string(), batch.manifest);
  const csg::ReportPaths paths = csg::write_report(batch.rows, cfg.output_dir);
  const json summary = csg::summarize_rows(batch.rows);
  emit({{"event", "report"},
        {"csv", paths.csv},
        {"summary", paths.summary},
        {"methods", summary.at("methods")},
        {"win_rates_bg_mse", summary.at("win_rates_bg_mse")}});
  return 0;
}

int run_eval(const CommonArgs& args) {
  const csg::ExperimentConfig cfg = load_config(args);
  const csg::SceneClassifier clf = load_config_classifier(cfg);
  const json ev = cfg.raw.value("eval", json::object());
  const std::string manifest = ev.contains("manifest")
      ? ev.at("manifest").get<std::string>()
      : (fs::path(cfg.output_dir) / "edits.jsonl").string();
  const std::vector<csg::MetricsRow> rows =
      csg::eval_from_artifacts(manifest, clf);
  const std::string eval_dir = (fs::path(cfg.output_dir) / "eval").string();
  const csg::ReportPaths paths = csg::write_report(rows, eval_dir);
  emit({{"event", "report"},
        {"csv", paths.csv},
        {"summary", paths.summary},
        {"rows", rows.size()}});
  return 0;
}

int run_render(const CommonArgs& args, const std::string& input,
               const std::string& output) {
  (void)args;
  const fs::path in_path(input);
  if (in_path.extension() == ".csgw") {
    const std::vector<csg::NamedTensor> tensors = csg::load_weights_file(input);
    if (tensors.size() != 1)
      throw std::invalid_argument(
          "render: expected a single-tensor file, got " +
          std::to_string(tensors.size()) + " tensors.");
    const csg::NamedTensor& t = tensors[0];
    if (t.dims.size() == 3 && t.dims[2] == 3) {
      csg::LatentTensor x(static_cast<int>(t.dims[0]),
                          static_cast<int>(t.dims[1]),
                          static_cast<int>(t.dims[2]));
      x.data = t.values;
      csg::write_ppm(output, x);
    } else if (t.dims.size() == 2) {
      csg::Grid g(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]));
      g.v = t.values;
      csg::write_pgm(output, g);
    } else {
      throw std::invalid_argument(
          "render: tensor must be H x W x 3 or H x W.");
    }
  } else if (in_path.extension() == ".ppm") {
    csg::write_ppm(output, csg::read_ppm(input));
  } else if (in_path.extension() == ".pgm") {
    csg::write_pgm(output, csg::read_pgm(input));
  } else {
    throw std::invalid_argument("render: input must be .csgw, .ppm or .pgm.");
  }
  emit({{"event", "rendered"}, {"input", input}, {"output", output}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale guided diffusion editing harness"};
  app.require_subcommand(1);

  CommonArgs make_dataset_args, train_args, train_clf_args, invert_args,
      edit_args, ablate_args, eval_args, render_args;
  std::string render_input, render_output;

  add_common(app.add_subcommand("make-dataset", "Generate a scene dataset"),
             make_dataset_args);
  add_common(app.add_subcommand("train", "Train the denoiser"), train_args);
  add_common(app.add_subcommand("train-classifier",
                                "Train the shape classifier"),
             train_clf_args);
  add_common(app.add_subcommand("invert", "Invert an image and round-trip it"),
             invert_args);
  add_common(app.add_subcommand("edit", "Run seeded edits for one method"),
             edit_args);
  add_common(app.add_subcommand("ablate", "Compare ddim, csg_no_mixup, csg"),
             ablate_args);
  add_common(app.add_subcommand("eval", "Recompute metrics from artifacts"),
             eval_args);
  CLI::App* render = app.add_subcommand("render", "Convert tensors to images");
  add_common(render, render_args);
  render->add_option("--input", render_input, "Input .csgw/.ppm/.pgm file")
      ->required();
  render->add_option("--output", render_output, "Output image file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp") {
      std::cout << app.help();
      return 0;
    }
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (app.got_subcommand("make-dataset")) return run_make_dataset(make_dataset_args);
    if (app.got_subcommand("train")) return run_train(train_args);
    if (app.got_subcommand("train-classifier"))
      return run_train_classifier(train_clf_args);
    if (app.got_subcommand("invert")) return run_invert(invert_args);
    if (app.got_subcommand("edit")) return run_edit(edit_args);
    if (app.got_subcommand("ablate")) return run_ablate(ablate_args);
    if (app.got_subcommand("eval")) return run_eval(eval_args);
    if (app.got_subcommand("render"))
      return run_render(render_args, render_input, render_output);
    std::cerr << "no subcommand selected\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 3;
  } catch (const std::domain_error& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 3;
  } catch (const std::out_of_range& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
