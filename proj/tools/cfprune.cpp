// cfprune: channel-pruning pipeline driver.
//
// Subcommands: synth-data, train-sparse, prune, finetune, eval, pipeline,
// ablate. Exit codes: 0 success, 1 runtime failure, 2 usage error,
// 3 config error. Failures print one machine-readable line:
//   error=<Category> msg="<detail>"

#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cf/config.hpp"
#include "cf/data.hpp"
#include "cf/error.hpp"
#include "cf/model.hpp"
#include "cf/trainer.hpp"

namespace fs = std::filesystem;
using namespace cf;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string in_path;
  std::string out_path;
  std::string data_labeled;
  std::string data_unlabeled;
  std::string data_test;
  std::vector<std::string> overrides;
  bool force = false;
  long seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs* args) {
  cmd->add_option("--config", args->config_path, "config file (key = value lines)");
  cmd->add_option("--in", args->in_path, "input checkpoint");
  cmd->add_option("--out", args->out_path, "output path");
  cmd->add_option("--data-labeled", args->data_labeled,
                  "labeled data: CIFAR .bin, CFTD directory, or 'synth'");
  cmd->add_option("--data-unlabeled", args->data_unlabeled,
                  "unlabeled data: CFTD file/directory, or 'synth'");
  cmd->add_option("--data-test", args->data_test,
                  "held-out test data (defaults to test files beside the labeled data)");
  cmd->add_option("--override", args->overrides, "config override key=value")
      ->take_all();
  cmd->add_flag("--force", args->force, "allow overwriting existing outputs");
  cmd->add_option("--seed", args->seed, "override the config seed");
}

PipelineConfig make_config(const CommonArgs& args) {
  PipelineConfig config = load_config(args.config_path, args.overrides);
  if (args.seed >= 0) config.seed = static_cast<std::uint64_t>(args.seed);
  return config;
}

void ensure_output(const std::string& path, bool force) {
  if (path.empty()) throw ConfigError("--out is required");
  if (!force && fs::exists(path)) {
    throw RuntimeError("refusing to overwrite " + path + "; pass --force");
  }
}

void require_input(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " is required");
  if (!fs::exists(path)) throw RuntimeError(what + " not found: " + path);
}

SynthConfig synth_for(const PipelineConfig& config) {
  SynthConfig s = config.synth;
  s.class_count = config.classes;
  s.height = config.input.height;
  s.width = config.input.width;
  return s;
}

struct LoadedData {
  LabeledDataset labeled;
  UnlabeledDataset unlabeled;
  LabeledDataset test;
  bool has_labeled = false;
  bool has_unlabeled = false;
  bool has_test = false;
};

Tensor labels_tensor(const std::vector<int>& labels) {
  std::vector<double> data(labels.begin(), labels.end());
  return tensor({labels.size()}, std::move(data));
}

LoadedData load_data(const CommonArgs& args, const PipelineConfig& config) {
  LoadedData out;
  std::optional<SynthData> synth;
  auto ensure_synth = [&]() -> SynthData& {
    if (!synth.has_value()) synth = synth_generate(synth_for(config));
    return *synth;
  };

  if (!args.data_labeled.empty()) {
    if (args.data_labeled == "synth") {
      out.labeled = ensure_synth().labeled;
      if (ensure_synth().test.images.shape[0] > 0 && args.data_test.empty()) {
        out.test = ensure_synth().test;
        out.has_test = true;
      }
    } else if (fs::is_directory(args.data_labeled)) {
      const fs::path dir(args.data_labeled);
      out.labeled = load_labeled_tensor_files((dir / "images.cftd").string(),
                                              (dir / "labels.cftd").string());
      if (args.data_test.empty() && fs::exists(dir / "test_images.cftd")) {
        out.test = load_labeled_tensor_files((dir / "test_images.cftd").string(),
                                             (dir / "test_labels.cftd").string());
        out.has_test = true;
      }
    } else {
      require_input(args.data_labeled, "--data-labeled");
      out.labeled = load_cifar10(args.data_labeled);
    }
    out.has_labeled = true;
  }

  if (!args.data_unlabeled.empty()) {
    if (args.data_unlabeled == "synth") {
      out.unlabeled = ensure_synth().unlabeled;
    } else if (fs::is_directory(args.data_unlabeled)) {
      out.unlabeled = load_tensor_file(
          (fs::path(args.data_unlabeled) / "unlabeled.cftd").string(),
          config.input.height, config.input.width);
    } else {
      require_input(args.data_unlabeled, "--data-unlabeled");
      out.unlabeled = load_tensor_file(args.data_unlabeled, config.input.height,
                                       config.input.width);
    }
    out.has_unlabeled = true;
  }

  if (!args.data_test.empty()) {
    if (args.data_test == "synth") {
      out.test = ensure_synth().test;
    } else if (fs::is_directory(args.data_test)) {
      const fs::path dir(args.data_test);
      out.test = load_labeled_tensor_files((dir / "test_images.cftd").string(),
                                           (dir / "test_labels.cftd").string());
    } else {
      require_input(args.data_test, "--data-test");
      out.test = load_cifar10(args.data_test);
    }
    out.has_test = true;
  }
  return out;
}

Normalizer make_normalizer(const PipelineConfig& config,
                           const LabeledDataset& labeled) {
  if (config.norm_mode == "none") return {};
  if (config.norm_mode == "explicit") {
    if (config.norm_mean.size() != config.input.channels ||
        config.norm_std.size() != config.input.channels) {
      throw ConfigError("explicit normalization needs norm_mean/norm_std with " +
                        std::to_string(config.input.channels) + " entries");
    }
    Normalizer norm;
    norm.mean = config.norm_mean;
    norm.stddev = config.norm_std;
    for (double s : norm.stddev) {
      if (s <= 0.0) throw ConfigError("norm_std entries must be > 0");
    }
    return norm;
  }
  return dataset_normalizer(labeled);
}

DataBundle bundle_of(const LoadedData& data, const Normalizer& normalizer) {
  DataBundle bundle;
  bundle.labeled = data.has_labeled ? &data.labeled : nullptr;
  bundle.unlabeled = data.has_unlabeled ? &data.unlabeled : nullptr;
  bundle.test = data.has_test ? &data.test : nullptr;
  bundle.normalizer = normalizer;
  return bundle;
}

std::string metrics_path_for(const PipelineConfig& config,
                             const std::string& out_path) {
  if (!config.metrics_path.empty()) return config.metrics_path;
  if (!out_path.empty()) return out_path + ".metrics";
  return "";
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_synth_data(const CommonArgs& args) {
  PipelineConfig config = make_config(args);
  if (args.out_path.empty()) throw ConfigError("--out directory is required");
  const fs::path dir(args.out_path);
  fs::create_directories(dir);
  for (const char* name : {"images.cftd", "labels.cftd", "unlabeled.cftd",
                           "test_images.cftd", "test_labels.cftd"}) {
    if (!args.force && fs::exists(dir / name)) {
      throw RuntimeError("refusing to overwrite " + (dir / name).string() +
                         "; pass --force");
    }
  }
  SynthData data = synth_generate(synth_for(config));
  write_tensor_file((dir / "images.cftd").string(), data.labeled.images);
  write_tensor_file((dir / "labels.cftd").string(),
                    labels_tensor(data.labeled.labels));
  write_tensor_file((dir / "unlabeled.cftd").string(), data.unlabeled.images);
  write_tensor_file((dir / "test_images.cftd").string(), data.test.images);
  write_tensor_file((dir / "test_labels.cftd").string(),
                    labels_tensor(data.test.labels));
  std::cout << "labeled=" << data.labeled.images.shape[0]
            << " unlabeled=" << data.unlabeled.images.shape[0]
            << " test=" << data.test.images.shape[0] << " dir=" << dir.string()
            << "\n";
  return 0;
}

int cmd_train_sparse(const CommonArgs& args) {
  PipelineConfig config = make_config(args);
  ensure_output(args.out_path, args.force);
  LoadedData data = load_data(args, config);
  if (!data.has_labeled) throw ConfigError("--data-labeled is required");
  const Normalizer normalizer = make_normalizer(config, data.labeled);
  DataBundle bundle = bundle_of(data, normalizer);

  Model student;
  std::optional<Model> teacher;
  if (!args.in_path.empty()) {
    require_input(args.in_path, "--in");
    teacher = load(args.in_path);
    student = *teacher;  // sparse network starts from the giant network
    student.iteration = 0;
  } else {
    if (config.weights.alpha > 0.0 || config.adversarial) {
      throw ConfigError(
          "train-sparse without --in has no teacher: set alpha=0 and "
          "adversarial=false to train a fresh network");
    }
    student = build(config.arch, config.input,
                    static_cast<std::size_t>(config.classes),
                    static_cast<std::size_t>(config.split_index), config.seed);
  }

  MetricsSink sink(metrics_path_for(config, args.out_path));
  Rng rng = stage_rng(config.seed, 1);
  sparse_retrain(student, teacher ? &*teacher : nullptr, bundle, config, rng,
                 &sink);
  save(student, args.out_path);
  if (bundle.test != nullptr) {
    std::cout << "accuracy=" << evaluate(student, *bundle.test, normalizer)
              << "\n";
  }
  std::cout << "checkpoint=" << args.out_path << "\n";
  return 0;
}

int cmd_prune(const CommonArgs& args) {
  PipelineConfig config = make_config(args);
  require_input(args.in_path, "--in");
  ensure_output(args.out_path, args.force);
  Model model = load(args.in_path);
  const GammaIndex index = collect_gamma(model);
  const double threshold = global_threshold(index, config.prune_fraction);
  const auto quota = static_cast<std::size_t>(std::ceil(
      config.prune_fraction * static_cast<double>(index.entries.size()) - 1e-9));
  auto [pruned, report] = prune(model, threshold, true, quota);
  save(pruned, args.out_path);

  std::ofstream report_file(args.out_path + ".report");
  report_file << report.table() << "\n" << report.key_values();
  std::cout << report.key_values();
  std::cout << "checkpoint=" << args.out_path << "\n";
  return 0;
}

int cmd_finetune(const CommonArgs& args) {
  PipelineConfig config = make_config(args);
  require_input(args.in_path, "--in");
  ensure_output(args.out_path, args.force);
  LoadedData data = load_data(args, config);
  if (!data.has_labeled) throw ConfigError("--data-labeled is required");
  const Normalizer normalizer = make_normalizer(config, data.labeled);
  DataBundle bundle = bundle_of(data, normalizer);

  Model student = load(args.in_path);
  std::optional<Model> teacher;
  const bool needs_teacher = !config.finetune_supervision_only &&
                             (config.weights.alpha > 0.0 || config.adversarial);
  if (!config.teacher_path.empty()) {
    require_input(config.teacher_path, "teacher checkpoint");
    teacher = load(config.teacher_path);
  } else if (needs_teacher) {
    throw ConfigError(
        "finetune with distillation or alignment needs `teacher = <path>` in "
        "the config (or finetune_supervision_only = true)");
  }

  MetricsSink sink(metrics_path_for(config, args.out_path));
  Rng rng = stage_rng(config.seed, 2);
  finetune(student, teacher ? &*teacher : nullptr, bundle, config, rng, &sink);
  save(student, args.out_path);
  if (bundle.test != nullptr) {
    std::cout << "accuracy=" << evaluate(student, *bundle.test, normalizer)
              << "\n";
  }
  std::cout << "checkpoint=" << args.out_path << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& args) {
  PipelineConfig config = make_config(args);
  require_input(args.in_path, "--in");
  LoadedData data = load_data(args, config);
  const LabeledDataset* eval_set = nullptr;
  if (data.has_test) {
    eval_set = &data.test;
  } else if (data.has_labeled) {
    eval_set = &data.labeled;
  } else {
    throw ConfigError("eval needs --data-test or --data-labeled");
  }
  // Normalization constants must mirror training: dataset stats come from
  // the labeled pool when present, else from the eval set itself.
  const Normalizer normalizer =
      make_normalizer(config, data.has_labeled ? data.labeled : *eval_set);
  Model model = load(args.in_path);
  std::cout << "accuracy=" << evaluate(model, *eval_set, normalizer) << "\n";
  return 0;
}

int cmd_pipeline(const CommonArgs& args) {
  PipelineConfig config = make_config(args);
  require_input(args.in_path, "--in");
  ensure_output(args.out_path, args.force);
  LoadedData data = load_data(args, config);
  if (!data.has_labeled) throw ConfigError("--data-labeled is required");
  const Normalizer normalizer = make_normalizer(config, data.labeled);
  DataBundle bundle = bundle_of(data, normalizer);

  Model teacher = load(args.in_path);
  MetricsSink sink(metrics_path_for(config, args.out_path));
  PipelineResult result = run_pipeline(teacher, bundle, config, &sink);
  save(result.model, args.out_path);

  std::ostringstream summary;
  summary.precision(6);
  summary << result.report.key_values();
  if (bundle.test != nullptr) {
    summary << "accuracy_teacher=" << evaluate(teacher, *bundle.test, normalizer)
            << "\n";
    summary << "accuracy_sparse=" << result.accuracy_sparse << "\n";
    summary << "accuracy_pruned=" << result.accuracy_pruned << "\n";
    summary << "accuracy_final=" << result.accuracy_final << "\n";
  }
  std::ofstream report_file(args.out_path + ".report");
  report_file << result.report.table() << "\n" << summary.str();
  std::cout << summary.str();
  std::cout << "checkpoint=" << args.out_path << "\n";
  return 0;
}

int cmd_ablate(const CommonArgs& args) {
  PipelineConfig config = make_config(args);
  require_input(args.in_path, "--in");
  if (args.out_path.empty()) throw ConfigError("--out directory is required");
  fs::create_directories(args.out_path);
  LoadedData data = load_data(args, config);
  if (!data.has_labeled) throw ConfigError("--data-labeled is required");
  const Normalizer normalizer = make_normalizer(config, data.labeled);
  DataBundle bundle = bundle_of(data, normalizer);
  Model teacher = load(args.in_path);

  struct Cell {
    bool distill, conf, adv, rad;
  };
  // The rows of the component-ablation grid.
  const std::vector<Cell> cells = {
      {false, false, false, false}, {true, false, false, false},
      {true, true, false, false},   {true, true, true, false},
      {true, true, false, true},    {true, true, true, true},
  };

  std::ofstream manifest(fs::path(args.out_path) / "manifest.txt");
  for (const Cell& cell : cells) {
    PipelineConfig cell_config = config;
    if (!cell.distill) cell_config.weights.alpha = 0.0;
    cell_config.confidence_weighting = cell.conf;
    cell_config.adversarial = cell.adv;
    cell_config.rademacher = cell.rad;

    std::ostringstream name;
    name << "D" << cell.distill << "_C" << cell.conf << "_A" << cell.adv
         << "_R" << cell.rad;
    const std::string metrics =
        (fs::path(args.out_path) / ("ablate_" + name.str() + ".metrics")).string();
    if (!args.force && fs::exists(metrics)) {
      throw RuntimeError("refusing to overwrite " + metrics + "; pass --force");
    }
    cell_config.metrics_path = metrics;
    MetricsSink sink(metrics);
    PipelineResult result = run_pipeline(teacher, bundle, cell_config, &sink);
    manifest << "cell=" << name.str() << " metrics=" << metrics
             << " accuracy_final=" << result.accuracy_final << "\n";
    std::cout << "cell=" << name.str()
              << " accuracy_final=" << result.accuracy_final << "\n";
  }
  std::cout << "manifest=" << (fs::path(args.out_path) / "manifest.txt").string()
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"channel pruning with unlabeled data"};
  app.require_subcommand(1);

  CommonArgs args;
  CLI::App* synth = app.add_subcommand("synth-data", "generate the synthetic dataset files");
  CLI::App* train = app.add_subcommand("train-sparse", "sparsity-regularized retraining");
  CLI::App* prune_cmd = app.add_subcommand("prune", "global-threshold channel surgery");
  CLI::App* tune = app.add_subcommand("finetune", "fine-tune a pruned checkpoint");
  CLI::App* eval_cmd = app.add_subcommand("eval", "top-1 accuracy of a checkpoint");
  CLI::App* pipe = app.add_subcommand("pipeline", "train-sparse -> prune -> finetune -> eval");
  CLI::App* ablate = app.add_subcommand("ablate", "component on/off grid");
  for (CLI::App* cmd : {synth, train, prune_cmd, tune, eval_cmd, pipe, ablate}) {
    add_common(cmd, &args);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error=UsageError msg=\"" << e.what() << "\"\n";
    return 2;
  }

  try {
    if (synth->parsed()) return cmd_synth_data(args);
    if (train->parsed()) return cmd_train_sparse(args);
    if (prune_cmd->parsed()) return cmd_prune(args);
    if (tune->parsed()) return cmd_finetune(args);
    if (eval_cmd->parsed()) return cmd_eval(args);
    if (pipe->parsed()) return cmd_pipeline(args);
    if (ablate->parsed()) return cmd_ablate(args);
    std::cerr << "error=UsageError msg=\"no subcommand\"\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error=ConfigError msg=\"" << e.what() << "\"\n";
    return 3;
  } catch (const UsageError& e) {
    std::cerr << "error=UsageError msg=\"" << e.what() << "\"\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error=" << e.category() << " msg=\"" << e.what() << "\"\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error=RuntimeError msg=\"" << e.what() << "\"\n";
    return 1;
  }
}
