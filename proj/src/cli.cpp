#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "gdla/data.hpp"
#include "gdla/hash.hpp"
#include "gdla/metrics.hpp"
#include "gdla/model.hpp"
#include "gdla/trainer.hpp"

namespace gdla {

namespace {

namespace fs = std::filesystem;

// Ingest flags shared by train and eval when --data points at a raw corpus
// (a directory with corpus.csv) instead of a cached dataset directory.
struct DataFlags {
  std::string data_dir;
  size_t window = 20;
  size_t stride = 5;
  size_t onset = kDefaultOnset;
  std::string exclude;  // comma-separated labels
  size_t features = kTepFeatures;
  std::string standardizer_path;
};

void add_data_flags(CLI::App* cmd, DataFlags& flags) {
  cmd->add_option("--data", flags.data_dir,
                  "dataset directory (dataset.json) or raw corpus directory "
                  "(corpus.csv)")
      ->required();
  cmd->add_option("--window", flags.window,
                  "window length in samples (corpus ingest)");
  cmd->add_option("--stride", flags.stride, "window stride (corpus ingest)");
  cmd->add_option("--onset", flags.onset,
                  "default fault onset sample for test runs (corpus ingest)");
  cmd->add_option("--exclude", flags.exclude,
                  "comma-separated class labels to exclude, e.g. 3,9,15");
  cmd->add_option("--features", flags.features,
                  "expected feature count (corpus ingest)");
  cmd->add_option("--standardizer", flags.standardizer_path,
                  "standardizer JSON fitted on the training corpus; when "
                  "absent a corpus is standardized against itself");
}

std::set<int> parse_exclusions(const std::string& text) {
  std::set<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.insert(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("--exclude: '" + item + "' is not a class label");
    }
  }
  return out;
}

struct LoadedData {
  WindowedDataset dataset;
  std::string dataset_id;
};

LoadedData load_data(const DataFlags& flags) {
  fs::path dir(flags.data_dir);
  if (is_dataset_dir(dir)) {
    DatasetBundle bundle = load_dataset(dir);
    LoadedData out{bundle.materialize(), bundle.dataset_id};
    if (!flags.exclude.empty()) {
      out.dataset = exclude_classes(out.dataset, parse_exclusions(flags.exclude));
    }
    return out;
  }
  if (is_corpus_dir(dir)) {
    IngestOptions options;
    options.window_len = flags.window;
    options.stride = flags.stride;
    options.default_onset = flags.onset;
    options.excluded_classes = parse_exclusions(flags.exclude);
    options.expected_features = flags.features;
    if (!flags.standardizer_path.empty()) {
      options.standardizer = Standardizer::load(flags.standardizer_path);
    }
    std::ifstream manifest(dir / "corpus.csv");
    std::ostringstream content;
    content << manifest.rdbuf();
    return {ingest_corpus(dir, options),
            "corpus-" + fnv1a64_hex(content.str())};
  }
  throw IoError("'" + flags.data_dir +
                "' contains neither dataset.json nor corpus.csv");
}

std::string config_hash(const TwinModelConfig& config) {
  return fnv1a64_hex(format_model_config(config));
}

// --- synth ---------------------------------------------------------------

int run_synth(const std::string& spec_path, const std::string& out_dir) {
  SyntheticSpec spec = load_synthetic_spec(spec_path);
  SynthOutput out = synthesize_full(spec);
  fs::create_directories(out_dir);
  save_dataset(out.train, fs::path(out_dir) / "train");
  save_dataset(out.test, fs::path(out_dir) / "test");
  out.standardizer.save(fs::path(out_dir) / "standardizer.json");
  std::cout << "wrote " << out.train.windows.size() << " train and "
            << out.test.windows.size() << " test windows to " << out_dir
            << "\n";
  return 0;
}

// --- train ---------------------------------------------------------------

int run_train(const DataFlags& data_flags, const std::string& model_path,
              const std::string& train_path, const std::string& out_dir,
              double val_fraction, const std::string& class_weights) {
  TwinModelConfig config = load_model_config(model_path);
  TrainConfig cfg = train_path.empty() ? TrainConfig{} : load_train_config(train_path);
  if (class_weights == "balanced") {
    cfg.balanced_class_weights = true;
  } else if (!class_weights.empty() && class_weights != "none") {
    throw ConfigError("--class-weights must be none or balanced");
  }

  LoadedData data = load_data(data_flags);
  size_t n_classes = data.dataset.class_names.size();
  if (n_classes != config.n_classes) {
    throw ConfigError("model expects " + std::to_string(config.n_classes) +
                      " classes but the dataset has " +
                      std::to_string(n_classes));
  }
  auto [train_ds, val_ds] = train_val_split(data.dataset, 1.0 - val_fraction,
                                            cfg.seed);

  ParameterSet initial = init_params(config, cfg.seed);
  TrainResult result = train(initial, config, train_ds, val_ds, cfg);

  fs::create_directories(out_dir);
  result.params.save(fs::path(out_dir) / "checkpoint.gdla");
  save_model_config(config, fs::path(out_dir) / "model.cfg");
  result.history.save_json(fs::path(out_dir) / "history.json");
  // A corpus fit is saved so eval can standardize test data identically.
  if (is_corpus_dir(data_flags.data_dir) &&
      data_flags.standardizer_path.empty()) {
    std::vector<CorpusEntry> entries = read_corpus_manifest(data_flags.data_dir);
    std::vector<RawRun> runs;
    for (const CorpusEntry& e : entries) {
      runs.push_back(load_run(e.file, e.fault_class,
                              e.onset.value_or(e.fault_class > 0
                                                   ? data_flags.onset
                                                   : 0),
                              data_flags.features));
    }
    fit_standardizer(runs).save(fs::path(out_dir) / "standardizer.json");
  }
  std::cout << "best epoch " << result.history.best_epoch
            << ", validation macro F1 "
            << result.history.best_val_macro_f1 << "\n";
  return 0;
}

// --- eval ----------------------------------------------------------------

int run_eval(const DataFlags& data_flags, const std::string& checkpoint_path,
             const std::string& model_path, const std::string& out_json,
             const std::string& out_csv) {
  ParameterSet params = ParameterSet::load(checkpoint_path);
  TwinModelConfig config = load_model_config(model_path);
  LoadedData data = load_data(data_flags);

  ClassificationReport rep = evaluate(params, config, data.dataset);
  rep.dataset_id = data.dataset_id;
  rep.model_config_hash = config_hash(config);

  if (!out_json.empty()) save_report_json(rep, out_json);
  if (!out_csv.empty()) save_report_csv(rep, out_csv);
  if (out_json.empty() && out_csv.empty()) {
    std::cout << render_report_table(rep);
  } else {
    std::cout << "macro F1 " << rep.macro_f1 << ", accuracy " << rep.accuracy
              << "\n";
  }
  return 0;
}

// --- gradcheck -----------------------------------------------------------

TwinModelConfig tiny_config() {
  TwinModelConfig config;
  config.n_features = 6;
  config.window_len = 4;
  config.d_model = 8;
  config.n_layers = 1;
  config.n_heads = 2;
  config.d_ff = 16;
  config.n_classes = 3;
  return config;
}

int run_gradcheck(const std::string& model_path, const std::string& similarity,
                  double step, double tolerance, uint64_t seed) {
  TwinModelConfig config =
      model_path.empty() ? tiny_config() : load_model_config(model_path);
  if (!similarity.empty()) {
    config.similarity = similarity_from_string(similarity);
  }

  ParameterSet params = init_params(config, seed);
  Rng rng(seed + 1);
  std::vector<Tensor> windows;
  std::vector<int> labels;
  for (size_t b = 0; b < 2; ++b) {
    windows.push_back(Tensor::random_uniform(
        {config.window_len, config.n_features}, -1.0, 1.0, rng));
    labels.push_back(static_cast<int>(b % config.n_classes));
  }
  auto f = [&](const ParameterSet& p) {
    std::vector<Tensor> logits;
    for (const Tensor& w : windows) logits.push_back(forward(w, p, config));
    return cross_entropy(concat_rows(logits), labels);
  };

  GradReport rep = finite_diff_check(f, params, step, tolerance);
  for (const auto& [name, err] : rep.per_param_max_rel_error) {
    std::printf("%-32s %.3e\n", name.c_str(), err);
  }
  std::printf("max relative error %.6e (tolerance %.1e): %s\n",
              rep.max_rel_error, tolerance, rep.pass ? "PASS" : "FAIL");
  return rep.pass ? 0 : 1;
}

// --- report --------------------------------------------------------------

int run_report(const std::string& in_path) {
  std::ifstream is(in_path);
  if (!is) throw IoError("cannot open report '" + in_path + "'");
  std::ostringstream buffer;
  buffer << is.rdbuf();
  std::cout << render_report_table(report_from_json(buffer.str()));
  return 0;
}

}  // namespace

int cli(int argc, char** argv) {
  CLI::App app{"Twin-transformer fault classification toolkit"};
  app.require_subcommand(1);
  int exit_code = 0;

  // synth
  auto* synth = app.add_subcommand(
      "synth", "generate a synthetic windowed dataset from a spec file");
  std::string synth_spec, synth_out;
  synth->add_option("--spec", synth_spec, "synthetic spec JSON")->required();
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->callback([&] { exit_code = run_synth(synth_spec, synth_out); });

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model on a dataset");
  DataFlags train_data;
  std::string train_model, train_cfg, train_out, class_weights;
  double val_fraction = 0.2;
  add_data_flags(train_cmd, train_data);
  train_cmd->add_option("--model", train_model, "model config file")->required();
  train_cmd->add_option("--train", train_cfg,
                        "train config JSON (defaults apply when omitted)");
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_option("--val-fraction", val_fraction,
                        "fraction of windows held out for validation");
  train_cmd->add_option("--class-weights", class_weights,
                        "none (default) or balanced: weight the loss by "
                        "inverse class frequency");
  train_cmd->callback([&] {
    exit_code = run_train(train_data, train_model, train_cfg, train_out,
                          val_fraction, class_weights);
  });

  // eval
  auto* eval_cmd =
      app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  DataFlags eval_data;
  std::string eval_ckpt, eval_model, eval_json, eval_csv;
  add_data_flags(eval_cmd, eval_data);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--model", eval_model, "model config file")->required();
  eval_cmd->add_option("--out-json", eval_json, "report JSON output path");
  eval_cmd->add_option("--out-csv", eval_csv, "report CSV output path");
  eval_cmd->callback([&] {
    exit_code = run_eval(eval_data, eval_ckpt, eval_model, eval_json, eval_csv);
  });

  // gradcheck
  auto* gc = app.add_subcommand(
      "gradcheck",
      "compare analytic gradients against central finite differences");
  std::string gc_model, gc_similarity;
  double gc_step = 1e-5, gc_tolerance = 1e-4;
  uint64_t gc_seed = 0;
  gc->add_option("--model", gc_model,
                 "model config (defaults to a tiny built-in model)");
  gc->add_option("--similarity", gc_similarity,
                 "override similarity: dot_product, bilinear, cosine");
  gc->add_option("--step", gc_step, "finite difference step");
  gc->add_option("--tolerance", gc_tolerance, "max relative error to pass");
  gc->add_option("--seed", gc_seed, "seed for parameters and probe batch");
  gc->callback([&] {
    exit_code =
        run_gradcheck(gc_model, gc_similarity, gc_step, gc_tolerance, gc_seed);
  });

  // report
  auto* report_cmd =
      app.add_subcommand("report", "render a report JSON as a text table");
  std::string report_in;
  report_cmd->add_option("--in", report_in, "report JSON path")->required();
  report_cmd->callback([&] { exit_code = run_report(report_in); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::flush;
    return 1;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}

}  // namespace gdla
