#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gdla/data.hpp"
#include "gdla/metrics.hpp"
#include "gdla/model.hpp"
#include "gdla/params.hpp"

namespace gdla {

enum class OptimizerKind { Sgd, Adam };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(const std::string& name);

// Training configuration. Together with the dataset and model config this
// fully determines the run: identical seeds give bitwise-identical
// parameters and history.
struct TrainConfig {
  double learning_rate = 1e-3;
  size_t epochs = 50;
  size_t batch_size = 32;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  uint64_t seed = 0;
  size_t early_stop_patience = 10;  // 0 disables early stopping
  std::optional<std::filesystem::path> checkpoint_path;
  bool balanced_class_weights = false;

  void validate() const;
};

// JSON document; unknown keys are rejected to catch typos.
TrainConfig parse_train_config(const std::string& json_text);
TrainConfig load_train_config(const std::filesystem::path& path);

struct EpochStats {
  size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_macro_f1 = 0.0;
  // Gates at or above 0.5, one entry per attention layer in
  // attention_layer_names() order.
  std::vector<int> effective_heads;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  size_t best_epoch = 0;
  double best_val_macro_f1 = 0.0;

  std::string to_json() const;
  void save_json(const std::filesystem::path& path) const;
};

struct TrainResult {
  ParameterSet params;  // best-validation checkpoint
  TrainHistory history;
};

// Mini-batch gradient descent on cross-entropy with a seed-determined
// shuffle per epoch and early stopping on validation macro F1. Returns the
// checkpoint with the best validation score seen. A non-finite loss aborts
// with the epoch/batch position and a parameter-norm dump.
TrainResult train(const ParameterSet& initial, const TwinModelConfig& config,
                  const WindowedDataset& train_ds,
                  const WindowedDataset& val_ds, const TrainConfig& cfg);

// Predicts every window and reports the full metric suite.
ClassificationReport evaluate(const ParameterSet& params,
                              const TwinModelConfig& config,
                              const WindowedDataset& ds);

// Mean cross-entropy over a dataset without touching the gradient graph.
double dataset_loss(const ParameterSet& params, const TwinModelConfig& config,
                    const WindowedDataset& ds);

// Command-line entry point (subcommands: synth, train, eval, gradcheck,
// report). Exit codes: 0 success, 1 validation/contract error, 2 I/O error.
int cli(int argc, char** argv);

}  // namespace gdla
