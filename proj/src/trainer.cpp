#include "gdla/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gdla/rng.hpp"
#include "json.hpp"

namespace gdla {

namespace {
using nlohmann::json;
}

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::Sgd: return "sgd";
    case OptimizerKind::Adam: return "adam";
  }
  throw ContractError("to_string: unknown optimizer");
}

OptimizerKind optimizer_from_string(const std::string& name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adam)");
}

void TrainConfig::validate() const {
  if (learning_rate < 0.0)
    throw ConfigError("train config: learning_rate must be non-negative");
  if (epochs == 0) throw ConfigError("train config: epochs must be positive");
  if (batch_size == 0)
    throw ConfigError("train config: batch_size must be positive");
  if (optimizer == OptimizerKind::Adam) {
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ConfigError("train config: adam betas must lie in [0, 1)");
    if (adam_eps <= 0.0)
      throw ConfigError("train config: adam eps must be positive");
  }
}

TrainConfig parse_train_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("train config: ") + e.what());
  }
  for (const auto& item : j.items()) {
    static const char* known[] = {"learning_rate", "epochs", "batch_size",
                                  "optimizer",     "beta1",  "beta2",
                                  "eps",           "seed",   "early_stop_patience",
                                  "checkpoint_path", "class_weights"};
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    if (!ok) throw ConfigError("train config: unknown key '" + item.key() + "'");
  }
  TrainConfig cfg;
  try {
    if (j.count("learning_rate")) cfg.learning_rate = j["learning_rate"].get<double>();
    if (j.count("epochs")) cfg.epochs = j["epochs"].get<size_t>();
    if (j.count("batch_size")) cfg.batch_size = j["batch_size"].get<size_t>();
    if (j.count("optimizer"))
      cfg.optimizer = optimizer_from_string(j["optimizer"].get<std::string>());
    if (j.count("beta1")) cfg.beta1 = j["beta1"].get<double>();
    if (j.count("beta2")) cfg.beta2 = j["beta2"].get<double>();
    if (j.count("eps")) cfg.adam_eps = j["eps"].get<double>();
    if (j.count("seed")) cfg.seed = j["seed"].get<uint64_t>();
    if (j.count("early_stop_patience"))
      cfg.early_stop_patience = j["early_stop_patience"].get<size_t>();
    if (j.count("checkpoint_path"))
      cfg.checkpoint_path = j["checkpoint_path"].get<std::string>();
    if (j.count("class_weights")) {
      std::string mode = j["class_weights"].get<std::string>();
      if (mode == "balanced") {
        cfg.balanced_class_weights = true;
      } else if (mode != "none") {
        throw ConfigError("train config: class_weights must be none or balanced");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open train config '" + path.string() + "'");
  std::ostringstream buffer;
  buffer << is.rdbuf();
  return parse_train_config(buffer.str());
}

// ---------------------------------------------------------------------------
// History

std::string TrainHistory::to_json() const {
  json j;
  j["best_epoch"] = best_epoch;
  j["best_val_macro_f1"] = best_val_macro_f1;
  json rows = json::array();
  for (const EpochStats& e : epochs) {
    json row;
    row["epoch"] = e.epoch;
    row["train_loss"] = e.train_loss;
    row["val_loss"] = e.val_loss;
    row["val_macro_f1"] = e.val_macro_f1;
    row["effective_heads"] = e.effective_heads;
    rows.push_back(row);
  }
  j["epochs"] = rows;
  return j.dump(2) + "\n";
}

void TrainHistory::save_json(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write history '" + path.string() + "'");
  os << to_json();
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct AdamState {
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  size_t step = 0;
};

void apply_update(ParameterSet& params,
                  const std::map<std::string, Tensor>& grads,
                  const TrainConfig& cfg, AdamState& adam) {
  if (cfg.optimizer == OptimizerKind::Sgd) {
    for (const auto& [name, grad] : grads) {
      const Tensor& p = params.at(name);
      std::vector<double> next = p.values();
      const std::vector<double>& g = grad.values();
      for (size_t i = 0; i < next.size(); ++i)
        next[i] -= cfg.learning_rate * g[i];
      params.assign(name, Tensor(p.shape(), std::move(next)));
    }
    return;
  }

  ++adam.step;
  double bias1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam.step));
  double bias2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam.step));
  for (const auto& [name, grad] : grads) {
    const Tensor& p = params.at(name);
    const std::vector<double>& g = grad.values();
    std::vector<double>& m = adam.m[name];
    std::vector<double>& v = adam.v[name];
    if (m.empty()) m.assign(g.size(), 0.0);
    if (v.empty()) v.assign(g.size(), 0.0);
    std::vector<double> next = p.values();
    for (size_t i = 0; i < next.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      double m_hat = m[i] / bias1;
      double v_hat = v[i] / bias2;
      next[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
    params.assign(name, Tensor(p.shape(), std::move(next)));
  }
}

std::string parameter_norm_dump(const ParameterSet& params) {
  std::ostringstream os;
  for (const auto& [name, p] : params) {
    double sq = 0.0;
    for (double v : p.values()) sq += v * v;
    os << "  " << name << ": l2=" << std::sqrt(sq) << "\n";
  }
  return os.str();
}

std::vector<int> gate_census(const ParameterSet& params,
                             const TwinModelConfig& config) {
  std::vector<int> counts;
  for (int branch = 1; branch <= 2; ++branch) {
    for (size_t layer = 0; layer < config.n_layers; ++layer) {
      counts.push_back(effective_head_count(
          attention_params(params, config, branch, layer), 0.5));
    }
  }
  return counts;
}

std::vector<double> balanced_weights(const WindowedDataset& ds,
                                     size_t n_classes) {
  std::vector<double> counts(n_classes, 0.0);
  for (int label : ds.labels) counts[static_cast<size_t>(label)] += 1.0;
  std::vector<double> weights(n_classes, 0.0);
  double total = static_cast<double>(ds.labels.size());
  for (size_t c = 0; c < n_classes; ++c) {
    weights[c] = counts[c] > 0.0
                     ? total / (static_cast<double>(n_classes) * counts[c])
                     : 0.0;
  }
  return weights;
}

void check_labels(const WindowedDataset& ds, size_t n_classes,
                  const char* what) {
  if (ds.size() == 0)
    throw ContractError(std::string(what) + " dataset is empty");
  if (ds.windows.size() != ds.labels.size())
    throw ContractError(std::string(what) + " dataset: window/label mismatch");
  for (int label : ds.labels) {
    if (label < 0 || static_cast<size_t>(label) >= n_classes) {
      throw ContractError(std::string(what) + " dataset: label " +
                          std::to_string(label) +
                          " outside the model's " +
                          std::to_string(n_classes) + " classes");
    }
  }
}

}  // namespace

double dataset_loss(const ParameterSet& params, const TwinModelConfig& config,
                    const WindowedDataset& ds) {
  check_labels(ds, config.n_classes, "loss");
  NoGradGuard off;
  double total = 0.0;
  for (size_t i = 0; i < ds.size(); ++i) {
    Tensor logits = forward(ds.windows[i], params, config);
    total += cross_entropy(logits, {ds.labels[i]}).scalar_value();
  }
  return total / static_cast<double>(ds.size());
}

TrainResult train(const ParameterSet& initial, const TwinModelConfig& config,
                  const WindowedDataset& train_ds,
                  const WindowedDataset& val_ds, const TrainConfig& cfg) {
  cfg.validate();
  config.validate();
  check_labels(train_ds, config.n_classes, "train");
  check_labels(val_ds, config.n_classes, "validation");

  ParameterSet params = initial;
  AdamState adam;
  Rng shuffle_rng(cfg.seed);

  std::vector<double> class_weights;
  if (cfg.balanced_class_weights)
    class_weights = balanced_weights(train_ds, config.n_classes);

  TrainResult result;
  result.history.best_val_macro_f1 = -1.0;
  ParameterSet best = params;
  size_t best_epoch = 0;
  size_t epochs_since_best = 0;

  std::vector<size_t> order(train_ds.size());
  std::iota(order.begin(), order.end(), 0);

  for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    size_t n_batches = 0;

    for (size_t batch_start = 0; batch_start < order.size();
         batch_start += cfg.batch_size) {
      size_t batch_end =
          std::min(batch_start + cfg.batch_size, order.size());
      try {
        new_graph();
        std::vector<Tensor> logit_rows;
        std::vector<int> labels;
        logit_rows.reserve(batch_end - batch_start);
        for (size_t k = batch_start; k < batch_end; ++k) {
          size_t idx = order[k];
          logit_rows.push_back(forward(train_ds.windows[idx], params, config));
          labels.push_back(train_ds.labels[idx]);
        }
        Tensor loss =
            cross_entropy(concat_rows(logit_rows), labels, class_weights);
        epoch_loss += loss.scalar_value() *
                      static_cast<double>(batch_end - batch_start);
        std::map<std::string, Tensor> grads = backward(loss, params);
        apply_update(params, grads, cfg, adam);
        ++n_batches;
      } catch (const NonFiniteError& e) {
        throw TrainingError(
            "training aborted: non-finite loss at epoch " +
            std::to_string(epoch) + ", batch " + std::to_string(n_batches) +
            " (" + e.what() + ")\nparameter norms:\n" +
            parameter_norm_dump(params));
      }
    }
    new_graph();

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = epoch_loss / static_cast<double>(order.size());
    stats.val_loss = dataset_loss(params, config, val_ds);
    stats.val_macro_f1 = evaluate(params, config, val_ds).macro_f1;
    stats.effective_heads = gate_census(params, config);
    result.history.epochs.push_back(stats);

    if (stats.val_macro_f1 > result.history.best_val_macro_f1) {
      result.history.best_val_macro_f1 = stats.val_macro_f1;
      best = params;
      best_epoch = epoch;
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
      if (cfg.early_stop_patience > 0 &&
          epochs_since_best >= cfg.early_stop_patience) {
        break;
      }
    }
  }

  result.history.best_epoch = best_epoch;
  result.params = std::move(best);
  if (cfg.checkpoint_path) result.params.save(*cfg.checkpoint_path);
  return result;
}

ClassificationReport evaluate(const ParameterSet& params,
                              const TwinModelConfig& config,
                              const WindowedDataset& ds) {
  check_labels(ds, config.n_classes, "evaluation");
  std::vector<int> predictions;
  predictions.reserve(ds.size());
  for (const Tensor& window : ds.windows) {
    predictions.push_back(predict(window, params, config));
  }
  ClassificationReport rep =
      report(confusion(predictions, ds.labels, config.n_classes));
  rep.class_names = ds.class_names;
  return rep;
}

}  // namespace gdla
