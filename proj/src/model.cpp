#include "gdla/model.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace gdla {

std::string to_string(SplitStrategy s) {
  switch (s) {
    case SplitStrategy::FeatureHalves: return "feature_halves";
    case SplitStrategy::Duplicate: return "duplicate";
  }
  throw ContractError("to_string: unknown split strategy");
}

SplitStrategy split_from_string(const std::string& name) {
  if (name == "feature_halves") return SplitStrategy::FeatureHalves;
  if (name == "duplicate") return SplitStrategy::Duplicate;
  throw ConfigError("unknown split strategy '" + name +
                    "' (expected feature_halves or duplicate)");
}

size_t TwinModelConfig::head_dim_k() const {
  if (d_k > 0) return d_k;
  return std::max<size_t>(1, d_model / n_heads);
}

size_t TwinModelConfig::head_dim_v() const {
  if (d_v > 0) return d_v;
  return std::max<size_t>(1, d_model / n_heads);
}

std::pair<size_t, size_t> TwinModelConfig::branch_widths() const {
  if (split == SplitStrategy::Duplicate) return {n_features, n_features};
  size_t first = (n_features + 1) / 2;
  return {first, n_features - first};
}

void TwinModelConfig::validate() const {
  auto positive = [](size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(n_features, "n_features");
  positive(window_len, "window");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(n_classes, "n_classes");
  if (split == SplitStrategy::FeatureHalves && n_features < 2) {
    throw ConfigError("feature_halves split requires n_features >= 2, got " +
                      std::to_string(n_features));
  }
}

// ---------------------------------------------------------------------------
// Config document

namespace {

const char* const kConfigKeys[] = {"n_features", "window",  "d_model",
                                   "n_layers",   "n_heads", "d_ff",
                                   "d_k",        "d_v",     "n_classes",
                                   "similarity", "split",   "fusion"};

size_t parse_size(const std::string& key, const std::string& value) {
  size_t pos = 0;
  unsigned long long parsed = 0;
  try {
    parsed = std::stoull(value, &pos);
  } catch (const std::exception&) {
    throw ConfigError("model config: '" + key + "' expects an integer, got '" +
                      value + "'");
  }
  if (pos != value.size()) {
    throw ConfigError("model config: '" + key + "' expects an integer, got '" +
                      value + "'");
  }
  return static_cast<size_t>(parsed);
}

}  // namespace

TwinModelConfig parse_model_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto strip = [](std::string s) {
      size_t b = s.find_first_not_of(" \t\r");
      size_t e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    std::string stripped = strip(line);
    if (stripped.empty()) continue;
    size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("model config line " + std::to_string(line_no) +
                        ": expected 'key = value'");
    }
    std::string key = strip(stripped.substr(0, eq));
    std::string value = strip(stripped.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ConfigError("model config line " + std::to_string(line_no) +
                        ": empty key or value");
    }
    bool known = false;
    for (const char* k : kConfigKeys) known = known || key == k;
    if (!known) {
      throw ConfigError("model config: unknown key '" + key + "'");
    }
    if (kv.count(key)) {
      throw ConfigError("model config: duplicate key '" + key + "'");
    }
    kv[key] = value;
  }

  TwinModelConfig config;
  auto require = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end())
      throw ConfigError("model config: missing required key '" +
                        std::string(key) + "'");
    return it->second;
  };
  config.n_features = parse_size("n_features", require("n_features"));
  config.window_len = parse_size("window", require("window"));
  config.d_model = parse_size("d_model", require("d_model"));
  config.n_layers = parse_size("n_layers", require("n_layers"));
  config.n_heads = parse_size("n_heads", require("n_heads"));
  config.d_ff = parse_size("d_ff", require("d_ff"));
  config.n_classes = parse_size("n_classes", require("n_classes"));
  if (kv.count("d_k")) config.d_k = parse_size("d_k", kv["d_k"]);
  if (kv.count("d_v")) config.d_v = parse_size("d_v", kv["d_v"]);
  if (kv.count("similarity"))
    config.similarity = similarity_from_string(kv["similarity"]);
  if (kv.count("split")) config.split = split_from_string(kv["split"]);
  if (kv.count("fusion") && kv["fusion"] != "concat_mean_pooled") {
    throw ConfigError("model config: unknown fusion '" + kv["fusion"] + "'");
  }
  config.validate();
  return config;
}

TwinModelConfig load_model_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open model config '" + path.string() + "'");
  std::ostringstream buffer;
  buffer << is.rdbuf();
  return parse_model_config(buffer.str());
}

std::string format_model_config(const TwinModelConfig& config) {
  std::ostringstream os;
  os << "n_features = " << config.n_features << "\n"
     << "window = " << config.window_len << "\n"
     << "d_model = " << config.d_model << "\n"
     << "n_layers = " << config.n_layers << "\n"
     << "n_heads = " << config.n_heads << "\n"
     << "d_ff = " << config.d_ff << "\n"
     << "d_k = " << config.head_dim_k() << "\n"
     << "d_v = " << config.head_dim_v() << "\n"
     << "n_classes = " << config.n_classes << "\n"
     << "similarity = " << to_string(config.similarity) << "\n"
     << "split = " << to_string(config.split) << "\n"
     << "fusion = concat_mean_pooled\n";
  return os.str();
}

void save_model_config(const TwinModelConfig& config,
                       const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write model config '" + path.string() + "'");
  os << format_model_config(config);
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

std::string branch_prefix(int branch) {
  return "branch" + std::to_string(branch) + ".";
}

std::string layer_prefix(int branch, size_t layer) {
  return branch_prefix(branch) + "layer" + std::to_string(layer) + ".";
}

Tensor xavier(size_t fan_in, size_t fan_out, Rng& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return Tensor::random_uniform({fan_in, fan_out}, -limit, limit, rng);
}

}  // namespace

ParameterSet init_params(const TwinModelConfig& config, uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ParameterSet params;
  auto [width1, width2] = config.branch_widths();
  size_t dk = config.head_dim_k();
  size_t dv = config.head_dim_v();

  for (int branch = 1; branch <= 2; ++branch) {
    size_t width = branch == 1 ? width1 : width2;
    params.insert(branch_prefix(branch) + "embed.proj",
                  xavier(width, config.d_model, rng));
    for (size_t layer = 0; layer < config.n_layers; ++layer) {
      std::string prefix = layer_prefix(branch, layer);
      for (size_t h = 0; h < config.n_heads; ++h) {
        std::string head = prefix + "attn.head" + std::to_string(h) + ".";
        params.insert(head + "w_q", xavier(config.d_model, dk, rng));
        params.insert(head + "w_k", xavier(config.d_model, dk, rng));
        params.insert(head + "w_v", xavier(config.d_model, dv, rng));
        if (config.similarity == SimilarityKind::Bilinear) {
          params.insert(head + "w_bl", xavier(dk, dk, rng));
        }
      }
      params.insert(prefix + "attn.w_o",
                    xavier(config.n_heads * dv, config.d_model, rng));
      params.insert(prefix + "attn.gates",
                    Tensor::zeros({config.n_heads}));
      params.insert(prefix + "ln1.gain", Tensor::full({config.d_model}, 1.0));
      params.insert(prefix + "ln1.bias", Tensor::zeros({config.d_model}));
      params.insert(prefix + "ff.w1", xavier(config.d_model, config.d_ff, rng));
      params.insert(prefix + "ff.w2", xavier(config.d_ff, config.d_model, rng));
      params.insert(prefix + "ln2.gain", Tensor::full({config.d_model}, 1.0));
      params.insert(prefix + "ln2.bias", Tensor::zeros({config.d_model}));
    }
  }
  params.insert("head.w", xavier(2 * config.d_model, config.n_classes, rng));
  params.insert("head.b", Tensor::zeros({config.n_classes}));
  return params;
}

Tensor positional_encoding(size_t window_len, size_t d_model) {
  std::vector<double> table(window_len * d_model);
  for (size_t pos = 0; pos < window_len; ++pos) {
    for (size_t i = 0; i < d_model; i += 2) {
      double freq = std::pow(
          10000.0, static_cast<double>(i) / static_cast<double>(d_model));
      double angle = static_cast<double>(pos) / freq;
      table[pos * d_model + i] = std::sin(angle);
      if (i + 1 < d_model) table[pos * d_model + i + 1] = std::cos(angle);
    }
  }
  return Tensor({window_len, d_model}, std::move(table));
}

std::pair<Tensor, Tensor> split_input(const Tensor& window,
                                      SplitStrategy strategy) {
  if (strategy == SplitStrategy::Duplicate) return {window, window};
  size_t n = window.cols();
  if (n < 2) {
    throw ConfigError("split_input: feature_halves needs at least 2 features, "
                      "got " + std::to_string(n));
  }
  size_t first = (n + 1) / 2;
  return {slice_cols(window, 0, first), slice_cols(window, first, n)};
}

Tensor embed(const Tensor& branch_input, const Tensor& projection) {
  Tensor projected = matmul(branch_input, projection);
  return add(projected,
             positional_encoding(projected.rows(), projected.cols()));
}

Tensor encoder_block(const Tensor& input, const EncoderBlockParams& block) {
  Tensor attended = gdl_attention(input, input, input, block.attention);
  Tensor t1 = layer_norm(add(input, attended), block.ln1_gain, block.ln1_bias,
                         kLayerNormEps);
  Tensor hidden = relu(matmul(t1, block.ff_w1));
  Tensor ff_out = matmul(hidden, block.ff_w2);
  return layer_norm(add(t1, ff_out), block.ln2_gain, block.ln2_bias,
                    kLayerNormEps);
}

GDLAttentionParams attention_params(const ParameterSet& params,
                                    const TwinModelConfig& config, int branch,
                                    size_t layer) {
  std::string prefix = layer_prefix(branch, layer);
  GDLAttentionParams attn;
  attn.similarity = config.similarity;
  attn.heads.reserve(config.n_heads);
  for (size_t h = 0; h < config.n_heads; ++h) {
    std::string head = prefix + "attn.head" + std::to_string(h) + ".";
    HeadParams hp;
    hp.w_q = params.at(head + "w_q");
    hp.w_k = params.at(head + "w_k");
    hp.w_v = params.at(head + "w_v");
    if (config.similarity == SimilarityKind::Bilinear) {
      hp.bilinear_form = params.at(head + "w_bl");
    }
    attn.heads.push_back(std::move(hp));
  }
  attn.w_o = params.at(prefix + "attn.w_o");
  attn.gate_logits = params.at(prefix + "attn.gates");
  return attn;
}

EncoderBlockParams block_params(const ParameterSet& params,
                                const TwinModelConfig& config, int branch,
                                size_t layer) {
  std::string prefix = layer_prefix(branch, layer);
  EncoderBlockParams block;
  block.attention = attention_params(params, config, branch, layer);
  block.ff_w1 = params.at(prefix + "ff.w1");
  block.ff_w2 = params.at(prefix + "ff.w2");
  block.ln1_gain = params.at(prefix + "ln1.gain");
  block.ln1_bias = params.at(prefix + "ln1.bias");
  block.ln2_gain = params.at(prefix + "ln2.gain");
  block.ln2_bias = params.at(prefix + "ln2.bias");
  return block;
}

Tensor forward(const Tensor& window, const ParameterSet& params,
               const TwinModelConfig& config) {
  if (window.rows() != config.window_len ||
      window.cols() != config.n_features) {
    throw DimensionError("forward: window " + window.shape_str() +
                         " does not match configured " +
                         std::to_string(config.window_len) + "x" +
                         std::to_string(config.n_features));
  }
  auto [x1, x2] = split_input(window, config.split);

  std::vector<Tensor> pooled;
  pooled.reserve(2);
  for (int branch = 1; branch <= 2; ++branch) {
    const Tensor& branch_input = branch == 1 ? x1 : x2;
    Tensor t = embed(branch_input,
                     params.at(branch_prefix(branch) + "embed.proj"));
    for (size_t layer = 0; layer < config.n_layers; ++layer) {
      t = encoder_block(t, block_params(params, config, branch, layer));
    }
    pooled.push_back(mean_rows(t));
  }

  Tensor fused = concat_cols(pooled);
  return add_rowvec(matmul(fused, params.at("head.w")), params.at("head.b"));
}

int predict(const Tensor& window, const ParameterSet& params,
            const TwinModelConfig& config) {
  NoGradGuard off;
  Tensor logits = forward(window, params, config);
  int best = 0;
  for (size_t c = 1; c < logits.size(); ++c) {
    if (logits.at(c) > logits.at(best)) best = static_cast<int>(c);
  }
  return best;
}

std::vector<std::string> attention_layer_names(const TwinModelConfig& config) {
  std::vector<std::string> names;
  names.reserve(2 * config.n_layers);
  for (int branch = 1; branch <= 2; ++branch) {
    for (size_t layer = 0; layer < config.n_layers; ++layer) {
      names.push_back("branch" + std::to_string(branch) + ".layer" +
                      std::to_string(layer));
    }
  }
  return names;
}

}  // namespace gdla
