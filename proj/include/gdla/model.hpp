#pragma once

#include <filesystem>
#include <string>
#include <utility>

#include "gdla/attention.hpp"
#include "gdla/params.hpp"
#include "gdla/tensor.hpp"

namespace gdla {

// How the feature columns are distributed across the two branches.
enum class SplitStrategy { FeatureHalves, Duplicate };

// How branch outputs are combined before the classifier head. Mean-pool
// each branch over the window, then concatenate.
enum class FusionKind { ConcatMeanPooled };

std::string to_string(SplitStrategy s);
SplitStrategy split_from_string(const std::string& name);

inline constexpr double kLayerNormEps = 1e-5;

// Twin-branch encoder-only classifier: each branch embeds its share of the
// input window, runs a stack of gated-attention + feedforward blocks, and
// the pooled branch outputs feed one fully connected layer.
struct TwinModelConfig {
  size_t n_features = 52;
  size_t window_len = 20;
  size_t d_model = 32;
  size_t n_layers = 2;
  size_t n_heads = 4;
  size_t d_ff = 64;
  size_t d_k = 0;  // 0: use d_model / n_heads, at least 1
  size_t d_v = 0;  // 0: use d_model / n_heads, at least 1
  size_t n_classes = 2;
  SimilarityKind similarity = SimilarityKind::Cosine;
  SplitStrategy split = SplitStrategy::FeatureHalves;
  FusionKind fusion = FusionKind::ConcatMeanPooled;

  size_t head_dim_k() const;
  size_t head_dim_v() const;
  // Feature widths of the two branches under the configured split.
  std::pair<size_t, size_t> branch_widths() const;
  void validate() const;
};

// Plain-text key-value config document. Loading validates every field and
// rejects unknown keys.
TwinModelConfig parse_model_config(const std::string& text);
TwinModelConfig load_model_config(const std::filesystem::path& path);
std::string format_model_config(const TwinModelConfig& config);
void save_model_config(const TwinModelConfig& config,
                       const std::filesystem::path& path);

// Fresh parameters: weight matrices uniform in +-sqrt(6/(fan_in+fan_out)),
// biases and gate logits zero (gates start half-open), layer-norm gains
// one. Names are branch-qualified and stable.
ParameterSet init_params(const TwinModelConfig& config, uint64_t seed);

// Fixed sinusoidal position table, sin/cos interleaved over positions
// 0..window_len-1.
Tensor positional_encoding(size_t window_len, size_t d_model);

// Column split of one window across the branches. FeatureHalves gives the
// first branch the first ceil(n/2) features; Duplicate hands the full
// window to both.
std::pair<Tensor, Tensor> split_input(const Tensor& window,
                                      SplitStrategy strategy);

// Linear projection to d_model plus the positional encoding.
Tensor embed(const Tensor& branch_input, const Tensor& projection);

// One encoder block with post-norm residuals:
//   t1 = layer_norm(t + gdl_attention(t, t, t))
//   out = layer_norm(t1 + relu(t1 w1) w2)
struct EncoderBlockParams {
  GDLAttentionParams attention;
  Tensor ff_w1, ff_w2;
  Tensor ln1_gain, ln1_bias;
  Tensor ln2_gain, ln2_bias;
};
Tensor encoder_block(const Tensor& input, const EncoderBlockParams& block);

// Typed views over the ParameterSet entries of one block. The views share
// storage with the set, so gradients and updates stay connected.
EncoderBlockParams block_params(const ParameterSet& params,
                                const TwinModelConfig& config, int branch,
                                size_t layer);

// Whole-model pass over one window: split, embed, encoder stacks,
// mean-pool per branch, concatenate, classifier head. Returns raw logits,
// shape 1 x n_classes.
Tensor forward(const Tensor& window, const ParameterSet& params,
               const TwinModelConfig& config);

// Argmax of the logits; ties break toward the lowest class index.
int predict(const Tensor& window, const ParameterSet& params,
            const TwinModelConfig& config);

// Names of the attention layers in history/diagnostic order:
// branch1.layer0 .. branch1.layerN, then branch2.
std::vector<std::string> attention_layer_names(const TwinModelConfig& config);

// Gate diagnostics for one attention layer (by the names above).
GDLAttentionParams attention_params(const ParameterSet& params,
                                    const TwinModelConfig& config, int branch,
                                    size_t layer);

}  // namespace gdla
