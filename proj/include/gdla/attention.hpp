#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gdla/tensor.hpp"

namespace gdla {

// Pre-softmax similarity between projected queries and keys.
enum class SimilarityKind { DotProduct, Bilinear, Cosine };

std::string to_string(SimilarityKind kind);
SimilarityKind similarity_from_string(const std::string& name);

// Norm floor used inside cosine similarity so zero rows never divide by
// zero.
inline constexpr double kCosineNormEps = 1e-12;

// Projections for one attention head. The bilinear form is present exactly
// when the similarity kind is Bilinear.
struct HeadParams {
  Tensor w_q;  // d_model x d_k
  Tensor w_k;  // d_model x d_k
  Tensor w_v;  // d_model x d_v
  std::optional<Tensor> bilinear_form;  // d_k x d_k
};

// Gated multi-head attention: H heads, an output projection, and one
// learned gate logit per head. The gate vector g = sigmoid(gate_logits)
// scales each head's output, so the effective number of heads is soft and
// trained by gradient descent rather than fixed.
struct GDLAttentionParams {
  std::vector<HeadParams> heads;
  Tensor w_o;          // (H * d_v) x d_model
  Tensor gate_logits;  // length H
  SimilarityKind similarity = SimilarityKind::Cosine;
};

// Row-stochastic attention matrix: rows sum to 1, entries in [0, 1].
struct AttentionWeights {
  Tensor matrix;  // L_q x L_k
};

// Pre-softmax score matrix. DotProduct: (Q K^T) / sqrt(d_k). Bilinear:
// (Q W K^T) / sqrt(d_k). Cosine: (Q K^T) / (|q_i| |k_j| sqrt(d_k)) with
// per-row norms floored at eps; scores are then invariant to positive
// rescaling of any query or key row.
Tensor raw_scores(const Tensor& queries, const Tensor& keys,
                  SimilarityKind kind,
                  const std::optional<Tensor>& bilinear_form, double eps);

struct ScaledAttentionResult {
  Tensor output;  // L_q x d_v
  AttentionWeights weights;
};

// softmax(raw_scores) times values; the weights are returned alongside the
// output so they stay inspectable.
ScaledAttentionResult scaled_attention(
    const Tensor& queries, const Tensor& keys, const Tensor& values,
    SimilarityKind kind, const std::optional<Tensor>& bilinear_form,
    double eps);

// g = sigmoid(gate_logits); participates in the gradient graph.
Tensor gate_values(const GDLAttentionParams& params);

// Full gated multi-head pass: head_i = g_i * attention(q W_Qi, k W_Ki,
// v W_Vi), concatenated and projected by W_o. Self-attention is the case
// where all three inputs are the same tensor.
Tensor gdl_attention(const Tensor& q_in, const Tensor& k_in,
                     const Tensor& v_in, const GDLAttentionParams& params);

// Heads whose gate is at or above the threshold. Diagnostic only.
int effective_head_count(const GDLAttentionParams& params, double threshold);

}  // namespace gdla
