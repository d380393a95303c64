#include "gdla/attention.hpp"

#include <cmath>

namespace gdla {

std::string to_string(SimilarityKind kind) {
  switch (kind) {
    case SimilarityKind::DotProduct: return "dot_product";
    case SimilarityKind::Bilinear: return "bilinear";
    case SimilarityKind::Cosine: return "cosine";
  }
  throw ContractError("to_string: unknown similarity kind");
}

SimilarityKind similarity_from_string(const std::string& name) {
  if (name == "dot_product") return SimilarityKind::DotProduct;
  if (name == "bilinear") return SimilarityKind::Bilinear;
  if (name == "cosine") return SimilarityKind::Cosine;
  throw ConfigError("unknown similarity '" + name +
                    "' (expected dot_product, bilinear, or cosine)");
}

Tensor raw_scores(const Tensor& queries, const Tensor& keys,
                  SimilarityKind kind,
                  const std::optional<Tensor>& bilinear_form, double eps) {
  if (queries.cols() != keys.cols()) {
    throw DimensionError("raw_scores: query width " + queries.shape_str() +
                         " vs key width " + keys.shape_str());
  }
  if ((kind == SimilarityKind::Bilinear) != bilinear_form.has_value()) {
    throw ConfigError(kind == SimilarityKind::Bilinear
                          ? "raw_scores: bilinear similarity requires a form "
                            "matrix"
                          : "raw_scores: bilinear form supplied for a "
                            "non-bilinear similarity");
  }
  size_t d_k = queries.cols();
  double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(d_k));

  switch (kind) {
    case SimilarityKind::DotProduct:
      return scale(matmul(queries, transpose(keys)), inv_sqrt_dk);
    case SimilarityKind::Bilinear: {
      const Tensor& form = *bilinear_form;
      if (form.rows() != d_k || form.cols() != d_k) {
        throw DimensionError("raw_scores: bilinear form " + form.shape_str() +
                             " must be square of side " + std::to_string(d_k));
      }
      return scale(matmul(matmul(queries, form), transpose(keys)),
                   inv_sqrt_dk);
    }
    case SimilarityKind::Cosine: {
      Tensor numer = matmul(queries, transpose(keys));
      Tensor denom = matmul(row_l2_norms(queries, eps),
                            transpose(row_l2_norms(keys, eps)));
      return scale(divide(numer, denom), inv_sqrt_dk);
    }
  }
  throw ContractError("raw_scores: unknown similarity kind");
}

ScaledAttentionResult scaled_attention(
    const Tensor& queries, const Tensor& keys, const Tensor& values,
    SimilarityKind kind, const std::optional<Tensor>& bilinear_form,
    double eps) {
  if (values.rows() != keys.rows()) {
    throw DimensionError("scaled_attention: " + std::to_string(keys.rows()) +
                         " key rows vs " + std::to_string(values.rows()) +
                         " value rows");
  }
  Tensor weights =
      softmax_rows(raw_scores(queries, keys, kind, bilinear_form, eps));
  Tensor output = matmul(weights, values);
  return {std::move(output), AttentionWeights{std::move(weights)}};
}

Tensor gate_values(const GDLAttentionParams& params) {
  return sigmoid(params.gate_logits);
}

Tensor gdl_attention(const Tensor& q_in, const Tensor& k_in,
                     const Tensor& v_in, const GDLAttentionParams& params) {
  size_t n_heads = params.heads.size();
  if (n_heads == 0) throw ConfigError("gdl_attention: no heads configured");
  if (params.gate_logits.size() != n_heads) {
    throw DimensionError("gdl_attention: " + std::to_string(n_heads) +
                         " heads vs " +
                         std::to_string(params.gate_logits.size()) +
                         " gate logits");
  }
  size_t d_model = q_in.cols();
  if (k_in.cols() != d_model || v_in.cols() != d_model) {
    throw DimensionError("gdl_attention: input widths disagree, " +
                         q_in.shape_str() + " / " + k_in.shape_str() + " / " +
                         v_in.shape_str());
  }

  Tensor gates = gate_values(params);
  std::vector<Tensor> gated_heads;
  gated_heads.reserve(n_heads);
  for (size_t h = 0; h < n_heads; ++h) {
    const HeadParams& head = params.heads[h];
    if (head.w_q.rows() != d_model || head.w_k.rows() != d_model ||
        head.w_v.rows() != d_model) {
      throw DimensionError(
          "gdl_attention: head " + std::to_string(h) + " projections (" +
          head.w_q.shape_str() + ", " + head.w_k.shape_str() + ", " +
          head.w_v.shape_str() + ") do not accept d_model " +
          std::to_string(d_model));
    }
    ScaledAttentionResult attended = scaled_attention(
        matmul(q_in, head.w_q), matmul(k_in, head.w_k), matmul(v_in, head.w_v),
        params.similarity, head.bilinear_form, kCosineNormEps);
    gated_heads.push_back(scale_by(attended.output, select(gates, h)));
  }

  Tensor merged = concat_cols(gated_heads);
  if (params.w_o.rows() != merged.cols()) {
    throw DimensionError("gdl_attention: concatenated heads " +
                         merged.shape_str() + " vs output projection " +
                         params.w_o.shape_str());
  }
  return matmul(merged, params.w_o);
}

int effective_head_count(const GDLAttentionParams& params, double threshold) {
  if (threshold <= 0.0 || threshold >= 1.0) {
    throw ContractError("effective_head_count: threshold " +
                        std::to_string(threshold) + " outside (0, 1)");
  }
  NoGradGuard off;
  Tensor gates = gate_values(params);
  int count = 0;
  for (size_t h = 0; h < gates.size(); ++h) {
    if (gates.at(h) >= threshold) ++count;
  }
  return count;
}

}  // namespace gdla
