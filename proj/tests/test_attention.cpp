#include <cmath>
#include <vector>

#include "doctest.h"
#include "gdla/attention.hpp"
#include "gdla/params.hpp"
#include "gdla/rng.hpp"
#include "naive_reference.hpp"

using namespace gdla;
using naive::Mat;
using naive::max_abs_diff;
using naive::to_mat;

namespace {

Tensor random_tensor(std::vector<size_t> shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
  return Tensor::random_uniform(std::move(shape), lo, hi, rng);
}

}  // namespace

TEST_CASE("raw scores: cosine of identical and orthogonal unit rows") {
  Tensor e0 = Tensor::from_rows({{1, 0, 0, 0}});
  Tensor e1 = Tensor::from_rows({{0, 1, 0, 0}});
  Tensor same = raw_scores(e0, e0, SimilarityKind::Cosine, std::nullopt, 1e-12);
  CHECK(same.at(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
  Tensor ortho = raw_scores(e0, e1, SimilarityKind::Cosine, std::nullopt, 1e-12);
  CHECK(std::abs(ortho.at(0, 0)) < 1e-15);
}

TEST_CASE("raw scores: dot product hand value") {
  Tensor q = Tensor::from_rows({{1, 2}});
  Tensor k = Tensor::from_rows({{3, 4}});
  Tensor s = raw_scores(q, k, SimilarityKind::DotProduct, std::nullopt, 1e-12);
  CHECK(s.at(0, 0) == doctest::Approx(11.0 / std::sqrt(2.0)).epsilon(1e-14));
}

TEST_CASE("raw scores: bilinear form equals dot product through the form") {
  Rng rng(4);
  Tensor q = random_tensor({2, 3}, rng);
  Tensor k = random_tensor({4, 3}, rng);
  Tensor identity_form = Tensor::identity(3);
  Tensor bilinear =
      raw_scores(q, k, SimilarityKind::Bilinear, identity_form, 1e-12);
  Tensor dot = raw_scores(q, k, SimilarityKind::DotProduct, std::nullopt, 1e-12);
  for (size_t i = 0; i < bilinear.size(); ++i)
    CHECK(bilinear.at(i) == doctest::Approx(dot.at(i)).epsilon(1e-12));
}

TEST_CASE("raw scores: bilinear form configuration errors") {
  Tensor q = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(
      raw_scores(q, q, SimilarityKind::Bilinear, std::nullopt, 1e-12),
      ConfigError);
  CHECK_THROWS_AS(raw_scores(q, q, SimilarityKind::Cosine,
                             Tensor::identity(3), 1e-12),
                  ConfigError);
  CHECK_THROWS_AS(raw_scores(q, q, SimilarityKind::Bilinear,
                             Tensor::identity(2), 1e-12),
                  DimensionError);
}

TEST_CASE("scaled attention: single key row gives weight one") {
  Rng rng(9);
  for (SimilarityKind kind : {SimilarityKind::DotProduct,
                              SimilarityKind::Bilinear, SimilarityKind::Cosine}) {
    std::optional<Tensor> form;
    if (kind == SimilarityKind::Bilinear) form = random_tensor({3, 3}, rng);
    Tensor q = random_tensor({2, 3}, rng);
    Tensor k = random_tensor({1, 3}, rng);
    Tensor v = random_tensor({1, 4}, rng);
    auto [output, weights] = scaled_attention(q, k, v, kind, form, 1e-12);
    CHECK(weights.matrix.at(0, 0) == 1.0);
    CHECK(weights.matrix.at(1, 0) == 1.0);
    for (size_t j = 0; j < 4; ++j) {
      CHECK(output.at(0, j) == doctest::Approx(v.at(0, j)).epsilon(1e-14));
    }
  }
}

TEST_CASE("scaled attention: uniform scores average the value rows") {
  Tensor q = Tensor::zeros({1, 3});
  Rng rng(2);
  Tensor k = random_tensor({4, 3}, rng);
  Tensor v = Tensor::identity(4);
  auto [output, weights] =
      scaled_attention(q, k, v, SimilarityKind::DotProduct, std::nullopt, 1e-12);
  for (size_t j = 0; j < 4; ++j)
    CHECK(output.at(0, j) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("scaled attention: 2x2 cosine case against the reference") {
  Tensor q = Tensor::from_rows({{0.4, -1.2}, {2.0, 0.3}});
  Tensor k = Tensor::from_rows({{-0.5, 0.7}, {1.1, 1.9}});
  Tensor v = Tensor::from_rows({{3.0, -1.0}, {0.5, 2.5}});
  auto [output, weights] =
      scaled_attention(q, k, v, SimilarityKind::Cosine, std::nullopt, 1e-12);
  Mat expected = naive::cosine_attention(to_mat(q), to_mat(k), to_mat(v), 1e-12);
  CHECK(max_abs_diff(output, expected) < 1e-14);
  Mat expected_weights = naive::cosine_weights(to_mat(q), to_mat(k), 1e-12);
  CHECK(max_abs_diff(weights.matrix, expected_weights) < 1e-14);
}

TEST_CASE("scaled attention: key/value row count mismatch") {
  Tensor q = Tensor::zeros({2, 3});
  Tensor k = Tensor::zeros({4, 3});
  Tensor v = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(
      scaled_attention(q, k, v, SimilarityKind::DotProduct, std::nullopt, 1e-12),
      DimensionError);
}

namespace {

GDLAttentionParams make_params(size_t h_count, size_t d_model, size_t d_k,
                               size_t d_v, Rng& rng,
                               SimilarityKind kind = SimilarityKind::Cosine) {
  GDLAttentionParams params;
  params.similarity = kind;
  for (size_t h = 0; h < h_count; ++h) {
    HeadParams head;
    head.w_q = random_tensor({d_model, d_k}, rng);
    head.w_k = random_tensor({d_model, d_k}, rng);
    head.w_v = random_tensor({d_model, d_v}, rng);
    if (kind == SimilarityKind::Bilinear)
      head.bilinear_form = random_tensor({d_k, d_k}, rng);
    params.heads.push_back(std::move(head));
  }
  params.w_o = random_tensor({h_count * d_v, d_model}, rng);
  params.gate_logits = random_tensor({h_count}, rng);
  return params;
}

}  // namespace

TEST_CASE("gate values") {
  Rng rng(1);
  GDLAttentionParams params = make_params(4, 4, 2, 2, rng);
  params.gate_logits = Tensor::zeros({4});
  Tensor g = gate_values(params);
  for (size_t h = 0; h < 4; ++h) CHECK(g.at(h) == 0.5);

  params.gate_logits = Tensor({4}, {-40, -40, -40, -40});
  g = gate_values(params);
  for (size_t h = 0; h < 4; ++h) CHECK(std::abs(g.at(h)) < 1e-15);

  params.gate_logits = Tensor({4}, {std::log(3.0), 0, 0, 0});
  CHECK(gate_values(params).at(0) == doctest::Approx(0.75).epsilon(1e-14));
}

TEST_CASE("closed gates zero the output") {
  Rng rng(12);
  GDLAttentionParams params = make_params(3, 4, 2, 2, rng);
  params.gate_logits = Tensor::full({3}, -1e3);
  Tensor x = random_tensor({5, 4}, rng);
  Tensor out = gdl_attention(x, x, x, params);
  for (double v : out.values()) CHECK(std::abs(v) < 1e-6);
}

TEST_CASE("a fully open single head matches the ungated path") {
  Rng rng(13);
  GDLAttentionParams params = make_params(1, 4, 2, 3, rng);
  params.gate_logits = Tensor({1}, {40.0});
  Tensor x = random_tensor({4, 4}, rng);
  Tensor gated = gdl_attention(x, x, x, params);

  const HeadParams& head = params.heads[0];
  auto [plain, weights] = scaled_attention(
      matmul(x, head.w_q), matmul(x, head.w_k), matmul(x, head.w_v),
      SimilarityKind::Cosine, std::nullopt, kCosineNormEps);
  Tensor ungated = matmul(plain, params.w_o);
  for (size_t i = 0; i < gated.size(); ++i)
    CHECK(std::abs(gated.at(i) - ungated.at(i)) < 1e-9);
}

TEST_CASE("gdl attention matches the straight-line reference") {
  Rng rng(0);
  size_t h_count = 2, d_model = 4, d_k = 2, d_v = 2;
  GDLAttentionParams params = make_params(h_count, d_model, d_k, d_v, rng);
  Tensor x = random_tensor({3, d_model}, rng);

  std::vector<Mat> wq, wk, wv;
  for (const HeadParams& head : params.heads) {
    wq.push_back(to_mat(head.w_q));
    wk.push_back(to_mat(head.w_k));
    wv.push_back(to_mat(head.w_v));
  }
  std::vector<double> logits(params.gate_logits.values());
  Mat expected = naive::gdl(to_mat(x), wq, wk, wv, to_mat(params.w_o), logits,
                         kCosineNormEps);
  Tensor out = gdl_attention(x, x, x, params);
  CHECK(max_abs_diff(out, expected) < 1e-12);
}

TEST_CASE("effective head count") {
  Rng rng(3);
  GDLAttentionParams params = make_params(4, 4, 2, 2, rng);
  params.gate_logits = Tensor::zeros({4});
  CHECK(effective_head_count(params, 0.4) == 4);

  params.gate_logits = Tensor::full({4}, -40.0);
  CHECK(effective_head_count(params, 0.1) == 0);

  GDLAttentionParams three = make_params(3, 4, 2, 2, rng);
  three.gate_logits = Tensor({3}, {-40, 40, 0});
  CHECK(effective_head_count(three, 0.6) == 1);

  CHECK_THROWS_AS(effective_head_count(params, 0.0), ContractError);
  CHECK_THROWS_AS(effective_head_count(params, 1.0), ContractError);
}

TEST_CASE("attention weight rows sum to one for every kind") {
  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    size_t lq = 1 + rng.below(5), lk = 1 + rng.below(5), dk = 1 + rng.below(4);
    for (SimilarityKind kind :
         {SimilarityKind::DotProduct, SimilarityKind::Bilinear,
          SimilarityKind::Cosine}) {
      std::optional<Tensor> form;
      if (kind == SimilarityKind::Bilinear)
        form = random_tensor({dk, dk}, rng);
      Tensor q = random_tensor({lq, dk}, rng, -3, 3);
      Tensor k = random_tensor({lk, dk}, rng, -3, 3);
      Tensor v = random_tensor({lk, 2}, rng);
      auto [output, weights] = scaled_attention(q, k, v, kind, form, 1e-12);
      for (size_t i = 0; i < lq; ++i) {
        double total = 0.0;
        for (size_t j = 0; j < lk; ++j) {
          double w = weights.matrix.at(i, j);
          CHECK(w >= 0.0);
          CHECK(w <= 1.0);
          total += w;
        }
        CHECK(std::abs(total - 1.0) < 1e-9);
      }
    }
  }
}

TEST_CASE("cosine weights are invariant to positive row rescaling") {
  Rng rng(33);
  Tensor q = random_tensor({4, 3}, rng);
  Tensor k = random_tensor({5, 3}, rng);
  Tensor base = softmax_rows(
      raw_scores(q, k, SimilarityKind::Cosine, std::nullopt, 1e-12));

  for (double factor : {1e-3, 1.0, 1e3}) {
    std::vector<double> scaled_rows = q.values();
    for (size_t j = 0; j < 3; ++j) scaled_rows[1 * 3 + j] *= factor;
    Tensor q_scaled({4, 3}, std::move(scaled_rows));
    Tensor weights = softmax_rows(
        raw_scores(q_scaled, k, SimilarityKind::Cosine, std::nullopt, 1e-12));
    for (size_t i = 0; i < weights.size(); ++i)
      CHECK(std::abs(weights.at(i) - base.at(i)) < 1e-9);
  }
}

TEST_CASE("head contribution is linear in its gate") {
  Rng rng(8);
  GDLAttentionParams params = make_params(1, 4, 2, 2, rng);
  Tensor x = random_tensor({3, 4}, rng);

  auto norm_with_gate = [&](double gate) {
    params.gate_logits = Tensor({1}, {std::log(gate / (1.0 - gate))});
    Tensor out = gdl_attention(x, x, x, params);
    double sq = 0.0;
    for (double v : out.values()) sq += v * v;
    return std::sqrt(sq);
  };
  double at_08 = norm_with_gate(0.8);
  double at_04 = norm_with_gate(0.4);
  CHECK(at_08 / at_04 == doctest::Approx(2.0).epsilon(1e-9));

  // Additivity across heads.
  GDLAttentionParams two = make_params(2, 4, 2, 2, rng);
  auto with_logits = [&](double l0, double l1) {
    two.gate_logits = Tensor({2}, {l0, l1});
    return gdl_attention(x, x, x, two);
  };
  Tensor both = with_logits(0.3, -0.7);
  Tensor only0 = with_logits(0.3, -1e3);
  Tensor only1 = with_logits(-1e3, -0.7);
  for (size_t i = 0; i < both.size(); ++i) {
    CHECK(both.at(i) ==
          doctest::Approx(only0.at(i) + only1.at(i)).epsilon(1e-10));
  }
}

TEST_CASE("permuting key/value rows permutes weights and keeps the output") {
  Rng rng(17);
  Tensor q = random_tensor({3, 4}, rng);
  Tensor k = random_tensor({4, 4}, rng);
  Tensor v = random_tensor({4, 2}, rng);
  auto [output, weights] =
      scaled_attention(q, k, v, SimilarityKind::Cosine, std::nullopt, 1e-12);

  std::vector<size_t> perm = {2, 0, 3, 1};
  auto permute_rows = [&](const Tensor& t) {
    std::vector<std::vector<double>> rows;
    for (size_t i : perm) {
      std::vector<double> row;
      for (size_t j = 0; j < t.cols(); ++j) row.push_back(t.at(i, j));
      rows.push_back(row);
    }
    return Tensor::from_rows(rows);
  };
  auto [output_p, weights_p] = scaled_attention(
      q, permute_rows(k), permute_rows(v), SimilarityKind::Cosine,
      std::nullopt, 1e-12);

  for (size_t i = 0; i < output.size(); ++i)
    CHECK(std::abs(output.at(i) - output_p.at(i)) < 1e-12);
  for (size_t i = 0; i < 3; ++i)
    for (size_t j = 0; j < 4; ++j)
      CHECK(weights_p.matrix.at(i, j) ==
            doctest::Approx(weights.matrix.at(i, perm[j])).epsilon(1e-12));
}

TEST_CASE("gradients flow to the gate logits") {
  Rng rng(5);
  size_t d_model = 4, d_k = 2, d_v = 2, h_count = 2;
  ParameterSet params;
  for (size_t h = 0; h < h_count; ++h) {
    std::string prefix = "head" + std::to_string(h) + ".";
    params.insert(prefix + "w_q", random_tensor({d_model, d_k}, rng));
    params.insert(prefix + "w_k", random_tensor({d_model, d_k}, rng));
    params.insert(prefix + "w_v", random_tensor({d_model, d_v}, rng));
  }
  params.insert("w_o", random_tensor({h_count * d_v, d_model}, rng));
  params.insert("gates", random_tensor({h_count}, rng));
  Tensor x = random_tensor({3, d_model}, rng);
  Tensor target = random_tensor({3, d_model}, rng);

  auto f = [&](const ParameterSet& p) {
    GDLAttentionParams attn;
    attn.similarity = SimilarityKind::Cosine;
    for (size_t h = 0; h < h_count; ++h) {
      std::string prefix = "head" + std::to_string(h) + ".";
      HeadParams head;
      head.w_q = p.at(prefix + "w_q");
      head.w_k = p.at(prefix + "w_k");
      head.w_v = p.at(prefix + "w_v");
      attn.heads.push_back(std::move(head));
    }
    attn.w_o = p.at("w_o");
    attn.gate_logits = p.at("gates");
    Tensor diff = sub(gdl_attention(x, x, x, attn), target);
    return sum(mul(diff, diff));
  };

  GradReport rep = finite_diff_check(f, params, 1e-5, 1e-4);
  CHECK(rep.pass);

  new_graph();
  auto grads = backward(f(params), params);
  double gate_grad_norm = 0.0;
  for (size_t h = 0; h < h_count; ++h)
    gate_grad_norm += std::abs(grads.at("gates").at(h));
  CHECK(gate_grad_norm > 1e-8);
}
