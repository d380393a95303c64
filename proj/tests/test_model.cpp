#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "gdla/model.hpp"
#include "gdla/rng.hpp"
#include "naive_reference.hpp"

using namespace gdla;
using naive::Mat;

namespace {

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

// Whole-model reference: split, embed, one stack of encoder blocks per
// branch, mean-pool, concatenate, classifier head. Mirrors the layer
// definitions with plain loops.
Mat ref_forward(const Mat& window, const ParameterSet& params,
                const TwinModelConfig& config) {
  size_t first_width = (config.n_features + 1) / 2;
  Mat fused(1);
  for (int branch = 1; branch <= 2; ++branch) {
    size_t lo = (config.split == SplitStrategy::Duplicate)
                    ? 0
                    : (branch == 1 ? 0 : first_width);
    size_t hi = (config.split == SplitStrategy::Duplicate)
                    ? config.n_features
                    : (branch == 1 ? first_width : config.n_features);
    Mat xb(window.size());
    for (size_t i = 0; i < window.size(); ++i)
      for (size_t j = lo; j < hi; ++j) xb[i].push_back(window[i][j]);

    std::string bp = "branch" + std::to_string(branch) + ".";
    Mat t = naive::add(
        naive::matmul(xb, naive::to_mat(params.at(bp + "embed.proj"))),
        naive::positional_encoding(config.window_len, config.d_model));

    for (size_t layer = 0; layer < config.n_layers; ++layer) {
      std::string lp = bp + "layer" + std::to_string(layer) + ".";
      std::vector<Mat> wq, wk, wv;
      for (size_t h = 0; h < config.n_heads; ++h) {
        std::string head = lp + "attn.head" + std::to_string(h) + ".";
        wq.push_back(naive::to_mat(params.at(head + "w_q")));
        wk.push_back(naive::to_mat(params.at(head + "w_k")));
        wv.push_back(naive::to_mat(params.at(head + "w_v")));
      }
      Mat attended = naive::gdl(
          t, wq, wk, wv, naive::to_mat(params.at(lp + "attn.w_o")),
          params.at(lp + "attn.gates").values(), kCosineNormEps);
      Mat t1 = naive::layer_norm(naive::add(t, attended),
                                 params.at(lp + "ln1.gain").values(),
                                 params.at(lp + "ln1.bias").values(),
                                 kLayerNormEps);
      Mat hidden = naive::relu(
          naive::matmul(t1, naive::to_mat(params.at(lp + "ff.w1"))));
      Mat ff_out =
          naive::matmul(hidden, naive::to_mat(params.at(lp + "ff.w2")));
      t = naive::layer_norm(naive::add(t1, ff_out),
                            params.at(lp + "ln2.gain").values(),
                            params.at(lp + "ln2.bias").values(),
                            kLayerNormEps);
    }
    Mat pooled = naive::mean_rows(t);
    for (double v : pooled[0]) fused[0].push_back(v);
  }

  Mat logits = naive::matmul(fused, naive::to_mat(params.at("head.w")));
  const std::vector<double>& bias = params.at("head.b").values();
  for (size_t c = 0; c < bias.size(); ++c) logits[0][c] += bias[c];
  return logits;
}

}  // namespace

TEST_CASE("split widths") {
  Rng rng(1);
  Tensor wide = Tensor::random_uniform({3, 52}, -1, 1, rng);
  auto [a, b] = split_input(wide, SplitStrategy::FeatureHalves);
  CHECK(a.cols() == 26);
  CHECK(b.cols() == 26);

  Tensor odd = Tensor::random_uniform({3, 5}, -1, 1, rng);
  auto [c, d] = split_input(odd, SplitStrategy::FeatureHalves);
  CHECK(c.cols() == 3);
  CHECK(d.cols() == 2);

  auto [e, f] = split_input(odd, SplitStrategy::Duplicate);
  CHECK(e.values() == odd.values());
  CHECK(f.values() == odd.values());

  Tensor single = Tensor::random_uniform({3, 1}, -1, 1, rng);
  CHECK_THROWS_AS(split_input(single, SplitStrategy::FeatureHalves),
                  ConfigError);
}

TEST_CASE("embed adds the positional table to the projection") {
  Tensor zero_in = Tensor::zeros({3, 2});
  Rng rng(2);
  Tensor proj = Tensor::random_uniform({2, 4}, -1, 1, rng);
  Tensor embedded = embed(zero_in, proj);
  Tensor pe = positional_encoding(3, 4);
  for (size_t i = 0; i < embedded.size(); ++i)
    CHECK(embedded.at(i) == pe.at(i));

  // Single-position window gets the position-0 row: sin 0 / cos 0 pattern.
  Tensor one_row = embed(Tensor::zeros({1, 2}), proj);
  CHECK(one_row.at(0, 0) == 0.0);
  CHECK(one_row.at(0, 1) == 1.0);
  CHECK(one_row.at(0, 2) == 0.0);
  CHECK(one_row.at(0, 3) == 1.0);

  // Hand case: identity projection keeps the inputs and adds the table.
  Tensor x = Tensor::from_rows({{1.5, -2.0}, {0.25, 4.0}});
  Tensor out = embed(x, Tensor::identity(2));
  Tensor pe2 = positional_encoding(2, 2);
  for (size_t i = 0; i < 2; ++i)
    for (size_t j = 0; j < 2; ++j)
      CHECK(out.at(i, j) == doctest::Approx(x.at(i, j) + pe2.at(i, j)));
}

TEST_CASE("encoder block with silenced sublayers is a double layer norm") {
  TwinModelConfig config = tiny_config();
  ParameterSet params = init_params(config, 3);
  params.assign("branch1.layer0.attn.gates",
                Tensor::full({config.n_heads}, -1e3));
  params.assign("branch1.layer0.ff.w2",
                Tensor::zeros({config.d_ff, config.d_model}));
  EncoderBlockParams block = block_params(params, config, 1, 0);

  Rng rng(4);
  Tensor t = Tensor::random_uniform({4, config.d_model}, -1, 1, rng);
  Tensor out = encoder_block(t, block);

  Tensor expected = layer_norm(
      layer_norm(t, block.ln1_gain, block.ln1_bias, kLayerNormEps),
      block.ln2_gain, block.ln2_bias, kLayerNormEps);
  for (size_t i = 0; i < out.size(); ++i)
    CHECK(out.at(i) == doctest::Approx(expected.at(i)).epsilon(1e-12));
}

TEST_CASE("encoder block keeps single-row windows at shape 1 x d_model") {
  TwinModelConfig config = tiny_config();
  config.window_len = 1;
  ParameterSet params = init_params(config, 5);
  Rng rng(6);
  Tensor t = Tensor::random_uniform({1, config.d_model}, -1, 1, rng);
  Tensor out = encoder_block(t, block_params(params, config, 2, 0));
  CHECK(out.shape() == std::vector<size_t>{1, config.d_model});
}

TEST_CASE("encoder block matches the straight-line reference") {
  TwinModelConfig config = tiny_config();
  config.d_model = 4;
  config.n_heads = 1;
  ParameterSet params = init_params(config, 0);
  // Generic gate value rather than the half-open initialization.
  params.assign("branch1.layer0.attn.gates", Tensor({1}, {0.37}));
  EncoderBlockParams block = block_params(params, config, 1, 0);

  Rng rng(0);
  Tensor t = Tensor::random_uniform({4, 4}, -1, 1, rng);

  std::string lp = "branch1.layer0.";
  Mat attended = naive::gdl(
      naive::to_mat(t), {naive::to_mat(params.at(lp + "attn.head0.w_q"))},
      {naive::to_mat(params.at(lp + "attn.head0.w_k"))},
      {naive::to_mat(params.at(lp + "attn.head0.w_v"))},
      naive::to_mat(params.at(lp + "attn.w_o")),
      params.at(lp + "attn.gates").values(), kCosineNormEps);
  Mat t1 = naive::layer_norm(naive::add(naive::to_mat(t), attended),
                             params.at(lp + "ln1.gain").values(),
                             params.at(lp + "ln1.bias").values(),
                             kLayerNormEps);
  Mat ff = naive::matmul(
      naive::relu(naive::matmul(t1, naive::to_mat(params.at(lp + "ff.w1")))),
      naive::to_mat(params.at(lp + "ff.w2")));
  Mat expected = naive::layer_norm(naive::add(t1, ff),
                                   params.at(lp + "ln2.gain").values(),
                                   params.at(lp + "ln2.bias").values(),
                                   kLayerNormEps);

  CHECK(naive::max_abs_diff(encoder_block(t, block), expected) < 1e-12);
}

TEST_CASE("forward matches the whole-model reference") {
  TwinModelConfig config = tiny_config();
  ParameterSet params = init_params(config, 0);
  Rng rng(0);
  Tensor window = Tensor::random_uniform(
      {config.window_len, config.n_features}, -1, 1, rng);
  Tensor logits = forward(window, params, config);
  Mat expected = ref_forward(naive::to_mat(window), params, config);
  CHECK(logits.shape() == std::vector<size_t>{1, config.n_classes});
  CHECK(naive::max_abs_diff(logits, expected) < 1e-12);

  // predict follows the same logits.
  int best = 0;
  for (size_t c = 1; c < config.n_classes; ++c)
    if (expected[0][c] > expected[0][static_cast<size_t>(best)])
      best = static_cast<int>(c);
  CHECK(predict(window, params, config) == best);
}

TEST_CASE("duplicate split with copied branch parameters is symmetric") {
  TwinModelConfig config = tiny_config();
  config.split = SplitStrategy::Duplicate;
  ParameterSet params = init_params(config, 9);
  // Copy branch 1 onto branch 2 so both branches compute the same map.
  ParameterSet source = params;
  for (const auto& [name, tensor] : source) {
    if (name.rfind("branch1.", 0) == 0) {
      params.assign("branch2." + name.substr(8), tensor);
    }
  }
  Rng rng(10);
  Tensor window = Tensor::random_uniform(
      {config.window_len, config.n_features}, -1, 1, rng);
  Tensor logits = forward(window, params, config);

  // Both pooled vectors are equal, so the logits equal the head applied to
  // a duplicated vector.
  NoGradGuard off;
  Tensor x = embed(window, params.at("branch1.embed.proj"));
  x = encoder_block(x, block_params(params, config, 1, 0));
  Tensor pooled = mean_rows(x);
  Tensor fused = concat_cols({pooled, pooled});
  Tensor expected =
      add_rowvec(matmul(fused, params.at("head.w")), params.at("head.b"));
  for (size_t i = 0; i < logits.size(); ++i)
    CHECK(logits.at(i) == doctest::Approx(expected.at(i)).epsilon(1e-14));
}

TEST_CASE("zero head weights reduce the logits to the bias") {
  TwinModelConfig config = tiny_config();
  ParameterSet params = init_params(config, 1);
  params.assign("head.w",
                Tensor::zeros({2 * config.d_model, config.n_classes}));
  params.assign("head.b", Tensor({3}, {0.5, -1.0, 2.0}));
  Rng rng(2);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor window = Tensor::random_uniform(
        {config.window_len, config.n_features}, -1, 1, rng);
    Tensor logits = forward(window, params, config);
    CHECK(logits.at(0) == 0.5);
    CHECK(logits.at(1) == -1.0);
    CHECK(logits.at(2) == 2.0);
    CHECK(predict(window, params, config) == 2);
  }
}

TEST_CASE("predict breaks ties toward the lowest class") {
  TwinModelConfig config = tiny_config();
  ParameterSet params = init_params(config, 1);
  params.assign("head.w",
                Tensor::zeros({2 * config.d_model, config.n_classes}));
  params.assign("head.b", Tensor::zeros({config.n_classes}));
  Rng rng(3);
  Tensor window = Tensor::random_uniform(
      {config.window_len, config.n_features}, -1, 1, rng);
  CHECK(predict(window, params, config) == 0);

  params.assign("head.b", Tensor({3}, {0.1, 0.9, 0.3}));
  CHECK(predict(window, params, config) == 1);
}

TEST_CASE("argmax is invariant under positive scaling of the head") {
  TwinModelConfig config = tiny_config();
  ParameterSet params = init_params(config, 11);
  Rng rng(12);
  Tensor window = Tensor::random_uniform(
      {config.window_len, config.n_features}, -1, 1, rng);
  int base = predict(window, params, config);
  for (double factor : {0.01, 7.0, 1e3}) {
    ParameterSet scaled = params;
    scaled.assign("head.w", scale(params.at("head.w"), factor));
    scaled.assign("head.b", scale(params.at("head.b"), factor));
    CHECK(predict(window, scaled, config) == base);
  }
}

TEST_CASE("forward is bitwise deterministic") {
  TwinModelConfig config = tiny_config();
  ParameterSet params = init_params(config, 21);
  Rng rng(22);
  Tensor window = Tensor::random_uniform(
      {config.window_len, config.n_features}, -1, 1, rng);
  Tensor a = forward(window, params, config);
  Tensor b = forward(window, params, config);
  for (size_t i = 0; i < a.size(); ++i) CHECK(a.at(i) == b.at(i));
}

TEST_CASE("gradient check passes on the full tiny model") {
  TwinModelConfig config = tiny_config();
  ParameterSet params = init_params(config, 0);
  Rng rng(1);
  Tensor window = Tensor::random_uniform(
      {config.window_len, config.n_features}, -1, 1, rng);
  auto f = [&](const ParameterSet& p) {
    return cross_entropy(forward(window, p, config), {1});
  };
  GradReport rep = finite_diff_check(f, params, 1e-5, 1e-4);
  CHECK(rep.pass);
  CHECK(rep.per_param_max_rel_error.size() == params.size());
}

TEST_CASE("a silenced second branch leaves branch one trainable") {
  TwinModelConfig config = tiny_config();
  config.split = SplitStrategy::Duplicate;
  ParameterSet params = init_params(config, 31);
  params.assign("branch2.layer0.attn.gates",
                Tensor::full({config.n_heads}, -1e3));
  params.assign("branch2.layer0.ff.w2",
                Tensor::zeros({config.d_ff, config.d_model}));

  Rng rng(32);
  Tensor window = Tensor::random_uniform(
      {config.window_len, config.n_features}, -1, 1, rng);
  Tensor logits = forward(window, params, config);
  for (double v : logits.values()) CHECK(std::isfinite(v));

  auto f = [&](const ParameterSet& p) {
    return cross_entropy(forward(window, p, config), {0});
  };
  GradReport rep = finite_diff_check(f, params, 1e-5, 1e-4);
  CHECK(rep.pass);

  new_graph();
  auto grads = backward(f(params), params);
  double branch1_grad = 0.0;
  for (const auto& [name, grad] : grads) {
    if (name.rfind("branch1.", 0) == 0) {
      for (double v : grad.values()) branch1_grad += std::abs(v);
    }
  }
  CHECK(branch1_grad > 1e-6);
}

TEST_CASE("mean pooling is invariant to row permutation of the block") {
  TwinModelConfig config = tiny_config();
  ParameterSet params = init_params(config, 41);
  EncoderBlockParams block = block_params(params, config, 1, 0);
  Rng rng(42);
  Tensor t = Tensor::random_uniform({4, config.d_model}, -1, 1, rng);

  std::vector<size_t> perm = {3, 1, 0, 2};
  std::vector<std::vector<double>> rows;
  for (size_t i : perm) {
    std::vector<double> row;
    for (size_t j = 0; j < t.cols(); ++j) row.push_back(t.at(i, j));
    rows.push_back(row);
  }
  Tensor permuted = Tensor::from_rows(rows);

  Tensor pooled = mean_rows(encoder_block(t, block));
  Tensor pooled_p = mean_rows(encoder_block(permuted, block));
  for (size_t j = 0; j < pooled.size(); ++j)
    CHECK(std::abs(pooled.at(j) - pooled_p.at(j)) < 1e-12);
}

TEST_CASE("init is deterministic and gate logits start at zero") {
  TwinModelConfig config = tiny_config();
  ParameterSet a = init_params(config, 7);
  ParameterSet b = init_params(config, 7);
  auto it = a.begin();
  auto jt = b.begin();
  for (; it != a.end(); ++it, ++jt) {
    CHECK(it->first == jt->first);
    CHECK(it->second.values() == jt->second.values());
  }
  for (size_t h = 0; h < config.n_heads; ++h)
    CHECK(a.at("branch1.layer0.attn.gates").at(h) == 0.0);
  CHECK_FALSE(a.contains("branch1.layer0.attn.head0.w_bl"));

  config.similarity = SimilarityKind::Bilinear;
  ParameterSet bilinear = init_params(config, 7);
  CHECK(bilinear.contains("branch1.layer0.attn.head0.w_bl"));
}

TEST_CASE("model config document round trip and validation") {
  TwinModelConfig config = tiny_config();
  config.similarity = SimilarityKind::Bilinear;
  config.split = SplitStrategy::Duplicate;
  TwinModelConfig parsed = parse_model_config(format_model_config(config));
  CHECK(parsed.n_features == config.n_features);
  CHECK(parsed.window_len == config.window_len);
  CHECK(parsed.d_model == config.d_model);
  CHECK(parsed.similarity == SimilarityKind::Bilinear);
  CHECK(parsed.split == SplitStrategy::Duplicate);
  CHECK(parsed.head_dim_k() == config.head_dim_k());

  CHECK_THROWS_AS(parse_model_config("n_features = 6\nbogus_key = 1\n"),
                  ConfigError);
  CHECK_THROWS_AS(parse_model_config("n_features = 6\n"), ConfigError);
  CHECK_THROWS_AS(
      parse_model_config(format_model_config(config) + "n_features = 9\n"),
      ConfigError);

  std::string halves = format_model_config(tiny_config());
  size_t pos = halves.find("n_features = 6");
  halves.replace(pos, 14, "n_features = 1");
  CHECK_THROWS_AS(parse_model_config(halves), ConfigError);
}

TEST_CASE("attention layer names cover both branches in order") {
  TwinModelConfig config = tiny_config();
  config.n_layers = 2;
  std::vector<std::string> names = attention_layer_names(config);
  CHECK(names == std::vector<std::string>{"branch1.layer0", "branch1.layer1",
                                          "branch2.layer0", "branch2.layer1"});
}
