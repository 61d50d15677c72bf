#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ntk/common.hpp"
#include "ntk/rng.hpp"
#include "ntk/toymodel.hpp"
#include "reference_model.hpp"

using namespace ntk;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 7;
  c.d_model = 4;
  c.n_heads = 1;
  c.d_ffn = 6;
  c.max_seq_len = 3;
  c.n_classes = 3;
  return c;
}

Batch tiny_batch(const ModelConfig& cfg, std::uint64_t seed, Head head) {
  Rng rng(seed, "batch");
  Batch b;
  b.batch = 2;
  b.seq = cfg.max_seq_len;
  for (std::int64_t i = 0; i < b.batch * b.seq; ++i) {
    b.tokens.push_back(static_cast<std::int32_t>(rng.below(
        static_cast<std::uint64_t>(cfg.vocab_size))));
    b.mask.push_back(1);
  }
  b.mask[static_cast<std::size_t>(b.seq)] = 0;  // row 1, position 0 padded
  if (head == Head::CLS) {
    for (std::int64_t i = 0; i < b.batch; ++i)
      b.cls_labels.push_back(static_cast<std::int32_t>(rng.below(
          static_cast<std::uint64_t>(cfg.n_classes))));
  } else {
    b.mlm_targets.assign(static_cast<std::size_t>(b.batch * b.seq), -1);
    b.mlm_targets[1] = 2;
    b.mlm_targets[static_cast<std::size_t>(b.seq) + 1] = 4;
  }
  return b;
}

double max_rel_error(const ParamTensor& analytic, const ParamTensor& fd) {
  double scale = 0.0;
  for (double v : analytic.data) scale = std::max(scale, std::abs(v));
  for (double v : fd.data) scale = std::max(scale, std::abs(v));
  if (scale == 0.0) {
    for (double v : fd.data)
      if (std::abs(v) > 1e-7) return 1.0;  // fd noise where the graph says zero
    return 0.0;
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.data.size(); ++i)
    worst = std::max(worst, std::abs(analytic.data[i] - fd.data[i]) / scale);
  return worst;
}

}  // namespace

TEST_CASE("init honors the profile and the fixed constants") {
  ModelConfig cfg;
  cfg.vocab_size = 200;
  cfg.d_model = 64;
  cfg.n_heads = 4;
  cfg.d_ffn = 32;
  cfg.max_seq_len = 8;
  cfg.n_classes = 2;
  cfg.init_profile = {{"embeddings", 0.5}, {"attention", 0.08}, {"ffn", 0.02}, {"heads", 0.05}};
  ModelParams p = init_params(cfg, 5);

  for (double v : p.at(kTypeEmbedding).data) CHECK(v == 0.0);
  for (double v : p.at(kLn1Gain).data) CHECK(v == 1.0);
  for (double v : p.at(kLn2Gain).data) CHECK(v == 1.0);
  for (double v : p.at(kLn1Bias).data) CHECK(v == 0.0);

  // embed_tokens: 200*64 = 12800 draws at profile std 0.5
  const auto& e = p.at(kEmbedTokens).data;
  double sum = 0.0, sumsq = 0.0;
  for (double v : e) {
    sum += v;
    sumsq += v * v;
  }
  const double mean = sum / static_cast<double>(e.size());
  const double stddev = std::sqrt(sumsq / static_cast<double>(e.size()) - mean * mean);
  CHECK(std::abs(stddev - 0.5) / 0.5 < 0.05);

  ModelParams p2 = init_params(cfg, 5);
  CHECK(p.at(kEmbedTokens).data == p2.at(kEmbedTokens).data);

  ModelConfig bad = cfg;
  bad.n_heads = 5;
  CHECK_THROWS_AS(init_params(bad, 1), ValidationError);
}

TEST_CASE("forward matches the independent loop-based reference") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, seed);
    for (Head head : {Head::CLS, Head::MLM}) {
      Batch b = tiny_batch(cfg, seed + 10, head);
      ForwardResult got = forward(p, b, head);
      for (std::int64_t ex = 0; ex < b.batch; ++ex) {
        std::vector<std::int32_t> tokens(b.tokens.begin() + ex * b.seq,
                                         b.tokens.begin() + (ex + 1) * b.seq);
        std::vector<std::uint8_t> mask(b.mask.begin() + ex * b.seq,
                                       b.mask.begin() + (ex + 1) * b.seq);
        const std::vector<double> expected = refmodel::logits(p, tokens, mask, head);
        const std::size_t stride = head == Head::CLS
                                       ? static_cast<std::size_t>(cfg.n_classes)
                                       : static_cast<std::size_t>(b.seq * cfg.vocab_size);
        for (std::size_t i = 0; i < expected.size(); ++i) {
          const double g = got.logits[static_cast<std::size_t>(ex) * stride + i];
          const double denom = std::max({std::abs(expected[i]), std::abs(g), 1e-30});
          CHECK(std::abs(g - expected[i]) / denom < 1e-10);
        }
      }
    }
  }
}

TEST_CASE("tokens under a zero attention mask cannot move the logits") {
  ModelConfig cfg = tiny_config();
  ModelParams p = init_params(cfg, 9);
  for (Head head : {Head::CLS, Head::MLM}) {
    Batch b = tiny_batch(cfg, 4, head);
    // mask everything in row 0 except position 0
    b.mask[0] = 1;
    b.mask[1] = 0;
    b.mask[2] = 0;
    if (head == Head::MLM) {
      b.mlm_targets.assign(b.mlm_targets.size(), -1);
      b.mlm_targets[0] = 1;
    }
    ForwardResult before = forward(p, b, head);
    Batch altered = b;
    altered.tokens[1] = (altered.tokens[1] + 1) % static_cast<std::int32_t>(cfg.vocab_size);
    altered.tokens[2] = (altered.tokens[2] + 3) % static_cast<std::int32_t>(cfg.vocab_size);
    ForwardResult after = forward(p, altered, head);
    CHECK(before.logits == after.logits);
  }
}

TEST_CASE("zero classifier head gives identically zero logits") {
  ModelConfig cfg = tiny_config();
  ModelParams p = init_params(cfg, 2);
  for (auto& v : p.at(kClsHead).data) v = 0.0;
  Batch b = tiny_batch(cfg, 5, Head::CLS);
  ForwardResult out = forward(p, b, Head::CLS);
  for (double v : out.logits) CHECK(v == 0.0);
}

TEST_CASE("uniform logits price the loss at ln(n_classes)") {
  ModelConfig cfg = tiny_config();
  cfg.n_classes = 4;
  ModelParams p = init_params(cfg, 3);
  for (auto& v : p.at(kClsHead).data) v = 0.0;
  Batch b = tiny_batch(cfg, 6, Head::CLS);
  b.cls_labels = {1, 3};
  LossAndGrads lg = loss_and_backward(p, b, Head::CLS);
  CHECK(lg.loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("tensors outside the active head get exactly zero gradient") {
  ModelConfig cfg = tiny_config();
  ModelParams p = init_params(cfg, 7);
  Batch b = tiny_batch(cfg, 8, Head::CLS);
  LossAndGrads lg = loss_and_backward(p, b, Head::CLS);
  for (double v : lg.grads.at(kMlmHead).data) CHECK(v == 0.0);

  Batch bm = tiny_batch(cfg, 8, Head::MLM);
  LossAndGrads lgm = loss_and_backward(p, bm, Head::MLM);
  for (double v : lgm.grads.at(kClsHead).data) CHECK(v == 0.0);
}

TEST_CASE("analytic gradients agree with central finite differences") {
  ModelConfig cfg = tiny_config();
  ModelParams p = init_params(cfg, 11);
  const double eps = 1e-4;
  for (Head head : {Head::CLS, Head::MLM}) {
    Batch b = tiny_batch(cfg, 12, head);
    LossAndGrads lg = loss_and_backward(p, b, head);
    Gradients fd = zero_gradients_like(p);
    for (std::size_t ti = 0; ti < p.tensors.size(); ++ti) {
      for (std::size_t i = 0; i < p.tensors[ti].data.size(); ++i) {
        const double saved = p.tensors[ti].data[i];
        p.tensors[ti].data[i] = saved + eps;
        const double up = loss_and_backward(p, b, head).loss;
        p.tensors[ti].data[i] = saved - eps;
        const double down = loss_and_backward(p, b, head).loss;
        p.tensors[ti].data[i] = saved;
        fd.tensors[ti].data[i] = (up - down) / (2.0 * eps);
      }
      const double err = max_rel_error(lg.grads.tensors[ti], fd.tensors[ti]);
      INFO("tensor ", p.tensors[ti].name);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("forward and backward are bit-deterministic") {
  ModelConfig cfg = tiny_config();
  ModelParams p = init_params(cfg, 21);
  Batch b = tiny_batch(cfg, 22, Head::CLS);
  ForwardResult f1 = forward(p, b, Head::CLS);
  ForwardResult f2 = forward(p, b, Head::CLS);
  CHECK(f1.logits == f2.logits);
  LossAndGrads g1 = loss_and_backward(p, b, Head::CLS);
  LossAndGrads g2 = loss_and_backward(p, b, Head::CLS);
  CHECK(g1.loss == g2.loss);
  for (std::size_t ti = 0; ti < g1.grads.tensors.size(); ++ti)
    CHECK(g1.grads.tensors[ti].data == g2.grads.tensors[ti].data);
}

TEST_CASE("checkpoint conversion round trips and validates") {
  ModelConfig cfg = tiny_config();
  ModelParams p = init_params(cfg, 31);
  Checkpoint ckpt = params_to_checkpoint(p);
  CHECK(ckpt.tensors.size() == kParamCount);
  for (int id = 0; id < kParamCount; ++id) CHECK(ckpt.tensors[static_cast<std::size_t>(id)].name == kParamNames[id]);

  ModelParams back = checkpoint_to_params(ckpt, cfg);
  for (std::size_t ti = 0; ti < p.tensors.size(); ++ti)
    CHECK(p.tensors[ti].data == back.tensors[ti].data);

  Checkpoint missing = ckpt;
  missing.tensors.erase(missing.tensors.begin() + kAttnQ);
  try {
    checkpoint_to_params(missing, cfg);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("attn_q") != std::string::npos);
  }

  Checkpoint transposed = ckpt;
  auto& ffn1 = *transposed.find("ffn1");
  std::swap(ffn1.shape[0], ffn1.shape[1]);
  try {
    checkpoint_to_params(transposed, cfg);
    FAIL("expected a shape error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("ffn1") != std::string::npos);
  }
}

TEST_CASE("parameter groups cover the fifteen tensors") {
  CHECK(group_of_tensor("embed_tokens") == "embeddings");
  CHECK(group_of_tensor("type_embedding") == "embeddings");
  CHECK(group_of_tensor("attn_v") == "attention");
  CHECK(group_of_tensor("ffn2") == "ffn");
  CHECK(group_of_tensor("ln2_bias") == "layernorm");
  CHECK(group_of_tensor("mlm_head") == "heads");
  CHECK(group_of_tensor("cls_head") == "heads");
}
