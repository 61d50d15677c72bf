#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ntk/tensorstore.hpp"

namespace ntk {

// Single-block transformer encoder sized for desk-scale experiments:
// token/position/type embeddings -> pre-norm multi-head self-attention with
// residual -> pre-norm GELU FFN with residual -> mean-pooled classifier head
// or per-position vocabulary head. All math runs in f64; parameter values are
// kept exactly f32-representable so checkpoint round trips are lossless.
struct ModelConfig {
  std::int64_t vocab_size = 49;
  std::int64_t d_model = 16;
  std::int64_t n_heads = 4;
  std::int64_t d_ffn = 32;
  std::int64_t max_seq_len = 16;
  std::int64_t n_classes = 4;
  // Per-group init std. Deliberately heterogeneous: embeddings sit orders of
  // magnitude above attention/FFN, so the pooled std is dominated by the
  // embedding scale and one global noise scale misfits the small matrices.
  std::map<std::string, double> init_profile = {
      {"embeddings", 2.5}, {"attention", 0.08}, {"ffn", 0.02}, {"heads", 0.05}};

  std::int64_t head_dim() const { return d_model / n_heads; }
  void validate() const;
};

struct ParamTensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

enum ParamId : int {
  kEmbedTokens = 0,
  kEmbedPos,
  kTypeEmbedding,
  kAttnQ,
  kAttnK,
  kAttnV,
  kAttnO,
  kFfn1,
  kFfn2,
  kLn1Gain,
  kLn1Bias,
  kLn2Gain,
  kLn2Bias,
  kMlmHead,
  kClsHead,
  kParamCount
};

extern const char* const kParamNames[kParamCount];

// Parameter group for init profiles and L1-norm bookkeeping:
// embeddings | attention | ffn | layernorm | heads.
std::string_view group_of_tensor(std::string_view name);
extern const char* const kParamGroups[5];

struct ModelParams {
  ModelConfig config;
  std::vector<ParamTensor> tensors;  // kParamCount entries, fixed order

  ParamTensor& at(ParamId id) { return tensors[static_cast<std::size_t>(id)]; }
  const ParamTensor& at(ParamId id) const { return tensors[static_cast<std::size_t>(id)]; }
};

struct Gradients {
  std::vector<ParamTensor> tensors;

  ParamTensor& at(ParamId id) { return tensors[static_cast<std::size_t>(id)]; }
  const ParamTensor& at(ParamId id) const { return tensors[static_cast<std::size_t>(id)]; }
};

Gradients zero_gradients_like(const ModelParams& params);

struct Batch {
  std::int64_t batch = 0;
  std::int64_t seq = 0;
  std::vector<std::int32_t> tokens;       // [batch*seq]
  std::vector<std::uint8_t> mask;         // [batch*seq], 1 = real position
  std::vector<std::int32_t> cls_labels;   // [batch] when classifying
  std::vector<std::int32_t> mlm_targets;  // [batch*seq], -1 = unlabeled

  void validate(const ModelConfig& config) const;
};

enum class Head { MLM, CLS };

struct ForwardCache {
  std::int64_t rows = 0;  // batch * seq
  std::vector<double> x0, ln1_xhat, ln1_rstd, h1;
  std::vector<double> q, k, v, probs, ctx, attn_out, x1;
  std::vector<double> ln2_xhat, ln2_rstd, h2;
  std::vector<double> f1, gelu_f1, f2, x2;
  std::vector<double> pooled;        // CLS only, [batch*d_model]
  std::vector<double> pool_count;    // CLS only, [batch]
};

struct ForwardResult {
  // CLS: [batch, n_classes]. MLM: [batch*seq, vocab] with fully masked
  // positions zeroed, so logits are bit-invariant to token ids under the mask.
  std::vector<double> logits;
  ForwardCache cache;
};

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

ForwardResult forward(const ModelParams& params, const Batch& batch, Head head);

struct LossAndGrads {
  double loss = 0.0;
  Gradients grads;
};

// Mean cross-entropy over labeled positions plus exact analytic gradients for
// every parameter tensor.
LossAndGrads loss_and_backward(const ModelParams& params, const Batch& batch, Head head);

Checkpoint params_to_checkpoint(const ModelParams& params);
ModelParams checkpoint_to_params(const Checkpoint& ckpt, const ModelConfig& config);

}  // namespace ntk
