#include "ntk/toymodel.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>

#include "ntk/common.hpp"
#include "ntk/kernels.hpp"
#include "ntk/rng.hpp"

namespace ntk {

namespace {

constexpr double kLnEps = 1e-5;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

std::vector<std::int64_t> expected_shape(ParamId id, const ModelConfig& c) {
  switch (id) {
    case kEmbedTokens: return {c.vocab_size, c.d_model};
    case kEmbedPos: return {c.max_seq_len, c.d_model};
    case kTypeEmbedding: return {1, c.d_model};
    case kAttnQ:
    case kAttnK:
    case kAttnV:
    case kAttnO: return {c.d_model, c.d_model};
    case kFfn1: return {c.d_model, c.d_ffn};
    case kFfn2: return {c.d_ffn, c.d_model};
    case kLn1Gain:
    case kLn1Bias:
    case kLn2Gain:
    case kLn2Bias: return {c.d_model};
    case kMlmHead: return {c.d_model, c.vocab_size};
    case kClsHead: return {c.d_model, c.n_classes};
    default: throw Error("bad param id");
  }
}

// Row-wise layer norm with biased variance. Caches xhat and rstd for backward.
void layer_norm_rows(const std::vector<double>& x, const std::vector<double>& gain,
                     const std::vector<double>& bias, std::int64_t rows, std::int64_t d,
                     std::vector<double>& xhat, std::vector<double>& rstd,
                     std::vector<double>& out) {
  xhat.resize(static_cast<std::size_t>(rows * d));
  rstd.resize(static_cast<std::size_t>(rows));
  out.resize(static_cast<std::size_t>(rows * d));
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      double dev = xr[j] - mean;
      var += dev * dev;
    }
    var /= static_cast<double>(d);
    const double r_std = 1.0 / std::sqrt(var + kLnEps);
    rstd[static_cast<std::size_t>(r)] = r_std;
    for (std::int64_t j = 0; j < d; ++j) {
      double xh = (xr[j] - mean) * r_std;
      xhat[static_cast<std::size_t>(r * d + j)] = xh;
      out[static_cast<std::size_t>(r * d + j)] = xh * gain[static_cast<std::size_t>(j)] +
                                                 bias[static_cast<std::size_t>(j)];
    }
  }
}

// Backward of layer_norm_rows. Accumulates into dx; fills dgain/dbias.
void layer_norm_backward(const std::vector<double>& dout, const std::vector<double>& xhat,
                         const std::vector<double>& rstd, const std::vector<double>& gain,
                         std::int64_t rows, std::int64_t d, std::vector<double>& dx,
                         double* dgain, double* dbias) {
#pragma omp parallel for schedule(static)
  for (std::int64_t j = 0; j < d; ++j) {
    double dg = 0.0, db = 0.0;
    for (std::int64_t r = 0; r < rows; ++r) {
      const double go = dout[static_cast<std::size_t>(r * d + j)];
      dg += go * xhat[static_cast<std::size_t>(r * d + j)];
      db += go;
    }
    dgain[j] += dg;
    dbias[j] += db;
  }
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* dor = dout.data() + r * d;
    const double* xh = xhat.data() + r * d;
    double m1 = 0.0, m2 = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double dxh = dor[j] * gain[static_cast<std::size_t>(j)];
      m1 += dxh;
      m2 += dxh * xh[j];
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    const double r_std = rstd[static_cast<std::size_t>(r)];
    for (std::int64_t j = 0; j < d; ++j) {
      const double dxh = dor[j] * gain[static_cast<std::size_t>(j)];
      dx[static_cast<std::size_t>(r * d + j)] += r_std * (dxh - m1 - xh[j] * m2);
    }
  }
}

struct LogitGrad {
  double loss = 0.0;
  std::vector<double> dlogits;
};

// Softmax cross-entropy over selected rows; gradient scaled by 1/n_rows.
LogitGrad softmax_ce(const std::vector<double>& logits, std::int64_t rows, std::int64_t n,
                     const std::vector<std::int32_t>& labels,
                     const std::vector<std::uint8_t>* active) {
  std::int64_t n_active = 0;
  for (std::int64_t r = 0; r < rows; ++r)
    if (active == nullptr || (*active)[static_cast<std::size_t>(r)]) ++n_active;
  if (n_active == 0) throw DomainError("no labeled positions in batch");

  LogitGrad out;
  out.dlogits.assign(logits.size(), 0.0);
  const double inv = 1.0 / static_cast<double>(n_active);
  double loss = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    if (active != nullptr && !(*active)[static_cast<std::size_t>(r)]) continue;
    const double* lr = logits.data() + r * n;
    double m = lr[0];
    for (std::int64_t j = 1; j < n; ++j) m = std::max(m, lr[j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j < n; ++j) denom += std::exp(lr[j] - m);
    const double lse = m + std::log(denom);
    const std::int32_t y = labels[static_cast<std::size_t>(r)];
    loss += lse - lr[y];
    double* dr = out.dlogits.data() + r * n;
    for (std::int64_t j = 0; j < n; ++j) dr[j] = std::exp(lr[j] - lse) * inv;
    dr[y] -= inv;
  }
  out.loss = loss * inv;
  return out;
}

void run_forward(const ModelParams& params, const Batch& batch, Head head, ForwardCache& c,
                 std::vector<double>& logits) {
  const ModelConfig& cfg = params.config;
  const std::int64_t B = batch.batch, S = batch.seq, D = cfg.d_model;
  const std::int64_t H = cfg.n_heads, dh = cfg.head_dim(), F = cfg.d_ffn;
  const std::int64_t R = B * S;
  c.rows = R;

  const auto& etok = params.at(kEmbedTokens).data;
  const auto& epos = params.at(kEmbedPos).data;
  const auto& etype = params.at(kTypeEmbedding).data;

  c.x0.resize(static_cast<std::size_t>(R * D));
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < R; ++r) {
    const std::int64_t s = r % S;
    const double* tok_row = etok.data() + static_cast<std::int64_t>(batch.tokens[static_cast<std::size_t>(r)]) * D;
    const double* pos_row = epos.data() + s * D;
    double* dst = c.x0.data() + r * D;
    for (std::int64_t j = 0; j < D; ++j) dst[j] = tok_row[j] + pos_row[j] + etype[static_cast<std::size_t>(j)];
  }

  layer_norm_rows(c.x0, params.at(kLn1Gain).data, params.at(kLn1Bias).data, R, D, c.ln1_xhat,
                  c.ln1_rstd, c.h1);

  c.q.resize(static_cast<std::size_t>(R * D));
  c.k.resize(static_cast<std::size_t>(R * D));
  c.v.resize(static_cast<std::size_t>(R * D));
  kernels::matmul(c.h1.data(), params.at(kAttnQ).data.data(), c.q.data(), R, D, D);
  kernels::matmul(c.h1.data(), params.at(kAttnK).data.data(), c.k.data(), R, D, D);
  kernels::matmul(c.h1.data(), params.at(kAttnV).data.data(), c.v.data(), R, D, D);

  c.probs.assign(static_cast<std::size_t>(B * H * S * S), 0.0);
  c.ctx.assign(static_cast<std::size_t>(R * D), 0.0);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const double neg_inf = -std::numeric_limits<double>::infinity();
#pragma omp parallel for schedule(static) collapse(2)
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t h = 0; h < H; ++h) {
      std::vector<double> score(static_cast<std::size_t>(S));
      for (std::int64_t s = 0; s < S; ++s) {
        const double* qrow = c.q.data() + (b * S + s) * D + h * dh;
        double m = neg_inf;
        for (std::int64_t t = 0; t < S; ++t) {
          if (!batch.mask[static_cast<std::size_t>(b * S + t)]) {
            score[static_cast<std::size_t>(t)] = neg_inf;
            continue;
          }
          const double* krow = c.k.data() + (b * S + t) * D + h * dh;
          double dot = 0.0;
          for (std::int64_t j = 0; j < dh; ++j) dot += qrow[j] * krow[j];
          dot *= inv_sqrt_dh;
          score[static_cast<std::size_t>(t)] = dot;
          m = std::max(m, dot);
        }
        double denom = 0.0;
        double* prow = c.probs.data() + ((b * H + h) * S + s) * S;
        for (std::int64_t t = 0; t < S; ++t) {
          const double e = std::exp(score[static_cast<std::size_t>(t)] - m);
          prow[t] = e;
          denom += e;
        }
        const double inv_denom = 1.0 / denom;
        double* crow = c.ctx.data() + (b * S + s) * D + h * dh;
        for (std::int64_t t = 0; t < S; ++t) {
          prow[t] *= inv_denom;
          const double p = prow[t];
          if (p == 0.0) continue;
          const double* vrow = c.v.data() + (b * S + t) * D + h * dh;
          for (std::int64_t j = 0; j < dh; ++j) crow[j] += p * vrow[j];
        }
      }
    }
  }

  c.attn_out.resize(static_cast<std::size_t>(R * D));
  kernels::matmul(c.ctx.data(), params.at(kAttnO).data.data(), c.attn_out.data(), R, D, D);

  c.x1.resize(static_cast<std::size_t>(R * D));
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < R * D; ++i) c.x1[static_cast<std::size_t>(i)] = c.x0[static_cast<std::size_t>(i)] + c.attn_out[static_cast<std::size_t>(i)];

  layer_norm_rows(c.x1, params.at(kLn2Gain).data, params.at(kLn2Bias).data, R, D, c.ln2_xhat,
                  c.ln2_rstd, c.h2);

  c.f1.resize(static_cast<std::size_t>(R * F));
  kernels::matmul(c.h2.data(), params.at(kFfn1).data.data(), c.f1.data(), R, D, F);
  c.gelu_f1.resize(static_cast<std::size_t>(R * F));
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < R * F; ++i) c.gelu_f1[static_cast<std::size_t>(i)] = gelu(c.f1[static_cast<std::size_t>(i)]);
  c.f2.resize(static_cast<std::size_t>(R * D));
  kernels::matmul(c.gelu_f1.data(), params.at(kFfn2).data.data(), c.f2.data(), R, F, D);

  c.x2.resize(static_cast<std::size_t>(R * D));
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < R * D; ++i) c.x2[static_cast<std::size_t>(i)] = c.x1[static_cast<std::size_t>(i)] + c.f2[static_cast<std::size_t>(i)];

  if (head == Head::CLS) {
    c.pooled.assign(static_cast<std::size_t>(B * D), 0.0);
    c.pool_count.assign(static_cast<std::size_t>(B), 0.0);
#pragma omp parallel for schedule(static)
    for (std::int64_t b = 0; b < B; ++b) {
      double* dst = c.pooled.data() + b * D;
      double count = 0.0;
      for (std::int64_t s = 0; s < S; ++s) {
        if (!batch.mask[static_cast<std::size_t>(b * S + s)]) continue;
        count += 1.0;
        const double* row = c.x2.data() + (b * S + s) * D;
        for (std::int64_t j = 0; j < D; ++j) dst[j] += row[j];
      }
      c.pool_count[static_cast<std::size_t>(b)] = count;
      for (std::int64_t j = 0; j < D; ++j) dst[j] /= count;
    }
    logits.resize(static_cast<std::size_t>(B * cfg.n_classes));
    kernels::matmul(c.pooled.data(), params.at(kClsHead).data.data(), logits.data(), B, D,
                    cfg.n_classes);
  } else {
    logits.resize(static_cast<std::size_t>(R * cfg.vocab_size));
    kernels::matmul(c.x2.data(), params.at(kMlmHead).data.data(), logits.data(), R, D,
                    cfg.vocab_size);
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < R; ++r) {
      if (batch.mask[static_cast<std::size_t>(r)]) continue;
      double* row = logits.data() + r * cfg.vocab_size;
      for (std::int64_t j = 0; j < cfg.vocab_size; ++j) row[j] = 0.0;
    }
  }
}

}  // namespace

const char* const kParamNames[kParamCount] = {
    "embed_tokens", "embed_pos", "type_embedding", "attn_q", "attn_k",
    "attn_v",       "attn_o",    "ffn1",           "ffn2",   "ln1_gain",
    "ln1_bias",     "ln2_gain",  "ln2_bias",       "mlm_head", "cls_head"};

const char* const kParamGroups[5] = {"embeddings", "attention", "ffn", "layernorm", "heads"};

std::string_view group_of_tensor(std::string_view name) {
  if (name.starts_with("embed") || name == "type_embedding") return "embeddings";
  if (name.starts_with("attn")) return "attention";
  if (name.starts_with("ffn")) return "ffn";
  if (name.starts_with("ln")) return "layernorm";
  if (name.ends_with("head")) return "heads";
  throw ValidationError("tensor '" + std::string(name) + "' belongs to no parameter group");
}

void ModelConfig::validate() const {
  if (vocab_size < 2 || d_model < 1 || n_heads < 1 || d_ffn < 1 || max_seq_len < 1 ||
      n_classes < 1)
    throw ValidationError("model dimensions must be >= 1 (vocab >= 2)");
  if (d_model % n_heads != 0)
    throw ValidationError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                          std::to_string(n_heads));
  for (const char* g : {"embeddings", "attention", "ffn", "heads"})
    if (init_profile.find(g) == init_profile.end())
      throw ValidationError(std::string("init_profile missing group '") + g + "'");
}

void Batch::validate(const ModelConfig& config) const {
  if (batch < 1 || seq < 1 || seq > config.max_seq_len)
    throw ValidationError("bad batch dimensions");
  if (static_cast<std::int64_t>(tokens.size()) != batch * seq ||
      static_cast<std::int64_t>(mask.size()) != batch * seq)
    throw ValidationError("batch token/mask size mismatch");
  for (std::int64_t b = 0; b < batch; ++b) {
    bool any = false;
    for (std::int64_t s = 0; s < seq; ++s) {
      const auto idx = static_cast<std::size_t>(b * seq + s);
      if (tokens[idx] < 0 || tokens[idx] >= config.vocab_size)
        throw ValidationError("token id out of range at row " + std::to_string(b));
      if (mask[idx]) any = true;
    }
    if (!any) throw ValidationError("row " + std::to_string(b) + " has no unmasked position");
  }
}

Gradients zero_gradients_like(const ModelParams& params) {
  Gradients g;
  g.tensors.reserve(params.tensors.size());
  for (const auto& t : params.tensors) {
    ParamTensor zt;
    zt.name = t.name;
    zt.shape = t.shape;
    zt.data.assign(t.data.size(), 0.0);
    g.tensors.push_back(std::move(zt));
  }
  return g;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams params;
  params.config = config;
  params.tensors.resize(kParamCount);
  for (int id = 0; id < kParamCount; ++id) {
    ParamTensor& t = params.tensors[static_cast<std::size_t>(id)];
    t.name = kParamNames[id];
    t.shape = expected_shape(static_cast<ParamId>(id), config);
    t.data.assign(static_cast<std::size_t>(t.numel()), 0.0);
    if (id == kTypeEmbedding || id == kLn1Bias || id == kLn2Bias) continue;
    if (id == kLn1Gain || id == kLn2Gain) {
      t.data.assign(t.data.size(), 1.0);
      continue;
    }
    const double stddev = config.init_profile.at(std::string(group_of_tensor(t.name)));
    Rng rng = derive_substream(seed, "init/" + t.name);
    for (auto& v : t.data) v = to_f32(rng.normal() * stddev);
  }
  return params;
}

ForwardResult forward(const ModelParams& params, const Batch& batch, Head head) {
  params.config.validate();
  batch.validate(params.config);
  ForwardResult out;
  run_forward(params, batch, head, out.cache, out.logits);
  return out;
}

LossAndGrads loss_and_backward(const ModelParams& params, const Batch& batch, Head head) {
  const ModelConfig& cfg = params.config;
  cfg.validate();
  batch.validate(cfg);
  const std::int64_t B = batch.batch, S = batch.seq, D = cfg.d_model;
  const std::int64_t H = cfg.n_heads, dh = cfg.head_dim(), F = cfg.d_ffn;
  const std::int64_t R = B * S;

  ForwardCache c;
  std::vector<double> logits;
  run_forward(params, batch, head, c, logits);

  LossAndGrads out;
  out.grads = zero_gradients_like(params);
  Gradients& g = out.grads;

  std::vector<double> dx2(static_cast<std::size_t>(R * D), 0.0);

  if (head == Head::CLS) {
    if (static_cast<std::int64_t>(batch.cls_labels.size()) != B)
      throw ValidationError("classification labels missing");
    for (std::int64_t b = 0; b < B; ++b)
      if (batch.cls_labels[static_cast<std::size_t>(b)] < 0 ||
          batch.cls_labels[static_cast<std::size_t>(b)] >= cfg.n_classes)
        throw ValidationError("class label out of range at row " + std::to_string(b));
    LogitGrad lg = softmax_ce(logits, B, cfg.n_classes, batch.cls_labels, nullptr);
    out.loss = lg.loss;
    kernels::matmul_tn(c.pooled.data(), lg.dlogits.data(), g.at(kClsHead).data.data(), B, D,
                       cfg.n_classes);
    std::vector<double> dpooled(static_cast<std::size_t>(B * D));
    kernels::matmul_nt(lg.dlogits.data(), params.at(kClsHead).data.data(), dpooled.data(), B,
                       cfg.n_classes, D);
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < R; ++r) {
      if (!batch.mask[static_cast<std::size_t>(r)]) continue;
      const std::int64_t b = r / S;
      const double inv_count = 1.0 / c.pool_count[static_cast<std::size_t>(b)];
      const double* src = dpooled.data() + b * D;
      double* dst = dx2.data() + r * D;
      for (std::int64_t j = 0; j < D; ++j) dst[j] = src[j] * inv_count;
    }
  } else {
    if (static_cast<std::int64_t>(batch.mlm_targets.size()) != R)
      throw ValidationError("mlm targets missing");
    std::vector<std::uint8_t> labeled(static_cast<std::size_t>(R), 0);
    std::vector<std::int32_t> targets(static_cast<std::size_t>(R), 0);
    for (std::int64_t r = 0; r < R; ++r) {
      const std::int32_t t = batch.mlm_targets[static_cast<std::size_t>(r)];
      if (t < 0) continue;
      if (t >= cfg.vocab_size)
        throw ValidationError("mlm target out of range at position " + std::to_string(r));
      if (!batch.mask[static_cast<std::size_t>(r)])
        throw ValidationError("mlm target at fully masked position " + std::to_string(r));
      labeled[static_cast<std::size_t>(r)] = 1;
      targets[static_cast<std::size_t>(r)] = t;
    }
    LogitGrad lg = softmax_ce(logits, R, cfg.vocab_size, targets, &labeled);
    out.loss = lg.loss;
    kernels::matmul_tn(c.x2.data(), lg.dlogits.data(), g.at(kMlmHead).data.data(), R, D,
                       cfg.vocab_size);
    kernels::matmul_nt(lg.dlogits.data(), params.at(kMlmHead).data.data(), dx2.data(), R,
                       cfg.vocab_size, D);
  }

  // FFN block backward; residual makes dx1 start as dx2.
  std::vector<double> dx1 = dx2;
  std::vector<double> df1(static_cast<std::size_t>(R * F));
  kernels::matmul_tn(c.gelu_f1.data(), dx2.data(), g.at(kFfn2).data.data(), R, F, D);
  kernels::matmul_nt(dx2.data(), params.at(kFfn2).data.data(), df1.data(), R, D, F);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < R * F; ++i)
    df1[static_cast<std::size_t>(i)] *= gelu_grad(c.f1[static_cast<std::size_t>(i)]);
  kernels::matmul_tn(c.h2.data(), df1.data(), g.at(kFfn1).data.data(), R, D, F);
  std::vector<double> dh2(static_cast<std::size_t>(R * D));
  kernels::matmul_nt(df1.data(), params.at(kFfn1).data.data(), dh2.data(), R, F, D);
  layer_norm_backward(dh2, c.ln2_xhat, c.ln2_rstd, params.at(kLn2Gain).data, R, D, dx1,
                      g.at(kLn2Gain).data.data(), g.at(kLn2Bias).data.data());

  // Attention block backward; residual makes dx0 start as dx1.
  std::vector<double> dx0 = dx1;
  std::vector<double> dctx(static_cast<std::size_t>(R * D));
  kernels::matmul_tn(c.ctx.data(), dx1.data(), g.at(kAttnO).data.data(), R, D, D);
  kernels::matmul_nt(dx1.data(), params.at(kAttnO).data.data(), dctx.data(), R, D, D);

  std::vector<double> dq(static_cast<std::size_t>(R * D), 0.0);
  std::vector<double> dk(static_cast<std::size_t>(R * D), 0.0);
  std::vector<double> dv(static_cast<std::size_t>(R * D), 0.0);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
#pragma omp parallel for schedule(static) collapse(2)
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t h = 0; h < H; ++h) {
      std::vector<double> dp(static_cast<std::size_t>(S));
      for (std::int64_t s = 0; s < S; ++s) {
        const double* prow = c.probs.data() + ((b * H + h) * S + s) * S;
        const double* dctx_row = dctx.data() + (b * S + s) * D + h * dh;
        double dot = 0.0;
        for (std::int64_t t = 0; t < S; ++t) {
          const double* vrow = c.v.data() + (b * S + t) * D + h * dh;
          double acc = 0.0;
          for (std::int64_t j = 0; j < dh; ++j) acc += dctx_row[j] * vrow[j];
          dp[static_cast<std::size_t>(t)] = acc;
          dot += acc * prow[t];
        }
        double* dq_row = dq.data() + (b * S + s) * D + h * dh;
        const double* qrow = c.q.data() + (b * S + s) * D + h * dh;
        for (std::int64_t t = 0; t < S; ++t) {
          const double p = prow[t];
          if (p == 0.0) continue;
          const double dscore = p * (dp[static_cast<std::size_t>(t)] - dot) * inv_sqrt_dh;
          const double* krow = c.k.data() + (b * S + t) * D + h * dh;
          double* dk_row = dk.data() + (b * S + t) * D + h * dh;
          double* dv_row = dv.data() + (b * S + t) * D + h * dh;
          for (std::int64_t j = 0; j < dh; ++j) {
            dq_row[j] += dscore * krow[j];
            dk_row[j] += dscore * qrow[j];
            dv_row[j] += p * dctx_row[j];
          }
        }
      }
    }
  }

  kernels::matmul_tn(c.h1.data(), dq.data(), g.at(kAttnQ).data.data(), R, D, D);
  kernels::matmul_tn(c.h1.data(), dk.data(), g.at(kAttnK).data.data(), R, D, D);
  kernels::matmul_tn(c.h1.data(), dv.data(), g.at(kAttnV).data.data(), R, D, D);

  std::vector<double> dh1(static_cast<std::size_t>(R * D));
  std::vector<double> tmp(static_cast<std::size_t>(R * D));
  kernels::matmul_nt(dq.data(), params.at(kAttnQ).data.data(), dh1.data(), R, D, D);
  kernels::matmul_nt(dk.data(), params.at(kAttnK).data.data(), tmp.data(), R, D, D);
  kernels::axpy(1.0, tmp, dh1);
  kernels::matmul_nt(dv.data(), params.at(kAttnV).data.data(), tmp.data(), R, D, D);
  kernels::axpy(1.0, tmp, dh1);

  layer_norm_backward(dh1, c.ln1_xhat, c.ln1_rstd, params.at(kLn1Gain).data, R, D, dx0,
                      g.at(kLn1Gain).data.data(), g.at(kLn1Bias).data.data());

  // Embedding scatter stays serial: token rows repeat, and a fixed order keeps
  // the accumulation bit-deterministic under any thread count.
  double* detok = g.at(kEmbedTokens).data.data();
  double* depos = g.at(kEmbedPos).data.data();
  double* detype = g.at(kTypeEmbedding).data.data();
  for (std::int64_t r = 0; r < R; ++r) {
    const std::int64_t s = r % S;
    const double* src = dx0.data() + r * D;
    double* tok_row = detok + static_cast<std::int64_t>(batch.tokens[static_cast<std::size_t>(r)]) * D;
    double* pos_row = depos + s * D;
    for (std::int64_t j = 0; j < D; ++j) {
      tok_row[j] += src[j];
      pos_row[j] += src[j];
      detype[j] += src[j];
    }
  }

  return out;
}

Checkpoint params_to_checkpoint(const ModelParams& params) {
  Checkpoint ckpt;
  for (const auto& t : params.tensors) {
    NamedTensor nt;
    nt.name = t.name;
    nt.shape = t.shape;
    nt.data.reserve(t.data.size());
    for (double v : t.data) nt.data.push_back(static_cast<float>(v));
    ckpt.add(std::move(nt));
  }
  return ckpt;
}

ModelParams checkpoint_to_params(const Checkpoint& ckpt, const ModelConfig& config) {
  config.validate();
  ModelParams params;
  params.config = config;
  params.tensors.resize(kParamCount);
  for (int id = 0; id < kParamCount; ++id) {
    ParamTensor& t = params.tensors[static_cast<std::size_t>(id)];
    t.name = kParamNames[id];
    t.shape = expected_shape(static_cast<ParamId>(id), config);
    const NamedTensor* src = ckpt.find(t.name);
    if (src == nullptr)
      throw ValidationError("checkpoint missing tensor '" + t.name + "'");
    if (src->shape != t.shape) {
      std::string want, got;
      for (auto d : t.shape) want += std::to_string(d) + " ";
      for (auto d : src->shape) got += std::to_string(d) + " ";
      throw ValidationError("tensor '" + t.name + "' has shape [ " + got + "], expected [ " +
                            want + "]");
    }
    t.data.reserve(src->data.size());
    for (float v : src->data) t.data.push_back(static_cast<double>(v));
  }
  for (const auto& extra : ckpt.tensors) {
    bool known = false;
    for (const char* n : kParamNames)
      if (extra.name == n) known = true;
    if (!known)
      throw ValidationError("checkpoint has unexpected tensor '" + extra.name + "'");
  }
  return params;
}

}  // namespace ntk
