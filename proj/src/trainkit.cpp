#include "ntk/trainkit.hpp"

#include <algorithm>
#include <cmath>

#include "ntk/common.hpp"
#include "ntk/kernels.hpp"
#include "ntk/rng.hpp"

namespace ntk {

namespace {

std::vector<std::int64_t> shuffled_indices(std::int64_t n, std::uint64_t seed,
                                           std::int64_t epoch) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng = derive_substream(seed, "shuffle/epoch=" + std::to_string(epoch));
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

double l1_norm(const ParamTensor& t) {
  double acc = 0.0;
  for (double v : t.data) acc += std::abs(v);
  return acc;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ValidationError("learning rate must be >= 0");
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("batch size must be >= 1");
  if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0))
    throw ValidationError("adam betas must lie in (0,1)");
  if (!(eps > 0.0)) throw ValidationError("adam epsilon must be > 0");
}

void FinetuneMethod::validate() const {
  if (kind == MethodKind::Mixout && !(mixout_p >= 0.0 && mixout_p <= 1.0))
    throw ValidationError("mixout probability must lie in [0,1]");
  if (kind == MethodKind::RecAdam) {
    if (!(anneal_a > 0.0)) throw ValidationError("recadam anneal_a must be > 0");
    if (!(penalty_weight > 0.0)) throw ValidationError("recadam penalty weight must be > 0");
  }
}

FinetuneMethod FinetuneMethod::mixout(double p) {
  FinetuneMethod m;
  m.kind = MethodKind::Mixout;
  m.mixout_p = p;
  return m;
}

FinetuneMethod FinetuneMethod::recadam(double a, std::int64_t t0, double weight) {
  FinetuneMethod m;
  m.kind = MethodKind::RecAdam;
  m.anneal_a = a;
  m.anneal_t0 = t0;
  m.penalty_weight = weight;
  return m;
}

std::string method_label(const FinetuneMethod& m) {
  switch (m.kind) {
    case MethodKind::Vanilla: return "vanilla";
    case MethodKind::Mixout: return "mixout";
    case MethodKind::RecAdam: return "recadam";
  }
  return "?";
}

OptimizerState OptimizerState::init(const ModelParams& params) {
  OptimizerState s;
  s.m = zero_gradients_like(params).tensors;
  s.v = zero_gradients_like(params).tensors;
  s.t = 0;
  return s;
}

void adam_step(ModelParams& params, const Gradients& grads, OptimizerState& state,
               const TrainConfig& config) {
  config.validate();
  for (std::size_t ti = 0; ti < params.tensors.size(); ++ti) {
    for (double gv : grads.tensors[ti].data)
      if (!std::isfinite(gv))
        throw NumericError("non-finite gradient in tensor '" + params.tensors[ti].name + "'");
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
  const std::int64_t count = static_cast<std::int64_t>(params.tensors.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t ti = 0; ti < count; ++ti) {
    auto& theta = params.tensors[static_cast<std::size_t>(ti)].data;
    const auto& grad = grads.tensors[static_cast<std::size_t>(ti)].data;
    auto& m = state.m[static_cast<std::size_t>(ti)].data;
    auto& v = state.v[static_cast<std::size_t>(ti)].data;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      const double update = config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
      // A zero update leaves the stored bits alone (signed zeros included).
      if (update != 0.0) theta[i] = to_f32(theta[i] - update);
    }
  }
}

ModelParams mixout_apply(const ModelParams& current, const ModelParams& pretrained, double p,
                         std::uint64_t seed, std::int64_t step) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("mixout probability must lie in [0,1]");
  ModelParams out = current;
  if (p == 0.0) return out;
  const std::int64_t count = static_cast<std::int64_t>(out.tensors.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t ti = 0; ti < count; ++ti) {
    auto& dst = out.tensors[static_cast<std::size_t>(ti)];
    const auto& ref = pretrained.tensors[static_cast<std::size_t>(ti)];
    Rng rng = derive_substream(seed, "mixout/" + dst.name + "/" + std::to_string(step));
    for (std::size_t i = 0; i < dst.data.size(); ++i)
      if (rng.uniform01() < p) dst.data[i] = ref.data[i];
  }
  return out;
}

RecAdamPenalty recadam_penalty(const ModelParams& current, const ModelParams& pretrained,
                               std::int64_t t, const FinetuneMethod& method) {
  RecAdamPenalty out;
  out.k = 1.0 / (1.0 + std::exp(-method.anneal_a *
                                (static_cast<double>(t) - static_cast<double>(method.anneal_t0))));
  const double w = method.penalty_weight * (1.0 - out.k);
  out.grads = zero_gradients_like(current);
  double sq = 0.0;
  for (std::size_t ti = 0; ti < current.tensors.size(); ++ti) {
    const auto& cur = current.tensors[ti].data;
    const auto& ref = pretrained.tensors[ti].data;
    auto& g = out.grads.tensors[ti].data;
    for (std::size_t i = 0; i < cur.size(); ++i) {
      const double d = cur[i] - ref[i];
      sq += d * d;
      g[i] = w * d;
    }
  }
  out.penalty = w * 0.5 * sq;
  return out;
}

L1Change l1_relative_change(const ModelParams& before, const ModelParams& after,
                            const std::map<std::string, std::string>& grouping) {
  std::map<std::string, double> before_l1, after_l1;
  for (std::size_t ti = 0; ti < before.tensors.size(); ++ti) {
    const auto it = grouping.find(before.tensors[ti].name);
    if (it == grouping.end())
      throw ValidationError("tensor '" + before.tensors[ti].name + "' missing from grouping");
    before_l1[it->second] += l1_norm(before.tensors[ti]);
    after_l1[it->second] += l1_norm(after.tensors[ti]);
  }
  L1Change out;
  for (const auto& [group, b] : before_l1) {
    if (b == 0.0) {
      out.by_group[group] = 0.0;
      out.zero_baseline_groups.push_back(group);
    } else {
      out.by_group[group] = std::abs(after_l1[group] - b) / b;
    }
  }
  return out;
}

std::map<std::string, std::string> default_grouping(const ModelParams& params) {
  std::map<std::string, std::string> g;
  for (const auto& t : params.tensors) g[t.name] = std::string(group_of_tensor(t.name));
  return g;
}

double evaluate_accuracy(const ModelParams& params, const ClsDataset& eval_data) {
  const std::int64_t n = eval_data.size();
  if (n == 0) throw DomainError("empty eval set");
  constexpr std::int64_t kEvalBatch = 64;
  std::int64_t correct = 0;
  for (std::int64_t begin = 0; begin < n; begin += kEvalBatch) {
    const std::int64_t end = std::min(begin + kEvalBatch, n);
    std::vector<std::int64_t> idx;
    for (std::int64_t i = begin; i < end; ++i) idx.push_back(i);
    Batch batch = make_cls_batch(eval_data, idx);
    ForwardResult fwd = forward(params, batch, Head::CLS);
    const std::int64_t c = params.config.n_classes;
    for (std::int64_t b = 0; b < batch.batch; ++b) {
      const double* row = fwd.logits.data() + b * c;
      std::int64_t arg = 0;
      for (std::int64_t j = 1; j < c; ++j)
        if (row[j] > row[arg]) arg = j;
      if (arg == batch.cls_labels[static_cast<std::size_t>(b)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

FinetuneResult finetune(const Checkpoint& start, const FinetuneMethod& method,
                        const ClsDataset& train, const ClsDataset& eval_data,
                        const TrainConfig& config, const ModelConfig& model_config) {
  config.validate();
  method.validate();
  if (train.size() == 0) throw DomainError("empty training set");

  FinetuneResult out;
  out.params = checkpoint_to_params(start, model_config);
  const ModelParams start_params = out.params;
  const auto grouping = default_grouping(out.params);

  FinetuneMethod resolved = method;
  const std::int64_t steps_per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  if (resolved.kind == MethodKind::RecAdam && resolved.anneal_t0 < 0)
    resolved.anneal_t0 = config.epochs * steps_per_epoch / 2;

  OptimizerState state = OptimizerState::init(out.params);
  out.trajectory.start_accuracy = evaluate_accuracy(out.params, eval_data);

  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = shuffled_indices(train.size(), config.seed, epoch);
    for (std::int64_t begin = 0; begin < train.size(); begin += config.batch_size) {
      const std::int64_t end = std::min(begin + config.batch_size, train.size());
      std::vector<std::int64_t> idx(order.begin() + begin, order.begin() + end);
      Batch batch = make_cls_batch(train, idx);
      LossAndGrads lg = loss_and_backward(out.params, batch, Head::CLS);
      if (resolved.kind == MethodKind::RecAdam) {
        RecAdamPenalty pen = recadam_penalty(out.params, start_params, state.t, resolved);
        for (std::size_t ti = 0; ti < lg.grads.tensors.size(); ++ti) {
          auto& g = lg.grads.tensors[ti].data;
          const auto& pg = pen.grads.tensors[ti].data;
          for (std::size_t i = 0; i < g.size(); ++i) g[i] = pen.k * g[i] + pg[i];
        }
      }
      adam_step(out.params, lg.grads, state, config);
      if (resolved.kind == MethodKind::Mixout)
        out.params = mixout_apply(out.params, start_params, resolved.mixout_p, config.seed,
                                  state.t);
      out.trajectory.step_loss.push_back(lg.loss);
    }
    out.trajectory.epoch_eval_accuracy.push_back(evaluate_accuracy(out.params, eval_data));
    out.trajectory.epoch_l1_change.push_back(
        l1_relative_change(start_params, out.params, grouping));
  }
  out.trajectory.final_accuracy = out.trajectory.epoch_eval_accuracy.back();
  return out;
}

PretrainResult pretrain_mlm(const ModelParams& init, const MlmDataset& corpus,
                            const TrainConfig& config, const std::set<std::string>& frozen) {
  config.validate();
  if (corpus.size() == 0) throw DomainError("empty pretraining corpus");

  PretrainResult out;
  out.params = init;
  OptimizerState state = OptimizerState::init(out.params);

  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = shuffled_indices(corpus.size(), config.seed, epoch);
    double loss_sum = 0.0;
    std::int64_t steps = 0;
    for (std::int64_t begin = 0; begin < corpus.size(); begin += config.batch_size) {
      const std::int64_t end = std::min(begin + config.batch_size, corpus.size());
      std::vector<std::int64_t> idx(order.begin() + begin, order.begin() + end);
      Batch batch = make_mlm_batch(corpus, idx);
      LossAndGrads lg = loss_and_backward(out.params, batch, Head::MLM);
      for (auto& g : lg.grads.tensors)
        if (frozen.count(g.name) != 0) std::fill(g.data.begin(), g.data.end(), 0.0);
      adam_step(out.params, lg.grads, state, config);
      loss_sum += lg.loss;
      ++steps;
    }
    out.epoch_mean_loss.push_back(loss_sum / static_cast<double>(steps));
  }
  return out;
}

}  // namespace ntk
