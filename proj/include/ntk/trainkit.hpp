#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ntk/data.hpp"
#include "ntk/tensorstore.hpp"
#include "ntk/toymodel.hpp"

namespace ntk {

struct TrainConfig {
  double lr = 1e-3;
  std::int64_t epochs = 8;
  std::int64_t batch_size = 8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
};

// Default search grids for sweep tooling. The noise-intensity grid is the
// canonical one; the lr grid is rescaled to what the toy optimizer needs.
inline const std::vector<double> kLrGrid = {3e-4, 1e-3, 3e-3};
inline const std::vector<std::int64_t> kEpochGrid = {3, 5, 7, 10, 15, 20};
inline const std::vector<std::int64_t> kBatchGrid = {8, 16, 32};

struct OptimizerState {
  std::vector<ParamTensor> m;
  std::vector<ParamTensor> v;
  std::int64_t t = 0;

  static OptimizerState init(const ModelParams& params);
};

enum class MethodKind { Vanilla, Mixout, RecAdam };

struct FinetuneMethod {
  MethodKind kind = MethodKind::Vanilla;
  double mixout_p = 0.1;
  double anneal_a = 0.5;
  std::int64_t anneal_t0 = -1;  // -1: resolved to half the total step count
  double penalty_weight = 1.0;

  void validate() const;
  static FinetuneMethod vanilla() { return {}; }
  static FinetuneMethod mixout(double p);
  static FinetuneMethod recadam(double a, std::int64_t t0, double weight);
};

std::string method_label(const FinetuneMethod& m);

struct L1Change {
  std::map<std::string, double> by_group;
  std::vector<std::string> zero_baseline_groups;
};

struct MetricTrajectory {
  double start_accuracy = 0.0;
  std::vector<double> step_loss;            // one entry per optimizer step
  std::vector<double> epoch_eval_accuracy;  // one entry per epoch
  std::vector<L1Change> epoch_l1_change;    // one entry per epoch, vs the run's start
  double final_accuracy = 0.0;
};

// Standard Adam with bias correction; updated parameter values are rounded to
// f32-representable doubles, keeping checkpoint conversion lossless.
void adam_step(ModelParams& params, const Gradients& grads, OptimizerState& state,
               const TrainConfig& config);

// Each element independently reverts to the pretrained value with probability
// p. Draws use the substream "mixout/<tensor>/<step>" so results do not depend
// on tensor processing order.
ModelParams mixout_apply(const ModelParams& current, const ModelParams& pretrained, double p,
                         std::uint64_t seed, std::int64_t step);

struct RecAdamPenalty {
  double penalty = 0.0;
  double k = 0.0;  // task-loss weight at this step
  Gradients grads;
};

// Annealed quadratic pull toward the pretrained parameters:
//   k(t) = sigmoid(anneal_a * (t - anneal_t0))
//   penalty = penalty_weight * (1 - k(t)) * 1/2 * sum ||current - pretrained||^2
// The training loop weights the task gradient by k(t) and adds these grads.
RecAdamPenalty recadam_penalty(const ModelParams& current, const ModelParams& pretrained,
                               std::int64_t t, const FinetuneMethod& method);

// |L1(after_g) - L1(before_g)| / L1(before_g) per group; groups with a zero
// baseline report 0 and are flagged.
L1Change l1_relative_change(const ModelParams& before, const ModelParams& after,
                            const std::map<std::string, std::string>& grouping);

std::map<std::string, std::string> default_grouping(const ModelParams& params);

// Argmax accuracy over the eval set; ties go to the lowest class index.
double evaluate_accuracy(const ModelParams& params, const ClsDataset& eval_data);

struct FinetuneResult {
  ModelParams params;
  MetricTrajectory trajectory;
};

// Epochs x batches of classification loss/backward + Adam, with the selected
// method's extra machinery. Deterministic in (start, data, config, method).
FinetuneResult finetune(const Checkpoint& start, const FinetuneMethod& method,
                        const ClsDataset& train, const ClsDataset& eval_data,
                        const TrainConfig& config, const ModelConfig& model_config);

struct PretrainResult {
  ModelParams params;
  std::vector<double> epoch_mean_loss;
};

// Masked-token pretraining. Tensors named in `frozen` keep their initial
// values; type_embedding stays frozen so a zero-std tensor survives into the
// finished checkpoint.
PretrainResult pretrain_mlm(const ModelParams& init, const MlmDataset& corpus,
                            const TrainConfig& config,
                            const std::set<std::string>& frozen = {"type_embedding"});

}  // namespace ntk
