#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntk/data.hpp"
#include "ntk/perturb.hpp"
#include "ntk/tensorstore.hpp"
#include "ntk/toymodel.hpp"
#include "ntk/trainkit.hpp"

namespace ntk {

// Synthetic pretraining corpus: sequences from a seeded order-1 Markov chain
// whose tokens form transition communities, masked at mask_rate for
// masked-token pretraining. The last vocab id is the reserved mask token.
struct CorpusParams {
  std::int64_t n_sequences = 2048;
  std::int64_t seq_len = 16;
  double temperature = 0.45;  // lower = peakier transitions
  double mask_rate = 0.25;
  std::uint64_t seed = 101;
};

// Downstream task: sequences from the pretraining chain blended toward an
// independent chain by delta, labeled by the dominant token bucket.
struct DownstreamParams {
  std::int64_t n_train = 32;
  std::int64_t n_eval = 256;
  double delta = 0.5;  // 0 = pretraining distribution, 1 = unrelated chain
  std::int64_t n_classes = 4;
  int label_rule = 0;  // 0: buckets follow transition communities; 1: seeded random buckets
};

struct ScenarioSpec {
  ModelConfig model;
  CorpusParams corpus;
  DownstreamParams downstream;
  TrainConfig pretrain;
  TrainConfig finetune;
  NoiseSpec noise;  // the perturbation under test; per-run seed comes from `seeds`
  std::vector<std::uint64_t> seeds;
  std::uint64_t init_seed = 1234;

  void validate() const;
  std::string spec_hash() const;  // 16 hex chars over the canonical JSON form
  static ScenarioSpec desk_default();

  nlohmann::json to_json() const;
  static ScenarioSpec from_json(const nlohmann::json& j);
};

// Chain/bucket plumbing, exposed for oracle-style checks.
std::int64_t regular_vocab(const ModelConfig& model);  // mask token excluded
std::int64_t bucket_count(const DownstreamParams& d);
std::vector<double> pretrain_transition(const ScenarioSpec& spec);    // [V*V] row-stochastic
std::vector<double> downstream_transition(const ScenarioSpec& spec);  // delta-blended
std::vector<int> bucket_map(const ScenarioSpec& spec);                // token -> bucket
int label_of(const std::int32_t* tokens, std::int64_t len, const std::vector<int>& buckets,
             std::int64_t n_buckets, std::int64_t n_classes);

MlmDataset gen_pretrain_corpus(const ScenarioSpec& spec);

struct DownstreamData {
  ClsDataset train;
  ClsDataset eval;
};

DownstreamData gen_downstream(const ScenarioSpec& spec, std::uint64_t run_seed);

// Deterministic per-seed prefix subsample; fractions nest.
ClsDataset subsample_train(const ClsDataset& train, double fraction, std::uint64_t run_seed);

// Pretrains (or returns the process-wide cached) checkpoint for this scenario.
Checkpoint pretrained_checkpoint(const ScenarioSpec& spec);

struct Condition {
  std::string label;
  bool pretrained_init = true;
  std::optional<NoiseSpec> noise;
  FinetuneMethod method;
  double fraction = 1.0;
};

struct SeedRun {
  std::uint64_t seed = 0;
  double final_accuracy = 0.0;
  MetricTrajectory trajectory;
};

struct ConditionResult {
  Condition condition;
  std::vector<SeedRun> runs;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
};

// Runs every (condition, seed) cell with paired per-seed datasets: conditions
// differ only in the start checkpoint treatment, method, and train fraction.
// Cells are independent and run in parallel; outputs are slot-addressed so the
// result never depends on thread count.
std::vector<ConditionResult> run_conditions(const ScenarioSpec& spec,
                                            const std::vector<Condition>& conditions);

struct PairedDiff {
  std::string a, b;  // per-seed accuracy of a minus b
  std::vector<double> per_seed;
  double mean = 0.0;
  double stddev = 0.0;
};

struct StudyResult {
  std::string study;
  ScenarioSpec scenario;
  std::vector<ConditionResult> conditions;
  std::vector<PairedDiff> paired;
  bool lambda0_check = false;  // a hidden lambda=0 run reproduced its baseline exactly
  std::vector<double> fractions;  // data-fraction study only
  std::vector<double> lambdas;    // lambda-sweep study only
};

inline const std::vector<double> kDefaultLambdaGrid = {0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3};

StudyResult run_main_comparison(const ScenarioSpec& spec,
                                const std::vector<double>& extra_lambdas = {});
StudyResult run_noise_type_study(const ScenarioSpec& spec);
StudyResult run_combination_study(const ScenarioSpec& spec);
StudyResult run_data_fraction_study(const ScenarioSpec& spec,
                                    const std::vector<double>& fractions = {0.25, 0.5, 0.75,
                                                                            1.0});
StudyResult run_norm_tracking(const ScenarioSpec& spec);
StudyResult run_lambda_sweep(const ScenarioSpec& spec,
                             const std::vector<double>& grid = kDefaultLambdaGrid);

extern const char* const kStudyNames[6];  // CLI study names

StudyResult run_study_by_name(const ScenarioSpec& spec, const std::string& name);

std::string study_csv(const StudyResult& result);
nlohmann::json study_json(const StudyResult& result);

// Writes <study>.csv, <study>.json and merges manifest.json inside
// out_dir/<spec_hash>/. Returns the run directory.
std::string write_study(const StudyResult& result, const std::string& out_dir);

// Renders every table listed in a run directory's manifest as aligned text.
std::string render_run_dir(const std::string& run_dir);

}  // namespace ntk
