#include "ntk/expbench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include "ntk/common.hpp"
#include "ntk/rng.hpp"
#include "ntk/serde.hpp"

namespace ntk {

namespace {

namespace fs = std::filesystem;

// Transition rows concentrate inside token communities; this is what gives the
// pretraining chain structure worth transferring.
constexpr double kCommunityAffinity = 2.0;

double mean_of(const std::vector<double>& xs) {
  double acc = 0.0;
  for (double x : xs) acc += x;
  return xs.empty() ? 0.0 : acc / static_cast<double>(xs.size());
}

double sample_std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double acc = 0.0;
  for (double x : xs) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(xs.size() - 1));
}

std::vector<int> community_partition(const ScenarioSpec& spec, std::string_view key) {
  const std::int64_t v = regular_vocab(spec.model);
  const std::int64_t n_buckets = bucket_count(spec.downstream);
  std::vector<std::int64_t> perm(static_cast<std::size_t>(v));
  for (std::int64_t i = 0; i < v; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng rng = derive_substream(spec.corpus.seed, key);
  for (std::int64_t i = v - 1; i > 0; --i) {
    const auto j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  std::vector<int> bucket(static_cast<std::size_t>(v));
  for (std::int64_t i = 0; i < v; ++i)
    bucket[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] =
        static_cast<int>(i % n_buckets);
  return bucket;
}

std::vector<double> transition_from_logits(const ScenarioSpec& spec, std::string_view key,
                                           bool with_communities) {
  const std::int64_t v = regular_vocab(spec.model);
  const double tau = spec.corpus.temperature;
  const std::vector<int> community =
      with_communities ? community_partition(spec, "communities") : std::vector<int>();
  Rng rng = derive_substream(spec.corpus.seed, key);
  std::vector<double> t(static_cast<std::size_t>(v * v));
  for (std::int64_t i = 0; i < v; ++i) {
    double* row = t.data() + i * v;
    double m = -1e300;
    for (std::int64_t j = 0; j < v; ++j) {
      double logit = rng.normal();
      if (with_communities && community[static_cast<std::size_t>(i)] ==
                                  community[static_cast<std::size_t>(j)])
        logit += kCommunityAffinity;
      row[j] = logit / tau;
      m = std::max(m, row[j]);
    }
    for (std::int64_t j = 0; j < v; ++j) row[j] = std::exp(row[j] - m);
  }
  // Sinkhorn passes push the matrix toward doubly stochastic, so the chain's
  // stationary distribution is near uniform and token frequencies stay
  // balanced across seeds and delta values.
  for (int pass = 0; pass < 50; ++pass) {
    for (std::int64_t j = 0; j < v; ++j) {
      double col = 0.0;
      for (std::int64_t i = 0; i < v; ++i) col += t[static_cast<std::size_t>(i * v + j)];
      for (std::int64_t i = 0; i < v; ++i) t[static_cast<std::size_t>(i * v + j)] /= col;
    }
    for (std::int64_t i = 0; i < v; ++i) {
      double row_sum = 0.0;
      for (std::int64_t j = 0; j < v; ++j) row_sum += t[static_cast<std::size_t>(i * v + j)];
      for (std::int64_t j = 0; j < v; ++j) t[static_cast<std::size_t>(i * v + j)] /= row_sum;
    }
  }
  return t;
}

std::int32_t sample_categorical(const double* row, std::int64_t n, Rng& rng) {
  const double u = rng.uniform01();
  double acc = 0.0;
  for (std::int64_t j = 0; j < n; ++j) {
    acc += row[j];
    if (u < acc) return static_cast<std::int32_t>(j);
  }
  return static_cast<std::int32_t>(n - 1);
}

void sample_chain(const std::vector<double>& t, std::int64_t v, std::int64_t len, Rng& rng,
                  std::int32_t* out) {
  out[0] = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(v)));
  for (std::int64_t p = 1; p < len; ++p)
    out[p] = sample_categorical(t.data() + static_cast<std::int64_t>(out[p - 1]) * v, v, rng);
}

struct CellError {
  std::mutex mu;
  std::exception_ptr first;

  void capture() {
    std::lock_guard<std::mutex> lock(mu);
    if (!first) first = std::current_exception();
  }
};

std::string lambda_label(double lambda) { return "lambda=" + format_double("%g", lambda); }

NoiseSpec with_lambda(const NoiseSpec& base, double lambda, NoiseDistribution dist,
                      NoiseScope scope) {
  NoiseSpec s = base;
  s.lambda = lambda;
  s.distribution = dist;
  s.scope = scope;
  return s;
}

bool runs_identical(const ConditionResult& a, const ConditionResult& b) {
  if (a.runs.size() != b.runs.size()) return false;
  for (std::size_t i = 0; i < a.runs.size(); ++i) {
    if (a.runs[i].final_accuracy != b.runs[i].final_accuracy) return false;
    if (a.runs[i].trajectory.step_loss != b.runs[i].trajectory.step_loss) return false;
    if (a.runs[i].trajectory.epoch_eval_accuracy != b.runs[i].trajectory.epoch_eval_accuracy)
      return false;
  }
  return true;
}

PairedDiff make_paired(const ConditionResult& a, const ConditionResult& b) {
  PairedDiff d;
  d.a = a.condition.label;
  d.b = b.condition.label;
  for (std::size_t i = 0; i < a.runs.size(); ++i)
    d.per_seed.push_back(a.runs[i].final_accuracy - b.runs[i].final_accuracy);
  d.mean = mean_of(d.per_seed);
  d.stddev = sample_std_of(d.per_seed);
  return d;
}

// Runs the visible conditions plus one hidden lambda=0 twin of the baseline
// and records whether it reproduced the baseline exactly.
StudyResult run_with_lambda0_check(const ScenarioSpec& spec, const std::string& study,
                                   std::vector<Condition> conditions,
                                   std::size_t baseline_index) {
  Condition hidden = conditions[baseline_index];
  if (hidden.noise.has_value()) {
    hidden.noise->lambda = 0.0;
    hidden.label = "__no_noise_twin";
  } else {
    hidden.noise = with_lambda(spec.noise, 0.0, spec.noise.distribution, spec.noise.scope);
    hidden.label = "__lambda0_twin";
  }
  conditions.push_back(hidden);

  auto results = run_conditions(spec, conditions);
  StudyResult out;
  out.study = study;
  out.scenario = spec;
  out.lambda0_check = runs_identical(results[baseline_index], results.back());
  results.pop_back();
  out.conditions = std::move(results);
  return out;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw IoError("write failure: " + path);
}

std::string study_file_stem(const std::string& study) {
  std::string stem = study;
  std::replace(stem.begin(), stem.end(), '-', '_');
  return stem;
}

}  // namespace

const char* const kStudyNames[6] = {"main",          "noise-types",   "combination",
                                    "data-fraction", "norm-tracking", "lambda-sweep"};

std::int64_t regular_vocab(const ModelConfig& model) { return model.vocab_size - 1; }

std::int64_t bucket_count(const DownstreamParams& d) { return 2 * d.n_classes; }

void ScenarioSpec::validate() const {
  model.validate();
  pretrain.validate();
  finetune.validate();
  noise.validate();
  if (corpus.n_sequences < 1 || corpus.seq_len < 1)
    throw ValidationError("corpus must have at least one sequence of length >= 1");
  if (corpus.seq_len > model.max_seq_len)
    throw ValidationError("corpus seq_len exceeds model max_seq_len");
  if (!(corpus.temperature > 0.0)) throw ValidationError("temperature must be > 0");
  if (!(corpus.mask_rate >= 0.0 && corpus.mask_rate <= 1.0))
    throw ValidationError("mask_rate must lie in [0,1]");
  if (downstream.n_train < finetune.batch_size)
    throw ValidationError("n_train must be >= finetune batch size");
  if (downstream.n_eval < 1) throw ValidationError("n_eval must be >= 1");
  if (!(downstream.delta >= 0.0 && downstream.delta <= 1.0))
    throw ValidationError("delta must lie in [0,1]");
  if (downstream.n_classes != model.n_classes)
    throw ValidationError("downstream n_classes must match the model head");
  if (downstream.n_classes < 2) throw ValidationError("need at least 2 classes");
  if (downstream.label_rule != 0 && downstream.label_rule != 1)
    throw ValidationError("label_rule must be 0 or 1");
  if (seeds.empty()) throw ValidationError("at least one seed required");
  if (bucket_count(downstream) > regular_vocab(model))
    throw ValidationError("bucket count exceeds regular vocabulary size");
}

std::string ScenarioSpec::spec_hash() const {
  const std::uint64_t h = fnv1a64(to_json().dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ScenarioSpec ScenarioSpec::desk_default() {
  ScenarioSpec spec;
  spec.pretrain.lr = 2e-3;
  spec.pretrain.epochs = 40;
  spec.pretrain.batch_size = 32;
  spec.pretrain.seed = 7;
  spec.finetune.lr = 1.5e-3;
  spec.finetune.epochs = 7;
  spec.finetune.batch_size = 8;
  spec.seeds.clear();
  for (std::uint64_t s = 1; s <= 20; ++s) spec.seeds.push_back(s);
  return spec;
}

nlohmann::json ScenarioSpec::to_json() const {
  nlohmann::json j;
  j["model"] = serde::to_json(model);
  j["corpus"] = {{"n_sequences", corpus.n_sequences},
                 {"seq_len", corpus.seq_len},
                 {"temperature", corpus.temperature},
                 {"mask_rate", corpus.mask_rate},
                 {"seed", corpus.seed}};
  j["downstream"] = {{"n_train", downstream.n_train},
                     {"n_eval", downstream.n_eval},
                     {"delta", downstream.delta},
                     {"n_classes", downstream.n_classes},
                     {"label_rule", downstream.label_rule}};
  j["pretrain"] = serde::to_json(pretrain);
  j["finetune"] = serde::to_json(finetune);
  j["noise"] = serde::to_json(noise);
  j["seeds"] = seeds;
  j["init_seed"] = init_seed;
  return j;
}

ScenarioSpec ScenarioSpec::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("scenario must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    static const std::set<std::string> known = {"model",    "corpus",   "downstream",
                                                "pretrain", "finetune", "noise",
                                                "seeds",    "init_seed"};
    if (known.find(key) == known.end())
      throw ConfigError("unknown key '" + key + "' in scenario");
  }
  ScenarioSpec spec = desk_default();
  if (j.contains("model")) spec.model = serde::model_config_from_json(j.at("model"), spec.model);
  if (j.contains("corpus")) {
    const auto& c = j.at("corpus");
    for (const auto& [key, value] : c.items()) {
      (void)value;
      static const std::set<std::string> known = {"n_sequences", "seq_len", "temperature",
                                                  "mask_rate", "seed"};
      if (known.find(key) == known.end())
        throw ConfigError("unknown key '" + key + "' in corpus");
    }
    if (c.contains("n_sequences")) spec.corpus.n_sequences = c.at("n_sequences").get<std::int64_t>();
    if (c.contains("seq_len")) spec.corpus.seq_len = c.at("seq_len").get<std::int64_t>();
    if (c.contains("temperature")) spec.corpus.temperature = c.at("temperature").get<double>();
    if (c.contains("mask_rate")) spec.corpus.mask_rate = c.at("mask_rate").get<double>();
    if (c.contains("seed")) spec.corpus.seed = c.at("seed").get<std::uint64_t>();
  }
  if (j.contains("downstream")) {
    const auto& d = j.at("downstream");
    for (const auto& [key, value] : d.items()) {
      (void)value;
      static const std::set<std::string> known = {"n_train", "n_eval", "delta", "n_classes",
                                                  "label_rule"};
      if (known.find(key) == known.end())
        throw ConfigError("unknown key '" + key + "' in downstream");
    }
    if (d.contains("n_train")) spec.downstream.n_train = d.at("n_train").get<std::int64_t>();
    if (d.contains("n_eval")) spec.downstream.n_eval = d.at("n_eval").get<std::int64_t>();
    if (d.contains("delta")) spec.downstream.delta = d.at("delta").get<double>();
    if (d.contains("n_classes")) spec.downstream.n_classes = d.at("n_classes").get<std::int64_t>();
    if (d.contains("label_rule")) spec.downstream.label_rule = d.at("label_rule").get<int>();
  }
  if (j.contains("pretrain"))
    spec.pretrain = serde::train_config_from_json(j.at("pretrain"), spec.pretrain);
  if (j.contains("finetune"))
    spec.finetune = serde::train_config_from_json(j.at("finetune"), spec.finetune);
  if (j.contains("noise")) spec.noise = serde::noise_spec_from_json(j.at("noise"), spec.noise);
  if (j.contains("seeds")) spec.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("init_seed")) spec.init_seed = j.at("init_seed").get<std::uint64_t>();
  return spec;
}

std::vector<double> pretrain_transition(const ScenarioSpec& spec) {
  return transition_from_logits(spec, "chain/pretrain", true);
}

std::vector<double> downstream_transition(const ScenarioSpec& spec) {
  const std::vector<double> pre = pretrain_transition(spec);
  const std::vector<double> ind = transition_from_logits(spec, "chain/independent", false);
  const double delta = spec.downstream.delta;
  std::vector<double> mixed(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i)
    mixed[i] = (1.0 - delta) * pre[i] + delta * ind[i];
  return mixed;
}

std::vector<int> bucket_map(const ScenarioSpec& spec) {
  return community_partition(spec, spec.downstream.label_rule == 0 ? "communities"
                                                                   : "buckets/alt");
}

int label_of(const std::int32_t* tokens, std::int64_t len, const std::vector<int>& buckets,
             std::int64_t n_buckets, std::int64_t n_classes) {
  std::vector<int> counts(static_cast<std::size_t>(n_buckets), 0);
  for (std::int64_t p = 0; p < len; ++p)
    counts[static_cast<std::size_t>(buckets[static_cast<std::size_t>(tokens[p])])] += 1;
  int arg = 0;
  for (std::int64_t b = 1; b < n_buckets; ++b)
    if (counts[static_cast<std::size_t>(b)] > counts[static_cast<std::size_t>(arg)])
      arg = static_cast<int>(b);
  return static_cast<int>(arg % n_classes);
}

MlmDataset gen_pretrain_corpus(const ScenarioSpec& spec) {
  spec.validate();
  const std::int64_t v = regular_vocab(spec.model);
  const auto mask_token = static_cast<std::int32_t>(spec.model.vocab_size - 1);
  const std::vector<double> t = pretrain_transition(spec);
  const std::int64_t len = spec.corpus.seq_len;

  MlmDataset out;
  out.seq_len = len;
  out.tokens.resize(static_cast<std::size_t>(spec.corpus.n_sequences * len));
  out.targets.assign(static_cast<std::size_t>(spec.corpus.n_sequences * len), -1);
  if (spec.corpus.mask_rate == 0.0)
    out.warnings.push_back(
        "mask_rate is 0: no masked targets, dataset unusable for masked-token training");

  Rng rng = derive_substream(spec.corpus.seed, "corpus");
  for (std::int64_t i = 0; i < spec.corpus.n_sequences; ++i) {
    std::int32_t* seq = out.tokens.data() + i * len;
    std::int32_t* tgt = out.targets.data() + i * len;
    sample_chain(t, v, len, rng, seq);
    if (spec.corpus.mask_rate == 0.0) continue;
    bool any = false;
    for (std::int64_t p = 0; p < len; ++p) {
      if (rng.uniform01() < spec.corpus.mask_rate) {
        tgt[p] = seq[p];
        seq[p] = mask_token;
        any = true;
      }
    }
    if (!any) {
      // keep every sequence trainable
      const auto p = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(len)));
      tgt[p] = seq[p];
      seq[p] = mask_token;
    }
  }
  return out;
}

// Draw sequences at their natural label rates, capped at 110% of a uniform
// share; only genuinely deficient classes get topped up afterwards. When the
// chain's labels are naturally balanced the sample is completely unfiltered,
// which keeps the token marginals faithful to the generator.
DownstreamData gen_downstream(const ScenarioSpec& spec, std::uint64_t run_seed) {
  spec.validate();
  const std::int64_t v = regular_vocab(spec.model);
  const std::int64_t k = spec.downstream.n_classes;
  const std::int64_t n_buckets = bucket_count(spec.downstream);
  const std::vector<double> t = downstream_transition(spec);
  const std::vector<int> buckets = bucket_map(spec);
  const std::int64_t len = spec.corpus.seq_len;
  const std::int64_t total = spec.downstream.n_train + spec.downstream.n_eval;
  const double uniform = static_cast<double>(total) / static_cast<double>(k);
  // balance tolerance: 10% of a uniform share or one example, whichever is
  // larger (counts are integers)
  const auto cap = static_cast<std::int64_t>(std::ceil(1.1 * uniform));
  const auto floor_count =
      std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(0.9 * uniform)) - 1);

  std::vector<std::vector<std::int32_t>> pool(static_cast<std::size_t>(k));
  auto pool_size = [&](std::int64_t c) {
    return static_cast<std::int64_t>(pool[static_cast<std::size_t>(c)].size()) / len;
  };

  Rng rng = derive_substream(run_seed, "downstream");
  std::vector<std::int32_t> seq(static_cast<std::size_t>(len));
  std::int64_t accepted = 0;
  for (std::int64_t attempt = 0; accepted < total; ++attempt) {
    if (attempt > 1000 * total)
      throw DomainError("label distribution too skewed to draw a balanced downstream split");
    sample_chain(t, v, len, rng, seq.data());
    const int label = label_of(seq.data(), len, buckets, n_buckets, k);
    if (pool_size(label) >= cap) continue;
    pool[static_cast<std::size_t>(label)].insert(pool[static_cast<std::size_t>(label)].end(),
                                                 seq.begin(), seq.end());
    ++accepted;
  }
  // top up deficient classes, evicting from the currently largest pool
  for (std::int64_t attempt = 0;; ++attempt) {
    std::int64_t deficient = -1;
    for (std::int64_t c = 0; c < k; ++c)
      if (pool_size(c) < floor_count) deficient = c;
    if (deficient < 0) break;
    if (attempt > 1000 * total)
      throw DomainError("label distribution too skewed to draw a balanced downstream split");
    sample_chain(t, v, len, rng, seq.data());
    const int label = label_of(seq.data(), len, buckets, n_buckets, k);
    if (pool_size(label) >= floor_count) continue;
    std::int64_t largest = 0;
    for (std::int64_t c = 1; c < k; ++c)
      if (pool_size(c) > pool_size(largest)) largest = c;
    pool[static_cast<std::size_t>(largest)].resize(
        pool[static_cast<std::size_t>(largest)].size() - static_cast<std::size_t>(len));
    pool[static_cast<std::size_t>(label)].insert(pool[static_cast<std::size_t>(label)].end(),
                                                 seq.begin(), seq.end());
  }

  // allocate each class's train share by largest remainder, then split
  std::vector<std::int64_t> train_quota(static_cast<std::size_t>(k), 0);
  {
    const double scale = static_cast<double>(spec.downstream.n_train) /
                         static_cast<double>(total);
    std::int64_t assigned = 0;
    std::vector<std::pair<double, std::int64_t>> remainders;
    for (std::int64_t c = 0; c < k; ++c) {
      const double exact = scale * static_cast<double>(pool_size(c));
      train_quota[static_cast<std::size_t>(c)] = static_cast<std::int64_t>(std::floor(exact));
      train_quota[static_cast<std::size_t>(c)] =
          std::min(train_quota[static_cast<std::size_t>(c)], pool_size(c));
      assigned += train_quota[static_cast<std::size_t>(c)];
      remainders.push_back({exact - std::floor(exact), c});
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (const auto& [rem, c] : remainders) {
      (void)rem;
      if (assigned >= spec.downstream.n_train) break;
      if (train_quota[static_cast<std::size_t>(c)] < pool_size(c)) {
        ++train_quota[static_cast<std::size_t>(c)];
        ++assigned;
      }
    }
    if (assigned != spec.downstream.n_train)
      throw DomainError("could not allocate the requested train split");
  }

  DownstreamData out;
  out.train.seq_len = len;
  out.eval.seq_len = len;
  for (std::int64_t c = 0; c < k; ++c) {
    const auto& class_pool = pool[static_cast<std::size_t>(c)];
    const std::int64_t n_train_c = train_quota[static_cast<std::size_t>(c)];
    const std::int64_t n_eval_c = pool_size(c) - n_train_c;
    out.train.tokens.insert(out.train.tokens.end(), class_pool.begin(),
                            class_pool.begin() + n_train_c * len);
    out.train.labels.insert(out.train.labels.end(), static_cast<std::size_t>(n_train_c),
                            static_cast<std::int32_t>(c));
    out.eval.tokens.insert(out.eval.tokens.end(), class_pool.begin() + n_train_c * len,
                           class_pool.begin() + (n_train_c + n_eval_c) * len);
    out.eval.labels.insert(out.eval.labels.end(), static_cast<std::size_t>(n_eval_c),
                           static_cast<std::int32_t>(c));
  }
  return out;
}

ClsDataset subsample_train(const ClsDataset& train, double fraction, std::uint64_t run_seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw ValidationError("fraction must lie in (0,1]");
  const std::int64_t n = train.size();
  const auto m = static_cast<std::int64_t>(fraction * static_cast<double>(n) + 1e-9);
  if (m < 1) throw DomainError("fraction leaves no training examples");
  if (m == n) return train;

  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng rng = derive_substream(run_seed, "fraction");
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  ClsDataset out;
  out.seq_len = train.seq_len;
  for (std::int64_t i = 0; i < m; ++i) {
    const std::int64_t src = perm[static_cast<std::size_t>(i)];
    out.tokens.insert(out.tokens.end(), train.tokens.begin() + src * train.seq_len,
                      train.tokens.begin() + (src + 1) * train.seq_len);
    out.labels.push_back(train.labels[static_cast<std::size_t>(src)]);
  }
  return out;
}

Checkpoint pretrained_checkpoint(const ScenarioSpec& spec) {
  spec.validate();
  nlohmann::json key_doc;
  key_doc["model"] = serde::to_json(spec.model);
  key_doc["corpus"] = spec.to_json()["corpus"];
  key_doc["pretrain"] = serde::to_json(spec.pretrain);
  key_doc["init_seed"] = spec.init_seed;
  const std::string key = key_doc.dump();

  static std::mutex mu;
  static std::map<std::string, Checkpoint> cache;
  {
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
  }

  ModelParams params = init_params(spec.model, spec.init_seed);
  MlmDataset corpus = gen_pretrain_corpus(spec);
  PretrainResult result = pretrain_mlm(params, corpus, spec.pretrain);
  Checkpoint ckpt = params_to_checkpoint(result.params);
  ckpt.metadata["model_config"] = serde::to_json(spec.model).dump();

  std::lock_guard<std::mutex> lock(mu);
  cache.emplace(key, ckpt);
  return ckpt;
}

std::vector<ConditionResult> run_conditions(const ScenarioSpec& spec,
                                            const std::vector<Condition>& conditions) {
  spec.validate();
  bool need_pretrained = false;
  for (const auto& c : conditions)
    if (c.pretrained_init) need_pretrained = true;
  const Checkpoint pre = need_pretrained ? pretrained_checkpoint(spec) : Checkpoint{};

  const std::int64_t n_seeds = static_cast<std::int64_t>(spec.seeds.size());
  std::vector<DownstreamData> data;
  data.reserve(static_cast<std::size_t>(n_seeds));
  for (std::int64_t si = 0; si < n_seeds; ++si)
    data.push_back(gen_downstream(spec, spec.seeds[static_cast<std::size_t>(si)]));

  const std::int64_t n_conds = static_cast<std::int64_t>(conditions.size());
  std::vector<ConditionResult> results(static_cast<std::size_t>(n_conds));
  for (std::int64_t ci = 0; ci < n_conds; ++ci) {
    results[static_cast<std::size_t>(ci)].condition = conditions[static_cast<std::size_t>(ci)];
    results[static_cast<std::size_t>(ci)].runs.resize(static_cast<std::size_t>(n_seeds));
  }

  CellError err;
#pragma omp parallel for collapse(2) schedule(dynamic)
  for (std::int64_t ci = 0; ci < n_conds; ++ci) {
    for (std::int64_t si = 0; si < n_seeds; ++si) {
      try {
        const Condition& cond = conditions[static_cast<std::size_t>(ci)];
        const std::uint64_t seed = spec.seeds[static_cast<std::size_t>(si)];
        const DownstreamData& dd = data[static_cast<std::size_t>(si)];
        ClsDataset train = subsample_train(dd.train, cond.fraction, seed);
        Checkpoint start =
            cond.pretrained_init ? pre : params_to_checkpoint(init_params(spec.model, seed));
        if (cond.noise.has_value()) {
          NoiseSpec noise = *cond.noise;
          noise.seed = seed;
          start = perturb_checkpoint(start, noise).first;
        }
        TrainConfig ft = spec.finetune;
        ft.seed = seed;
        FinetuneResult run = finetune(start, cond.method, train, dd.eval, ft, spec.model);
        SeedRun& slot = results[static_cast<std::size_t>(ci)].runs[static_cast<std::size_t>(si)];
        slot.seed = seed;
        slot.final_accuracy = run.trajectory.final_accuracy;
        slot.trajectory = std::move(run.trajectory);
      } catch (...) {
        err.capture();
      }
    }
  }
  if (err.first) std::rethrow_exception(err.first);

  for (auto& r : results) {
    std::vector<double> accs;
    for (const auto& run : r.runs) accs.push_back(run.final_accuracy);
    r.mean_accuracy = mean_of(accs);
    r.std_accuracy = sample_std_of(accs);
  }
  return results;
}

StudyResult run_main_comparison(const ScenarioSpec& spec,
                                const std::vector<double>& extra_lambdas) {
  std::vector<Condition> conditions;
  conditions.push_back({"no-noise", true, std::nullopt, FinetuneMethod::vanilla(), 1.0});
  conditions.push_back({"noisytune", true, spec.noise, FinetuneMethod::vanilla(), 1.0});
  for (double lambda : extra_lambdas)
    conditions.push_back({"noisytune(" + lambda_label(lambda) + ")", true,
                          with_lambda(spec.noise, lambda, spec.noise.distribution,
                                      spec.noise.scope),
                          FinetuneMethod::vanilla(), 1.0});
  StudyResult out = run_with_lambda0_check(spec, "main", conditions, 0);
  for (std::size_t i = 1; i < out.conditions.size(); ++i)
    out.paired.push_back(make_paired(out.conditions[i], out.conditions[0]));
  return out;
}

StudyResult run_noise_type_study(const ScenarioSpec& spec) {
  const double lambda = spec.noise.lambda;
  std::vector<Condition> conditions;
  conditions.push_back({"no-noise", true, std::nullopt, FinetuneMethod::vanilla(), 1.0});
  conditions.push_back({"global-gaussian", true,
                        with_lambda(spec.noise, lambda, NoiseDistribution::Gaussian,
                                    NoiseScope::Global),
                        FinetuneMethod::vanilla(), 1.0});
  conditions.push_back({"global-uniform", true,
                        with_lambda(spec.noise, lambda, NoiseDistribution::Uniform,
                                    NoiseScope::Global),
                        FinetuneMethod::vanilla(), 1.0});
  conditions.push_back({"matrix-gaussian", true,
                        with_lambda(spec.noise, lambda, NoiseDistribution::Gaussian,
                                    NoiseScope::MatrixWise),
                        FinetuneMethod::vanilla(), 1.0});
  conditions.push_back({"matrix-uniform", true,
                        with_lambda(spec.noise, lambda, NoiseDistribution::Uniform,
                                    NoiseScope::MatrixWise),
                        FinetuneMethod::vanilla(), 1.0});
  StudyResult out = run_with_lambda0_check(spec, "noise-types", conditions, 0);
  for (std::size_t i = 1; i < out.conditions.size(); ++i)
    out.paired.push_back(make_paired(out.conditions[i], out.conditions[0]));
  return out;
}

StudyResult run_combination_study(const ScenarioSpec& spec) {
  const FinetuneMethod methods[3] = {FinetuneMethod::vanilla(), FinetuneMethod::mixout(0.1),
                                     FinetuneMethod::recadam(0.5, -1, 1.0)};
  std::vector<Condition> conditions;
  for (const auto& m : methods) {
    conditions.push_back({method_label(m), true, std::nullopt, m, 1.0});
    conditions.push_back({method_label(m) + "+noisytune", true, spec.noise, m, 1.0});
  }
  StudyResult out = run_with_lambda0_check(spec, "combination", conditions, 0);
  for (std::size_t i = 0; i < 3; ++i)
    out.paired.push_back(make_paired(out.conditions[2 * i + 1], out.conditions[2 * i]));
  return out;
}

StudyResult run_data_fraction_study(const ScenarioSpec& spec,
                                    const std::vector<double>& fractions) {
  if (fractions.empty()) throw ConfigError("data-fraction study needs at least one fraction");
  std::vector<double> ordered = fractions;
  std::sort(ordered.begin(), ordered.end());
  std::vector<Condition> conditions;
  for (double f : ordered) {
    conditions.push_back({"no-noise", true, std::nullopt, FinetuneMethod::vanilla(), f});
    conditions.push_back({"noisytune", true, spec.noise, FinetuneMethod::vanilla(), f});
  }
  // baseline for the hidden lambda=0 twin: no-noise at the largest fraction
  StudyResult out =
      run_with_lambda0_check(spec, "data-fraction", conditions, conditions.size() - 2);
  out.fractions = ordered;
  for (std::size_t i = 0; i < ordered.size(); ++i)
    out.paired.push_back(make_paired(out.conditions[2 * i + 1], out.conditions[2 * i]));
  return out;
}

StudyResult run_norm_tracking(const ScenarioSpec& spec) {
  std::vector<Condition> conditions;
  conditions.push_back({"no-noise", true, std::nullopt, FinetuneMethod::vanilla(), 1.0});
  conditions.push_back({"noisytune", true, spec.noise, FinetuneMethod::vanilla(), 1.0});
  StudyResult out = run_with_lambda0_check(spec, "norm-tracking", conditions, 0);
  out.paired.push_back(make_paired(out.conditions[1], out.conditions[0]));
  return out;
}

StudyResult run_lambda_sweep(const ScenarioSpec& spec, const std::vector<double>& grid) {
  if (grid.empty()) throw ConfigError("lambda sweep needs at least one lambda");
  std::vector<Condition> conditions;
  for (double lambda : grid)
    conditions.push_back({lambda_label(lambda), true,
                          with_lambda(spec.noise, lambda, spec.noise.distribution,
                                      spec.noise.scope),
                          FinetuneMethod::vanilla(), 1.0});
  // hidden no-noise twin checks the lambda=0 row (or stands alone if the grid
  // omits 0, in which case an extra lambda=0 twin joins it)
  std::size_t zero_index = grid.size();
  for (std::size_t i = 0; i < grid.size(); ++i)
    if (grid[i] == 0.0) zero_index = i;
  Condition no_noise{"__no_noise_twin", true, std::nullopt, FinetuneMethod::vanilla(), 1.0};
  std::vector<Condition> all = conditions;
  all.push_back(no_noise);
  bool added_zero_twin = false;
  if (zero_index == grid.size()) {
    all.push_back({"__lambda0_twin", true,
                   with_lambda(spec.noise, 0.0, spec.noise.distribution, spec.noise.scope),
                   FinetuneMethod::vanilla(), 1.0});
    added_zero_twin = true;
  }
  auto results = run_conditions(spec, all);
  StudyResult out;
  out.study = "lambda-sweep";
  out.scenario = spec;
  out.lambdas = grid;
  const std::size_t twin = conditions.size();
  out.lambda0_check = added_zero_twin ? runs_identical(results[twin], results[twin + 1])
                                      : runs_identical(results[zero_index], results[twin]);
  results.resize(conditions.size());
  out.conditions = std::move(results);
  if (zero_index < grid.size()) {
    for (std::size_t i = 0; i < out.conditions.size(); ++i)
      if (i != zero_index)
        out.paired.push_back(make_paired(out.conditions[i], out.conditions[zero_index]));
  }
  return out;
}

StudyResult run_study_by_name(const ScenarioSpec& spec, const std::string& name) {
  if (name == "main") return run_main_comparison(spec);
  if (name == "noise-types") return run_noise_type_study(spec);
  if (name == "combination") return run_combination_study(spec);
  if (name == "data-fraction") return run_data_fraction_study(spec);
  if (name == "norm-tracking") return run_norm_tracking(spec);
  if (name == "lambda-sweep") return run_lambda_sweep(spec);
  std::string valid;
  for (const char* n : kStudyNames) valid += std::string(" ") + n;
  throw ConfigError("unknown study '" + name + "'; valid studies:" + valid);
}

std::string study_csv(const StudyResult& result) {
  std::string csv;
  if (result.study == "norm-tracking") {
    csv = "epoch,group,condition,mean_l1_relative_change\n";
    const std::int64_t epochs = result.scenario.finetune.epochs;
    for (std::int64_t epoch = 0; epoch <= epochs; ++epoch) {
      for (const char* group : kParamGroups) {
        for (const auto& cond : result.conditions) {
          double mean = 0.0;
          if (epoch > 0) {
            std::vector<double> vals;
            for (const auto& run : cond.runs) {
              const auto& by_group =
                  run.trajectory.epoch_l1_change[static_cast<std::size_t>(epoch - 1)].by_group;
              const auto it = by_group.find(group);
              vals.push_back(it == by_group.end() ? 0.0 : it->second);
            }
            mean = mean_of(vals);
          }
          csv += std::to_string(epoch) + "," + group + "," + cond.condition.label + "," +
                 format_double("%.9g", mean) + "\n";
        }
      }
    }
    return csv;
  }
  if (result.study == "data-fraction") {
    csv = "fraction,condition,mean_accuracy,std_accuracy,n_seeds\n";
    for (const auto& cond : result.conditions)
      csv += format_double("%g", cond.condition.fraction) + "," + cond.condition.label + "," +
             format_double("%.6f", cond.mean_accuracy) + "," +
             format_double("%.6f", cond.std_accuracy) + "," +
             std::to_string(cond.runs.size()) + "\n";
    return csv;
  }
  if (result.study == "lambda-sweep") {
    csv = "lambda,mean_accuracy,std_accuracy,n_seeds\n";
    for (std::size_t i = 0; i < result.conditions.size(); ++i)
      csv += format_double("%g", result.lambdas[i]) + "," +
             format_double("%.6f", result.conditions[i].mean_accuracy) + "," +
             format_double("%.6f", result.conditions[i].std_accuracy) + "," +
             std::to_string(result.conditions[i].runs.size()) + "\n";
    return csv;
  }
  csv = "condition,mean_accuracy,std_accuracy,n_seeds\n";
  for (const auto& cond : result.conditions)
    csv += cond.condition.label + "," + format_double("%.6f", cond.mean_accuracy) + "," +
           format_double("%.6f", cond.std_accuracy) + "," + std::to_string(cond.runs.size()) +
           "\n";
  return csv;
}

nlohmann::json study_json(const StudyResult& result) {
  nlohmann::json j;
  j["study"] = result.study;
  j["spec_hash"] = result.scenario.spec_hash();
  j["scenario"] = result.scenario.to_json();
  j["seeds"] = result.scenario.seeds;
  j["lambda0_check"] = result.lambda0_check;
  if (!result.fractions.empty()) j["fractions"] = result.fractions;
  if (!result.lambdas.empty()) j["lambdas"] = result.lambdas;
  j["conditions"] = nlohmann::json::array();
  for (const auto& cond : result.conditions) {
    nlohmann::json c;
    c["label"] = cond.condition.label;
    c["fraction"] = cond.condition.fraction;
    c["pretrained_init"] = cond.condition.pretrained_init;
    if (cond.condition.noise.has_value()) c["noise"] = serde::to_json(*cond.condition.noise);
    c["method"] = serde::to_json(cond.condition.method);
    c["mean_accuracy"] = cond.mean_accuracy;
    c["std_accuracy"] = cond.std_accuracy;
    c["per_seed"] = nlohmann::json::array();
    for (const auto& run : cond.runs) {
      nlohmann::json r;
      r["seed"] = run.seed;
      r["final_accuracy"] = run.final_accuracy;
      r["trajectory"] = serde::to_json(run.trajectory);
      c["per_seed"].push_back(r);
    }
    j["conditions"].push_back(c);
  }
  j["paired"] = nlohmann::json::array();
  for (const auto& p : result.paired)
    j["paired"].push_back({{"a", p.a},
                           {"b", p.b},
                           {"per_seed_diff", p.per_seed},
                           {"mean_diff", p.mean},
                           {"std_diff", p.stddev}});
  return j;
}

std::string write_study(const StudyResult& result, const std::string& out_dir) {
  const std::string run_dir = out_dir + "/" + result.scenario.spec_hash();
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) throw IoError("cannot create run directory " + run_dir + ": " + ec.message());

  const std::string stem = study_file_stem(result.study);
  write_text_file(run_dir + "/" + stem + ".csv", study_csv(result));
  write_text_file(run_dir + "/" + stem + ".json", study_json(result).dump(2) + "\n");

  const std::string manifest_path = run_dir + "/manifest.json";
  nlohmann::json manifest;
  if (fs::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    try {
      manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception&) {
      manifest = nlohmann::json::object();
    }
  }
  manifest["version"] = 1;
  manifest["spec_hash"] = result.scenario.spec_hash();
  manifest["seeds"] = result.scenario.seeds;
  manifest["studies"][result.study] = {{"files", {stem + ".csv", stem + ".json"}}};
  write_text_file(manifest_path, manifest.dump(2) + "\n");
  return run_dir;
}

std::string render_run_dir(const std::string& run_dir) {
  const std::string manifest_path = run_dir + "/manifest.json";
  if (!fs::exists(manifest_path))
    throw IoError("no manifest.json in run directory: " + run_dir);
  std::ifstream in(manifest_path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("unreadable manifest in " + run_dir + ": " + e.what());
  }

  std::string text;
  text += "run " + manifest.value("spec_hash", std::string("?")) + " (" +
          std::to_string(manifest.value("seeds", std::vector<std::uint64_t>{}).size()) +
          " seeds)\n";
  if (!manifest.contains("studies")) return text;
  for (const auto& [study, entry] : manifest.at("studies").items()) {
    const std::string csv_path = run_dir + "/" + study_file_stem(study) + ".csv";
    std::ifstream csv_in(csv_path);
    if (!csv_in) throw IoError("manifest lists missing file: " + csv_path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(csv_in, line)) {
      std::vector<std::string> cells;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      rows.push_back(cells);
    }
    std::vector<std::size_t> width;
    for (const auto& row : rows)
      for (std::size_t i = 0; i < row.size(); ++i) {
        if (width.size() <= i) width.resize(i + 1, 0);
        width[i] = std::max(width[i], row[i].size());
      }
    text += "\n== " + study + " ==\n";
    for (const auto& row : rows) {
      std::string out_line;
      for (std::size_t i = 0; i < row.size(); ++i) {
        std::string cell = row[i];
        cell.resize(width[i], ' ');
        out_line += cell;
        if (i + 1 < row.size()) out_line += "  ";
      }
      while (!out_line.empty() && out_line.back() == ' ') out_line.pop_back();
      text += out_line + "\n";
    }
    (void)entry;
  }
  return text;
}

}  // namespace ntk
