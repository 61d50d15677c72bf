#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "ntk/common.hpp"
#include "ntk/configio.hpp"
#include "ntk/expbench.hpp"
#include "ntk/serde.hpp"

using namespace ntk;
namespace fs = std::filesystem;

namespace {

ScenarioSpec smoke_scenario() {
  nlohmann::json doc = ScenarioSpec::desk_default().to_json();
  merge_into(doc, load_config_file(std::string(NTK_SOURCE_DIR) + "/scenarios/smoke.toml"));
  return ScenarioSpec::from_json(doc);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::string fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ntk_expbench_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

}  // namespace

TEST_CASE("pretraining corpus: determinism, masking, warnings") {
  ScenarioSpec spec = smoke_scenario();
  MlmDataset a = gen_pretrain_corpus(spec);
  MlmDataset b = gen_pretrain_corpus(spec);
  CHECK(a.tokens == b.tokens);
  CHECK(a.targets == b.targets);
  CHECK(a.warnings.empty());
  CHECK(a.size() == spec.corpus.n_sequences);

  const auto mask_token = static_cast<std::int32_t>(spec.model.vocab_size - 1);
  std::int64_t masked = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    std::int64_t in_seq = 0;
    for (std::int64_t p = 0; p < a.seq_len; ++p) {
      const auto idx = static_cast<std::size_t>(i * a.seq_len + p);
      if (a.targets[idx] >= 0) {
        CHECK(a.tokens[idx] == mask_token);
        CHECK(a.targets[idx] < mask_token);  // original ids are regular tokens
        ++in_seq;
      } else {
        CHECK(a.tokens[idx] != mask_token);
      }
    }
    CHECK(in_seq >= 1);  // every sequence stays trainable
    masked += in_seq;
  }
  const double rate =
      static_cast<double>(masked) / static_cast<double>(a.size() * a.seq_len);
  CHECK(rate == doctest::Approx(spec.corpus.mask_rate).epsilon(0.15));

  ScenarioSpec no_mask = spec;
  no_mask.corpus.mask_rate = 0.0;
  MlmDataset unmasked = gen_pretrain_corpus(no_mask);
  REQUIRE(unmasked.warnings.size() == 1);
  for (auto t : unmasked.targets) CHECK(t == -1);
}

TEST_CASE("empirical bigrams match the transition matrix within 2% TV") {
  ScenarioSpec spec = smoke_scenario();
  spec.model.vocab_size = 13;  // 12 regular tokens
  spec.corpus.n_sequences = 20000;
  spec.corpus.seq_len = 16;
  spec.model.max_seq_len = 16;
  spec.corpus.mask_rate = 0.0;
  const std::int64_t v = regular_vocab(spec.model);
  const auto t = pretrain_transition(spec);
  MlmDataset corpus = gen_pretrain_corpus(spec);

  std::vector<double> joint(static_cast<std::size_t>(v * v), 0.0);
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < corpus.size(); ++i) {
    const auto* s = corpus.tokens.data() + i * corpus.seq_len;
    for (std::int64_t p = 0; p + 1 < corpus.seq_len; ++p) {
      joint[static_cast<std::size_t>(s[p] * v + s[p + 1])] += 1.0;
      ++n;
    }
  }
  std::vector<double> row(static_cast<std::size_t>(v), 0.0);
  for (std::int64_t i = 0; i < v; ++i)
    for (std::int64_t j = 0; j < v; ++j) row[static_cast<std::size_t>(i)] += joint[static_cast<std::size_t>(i * v + j)];
  double tv = 0.0;
  for (std::int64_t i = 0; i < v; ++i)
    for (std::int64_t j = 0; j < v; ++j)
      tv += std::abs(joint[static_cast<std::size_t>(i * v + j)] / static_cast<double>(n) -
                     row[static_cast<std::size_t>(i)] / static_cast<double>(n) *
                         t[static_cast<std::size_t>(i * v + j)]);
  CHECK(tv / 2.0 < 0.02);
}

TEST_CASE("downstream at delta 0 is marginally indistinguishable from the corpus") {
  ScenarioSpec spec = smoke_scenario();
  spec.model.vocab_size = 13;
  spec.corpus.n_sequences = 20000;
  spec.corpus.seq_len = 16;
  spec.model.max_seq_len = 16;
  spec.corpus.mask_rate = 0.0;
  spec.downstream.delta = 0.0;
  spec.downstream.n_train = 4000;
  spec.downstream.n_eval = 4000;
  const std::int64_t v = regular_vocab(spec.model);

  MlmDataset corpus = gen_pretrain_corpus(spec);
  std::vector<double> corpus_marginal(static_cast<std::size_t>(v), 0.0);
  for (auto tok : corpus.tokens) corpus_marginal[static_cast<std::size_t>(tok)] += 1.0;
  for (auto& x : corpus_marginal) x /= static_cast<double>(corpus.tokens.size());

  DownstreamData dd = gen_downstream(spec, 3);
  std::vector<double> down_marginal(static_cast<std::size_t>(v), 0.0);
  std::int64_t n = 0;
  for (auto tok : dd.train.tokens) {
    down_marginal[static_cast<std::size_t>(tok)] += 1.0;
    ++n;
  }
  for (auto tok : dd.eval.tokens) {
    down_marginal[static_cast<std::size_t>(tok)] += 1.0;
    ++n;
  }
  for (auto& x : down_marginal) x /= static_cast<double>(n);

  double tv = 0.0;
  for (std::int64_t j = 0; j < v; ++j)
    tv += std::abs(down_marginal[static_cast<std::size_t>(j)] -
                   corpus_marginal[static_cast<std::size_t>(j)]);
  CHECK(tv / 2.0 < 0.01);
}

TEST_CASE("downstream splits are deterministic, balanced, and disjoint") {
  ScenarioSpec spec = smoke_scenario();
  DownstreamData a = gen_downstream(spec, 11);
  DownstreamData b = gen_downstream(spec, 11);
  CHECK(a.train.tokens == b.train.tokens);
  CHECK(a.train.labels == b.train.labels);
  CHECK(a.eval.tokens == b.eval.tokens);

  DownstreamData other = gen_downstream(spec, 12);
  CHECK(a.train.tokens != other.train.tokens);

  CHECK(a.train.size() == spec.downstream.n_train);
  CHECK(a.eval.size() == spec.downstream.n_eval);

  const std::int64_t k = spec.downstream.n_classes;
  std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
  for (auto label : a.eval.labels) counts[static_cast<std::size_t>(label)] += 1;
  const double uniform = static_cast<double>(spec.downstream.n_eval) / static_cast<double>(k);
  for (auto c : counts) CHECK(std::abs(static_cast<double>(c) - uniform) <= 0.1 * uniform + 1.0);

  // disjoint: no train sequence appears in eval
  std::set<std::vector<std::int32_t>> train_set;
  for (std::int64_t i = 0; i < a.train.size(); ++i)
    train_set.insert(std::vector<std::int32_t>(a.train.tokens.begin() + i * a.train.seq_len,
                                               a.train.tokens.begin() + (i + 1) * a.train.seq_len));
  for (std::int64_t i = 0; i < a.eval.size(); ++i) {
    std::vector<std::int32_t> seq(a.eval.tokens.begin() + i * a.eval.seq_len,
                                  a.eval.tokens.begin() + (i + 1) * a.eval.seq_len);
    CHECK(train_set.find(seq) == train_set.end());
  }

  // labels recompute from the bucket map
  const auto buckets = bucket_map(spec);
  for (std::int64_t i = 0; i < a.train.size(); ++i)
    CHECK(a.train.labels[static_cast<std::size_t>(i)] ==
          label_of(a.train.tokens.data() + i * a.train.seq_len, a.train.seq_len, buckets,
                   bucket_count(spec.downstream), k));
}

TEST_CASE("subsampling takes a deterministic nested prefix") {
  ScenarioSpec spec = smoke_scenario();
  spec.downstream.n_train = 32;
  DownstreamData dd = gen_downstream(spec, 4);
  ClsDataset quarter = subsample_train(dd.train, 0.25, 4);
  CHECK(quarter.size() == 8);
  ClsDataset half = subsample_train(dd.train, 0.5, 4);
  CHECK(half.size() == 16);
  // nesting: the quarter is a prefix of the half
  for (std::int64_t i = 0; i < quarter.size() * quarter.seq_len; ++i)
    CHECK(quarter.tokens[static_cast<std::size_t>(i)] == half.tokens[static_cast<std::size_t>(i)]);
  ClsDataset all = subsample_train(dd.train, 1.0, 4);
  CHECK(all.size() == 32);
  CHECK(all.tokens == dd.train.tokens);
  CHECK_THROWS_AS(subsample_train(dd.train, 0.0, 4), ValidationError);
}

TEST_CASE("main comparison: labels, lambda0 check, and paired diffs") {
  ScenarioSpec spec = smoke_scenario();
  StudyResult result = run_main_comparison(spec);
  REQUIRE(result.conditions.size() == 2);
  CHECK(result.conditions[0].condition.label == "no-noise");
  CHECK(result.conditions[1].condition.label == "noisytune");
  CHECK(result.lambda0_check);
  REQUIRE(result.paired.size() == 1);
  CHECK(result.paired[0].a == "noisytune");
  CHECK(result.paired[0].per_seed.size() == spec.seeds.size());
  for (const auto& cond : result.conditions)
    CHECK(cond.runs.size() == spec.seeds.size());

  const std::string csv = study_csv(result);
  CHECK(csv.find("condition,mean_accuracy,std_accuracy,n_seeds\n") == 0);
  CHECK(csv.find("no-noise,") != std::string::npos);
}

TEST_CASE("noise-type study emits the five conditions in the canonical order") {
  ScenarioSpec spec = smoke_scenario();
  StudyResult result = run_noise_type_study(spec);
  REQUIRE(result.conditions.size() == 5);
  CHECK(result.conditions[0].condition.label == "no-noise");
  CHECK(result.conditions[1].condition.label == "global-gaussian");
  CHECK(result.conditions[2].condition.label == "global-uniform");
  CHECK(result.conditions[3].condition.label == "matrix-gaussian");
  CHECK(result.conditions[4].condition.label == "matrix-uniform");
  CHECK(result.lambda0_check);
}

TEST_CASE("combination study: six rows, consistency with main, mixout p=1 projection") {
  ScenarioSpec spec = smoke_scenario();
  StudyResult combo = run_combination_study(spec);
  REQUIRE(combo.conditions.size() == 6);
  CHECK(combo.conditions[0].condition.label == "vanilla");
  CHECK(combo.conditions[1].condition.label == "vanilla+noisytune");
  CHECK(combo.conditions[5].condition.label == "recadam+noisytune");

  StudyResult main_result = run_main_comparison(spec);
  // vanilla-without row equals the main comparison's no-noise row, seed by seed
  for (std::size_t i = 0; i < spec.seeds.size(); ++i)
    CHECK(combo.conditions[0].runs[i].final_accuracy ==
          main_result.conditions[0].runs[i].final_accuracy);

  // mixout with p=1 projects every step back onto the start
  std::vector<Condition> degenerate;
  degenerate.push_back({"mixout-p1", true, std::nullopt, FinetuneMethod::mixout(1.0), 1.0});
  auto runs = run_conditions(spec, degenerate);
  for (const auto& run : runs[0].runs)
    CHECK(run.final_accuracy == run.trajectory.start_accuracy);
}

TEST_CASE("data-fraction study covers the grid and reuses full-data rows") {
  ScenarioSpec spec = smoke_scenario();
  StudyResult result = run_data_fraction_study(spec, {0.5, 1.0});
  REQUIRE(result.conditions.size() == 4);
  CHECK(result.fractions == std::vector<double>{0.5, 1.0});
  CHECK(result.conditions[0].condition.fraction == 0.5);
  CHECK(result.conditions[2].condition.fraction == 1.0);
  CHECK(result.lambda0_check);

  StudyResult main_result = run_main_comparison(spec);
  for (std::size_t i = 0; i < spec.seeds.size(); ++i) {
    CHECK(result.conditions[2].runs[i].final_accuracy ==
          main_result.conditions[0].runs[i].final_accuracy);
    CHECK(result.conditions[3].runs[i].final_accuracy ==
          main_result.conditions[1].runs[i].final_accuracy);
  }
  const std::string csv = study_csv(result);
  CHECK(csv.find("fraction,condition,mean_accuracy,std_accuracy,n_seeds\n") == 0);
}

TEST_CASE("lambda sweep rows follow the grid with exact lambda0 equivalence") {
  ScenarioSpec spec = smoke_scenario();
  StudyResult result = run_lambda_sweep(spec, {0.0, 0.15});
  REQUIRE(result.conditions.size() == 2);
  CHECK(result.lambdas == std::vector<double>{0.0, 0.15});
  CHECK(result.lambda0_check);
  const std::string csv = study_csv(result);
  CHECK(csv.find("lambda,mean_accuracy,std_accuracy,n_seeds\n") == 0);
  CHECK(csv.find("\n0,") != std::string::npos);

  // a grid without 0 still gets the hidden lambda0-vs-no-noise check
  StudyResult no_zero = run_lambda_sweep(spec, {0.1});
  CHECK(no_zero.lambda0_check);
  CHECK(no_zero.paired.empty());
}

TEST_CASE("norm tracking emits a zero epoch-0 row and per-epoch group means") {
  ScenarioSpec spec = smoke_scenario();
  StudyResult result = run_norm_tracking(spec);
  const std::string csv = study_csv(result);
  CHECK(csv.find("epoch,group,condition,mean_l1_relative_change\n") == 0);
  CHECK(csv.find("0,embeddings,no-noise,0\n") != std::string::npos);
  CHECK(csv.find("0,heads,noisytune,0\n") != std::string::npos);
  // rows: header + (epochs+1) * groups * conditions
  std::int64_t lines = 0;
  for (char ch : csv)
    if (ch == '\n') ++lines;
  CHECK(lines == 1 + (spec.finetune.epochs + 1) * 5 * 2);
}

TEST_CASE("study outputs are byte-identical across reruns and thread counts") {
  ScenarioSpec spec = smoke_scenario();
  const std::string dir_a = fresh_dir("rerun_a");
  const std::string dir_b = fresh_dir("rerun_b");
  const std::string run_a = write_study(run_main_comparison(spec), dir_a);
  const std::string run_b = write_study(run_main_comparison(spec), dir_b);
  CHECK(slurp(run_a + "/main.csv") == slurp(run_b + "/main.csv"));
  CHECK(slurp(run_a + "/main.json") == slurp(run_b + "/main.json"));
  CHECK(slurp(run_a + "/manifest.json") == slurp(run_b + "/manifest.json"));
}

TEST_CASE("manifest merging and the text report") {
  ScenarioSpec spec = smoke_scenario();
  const std::string out = fresh_dir("report");
  const std::string run_dir = write_study(run_main_comparison(spec), out);
  write_study(run_lambda_sweep(spec, {0.0, 0.15}), out);

  nlohmann::json manifest = nlohmann::json::parse(slurp(run_dir + "/manifest.json"));
  CHECK(manifest["spec_hash"] == spec.spec_hash());
  CHECK(manifest["studies"].contains("main"));
  CHECK(manifest["studies"].contains("lambda-sweep"));

  const std::string text_a = render_run_dir(run_dir);
  const std::string text_b = render_run_dir(run_dir);
  CHECK(text_a == text_b);
  CHECK(text_a.find("== main ==") != std::string::npos);
  CHECK(text_a.find("== lambda-sweep ==") != std::string::npos);
  CHECK(text_a.find("no-noise") != std::string::npos);

  CHECK_THROWS_AS(render_run_dir(fresh_dir("empty")), IoError);
}

TEST_CASE("unknown study names list the valid ones") {
  ScenarioSpec spec = smoke_scenario();
  try {
    run_study_by_name(spec, "bogus");
    FAIL("expected config error");
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    for (const char* name : kStudyNames) CHECK(what.find(name) != std::string::npos);
  }
}

TEST_CASE("scenario validation catches inconsistent settings") {
  ScenarioSpec spec = smoke_scenario();
  spec.downstream.n_classes = 3;
  CHECK_THROWS_AS(spec.validate(), ValidationError);
  spec = smoke_scenario();
  spec.downstream.delta = 1.5;
  CHECK_THROWS_AS(spec.validate(), ValidationError);
  spec = smoke_scenario();
  spec.seeds.clear();
  CHECK_THROWS_AS(spec.validate(), ValidationError);
  spec = smoke_scenario();
  spec.downstream.n_train = 4;  // below the finetune batch size
  CHECK_THROWS_AS(spec.validate(), ValidationError);
  spec = smoke_scenario();
  spec.corpus.seq_len = spec.model.max_seq_len + 1;
  CHECK_THROWS_AS(spec.validate(), ValidationError);
}
