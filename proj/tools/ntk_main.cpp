// ntk: perturb checkpoints, pretrain/finetune the toy model, run studies.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <CLI11.hpp>
#include <json.hpp>

#include "ntk/common.hpp"
#include "ntk/configio.hpp"
#include "ntk/expbench.hpp"
#include "ntk/perturb.hpp"
#include "ntk/serde.hpp"
#include "ntk/tensorstore.hpp"
#include "ntk/trainkit.hpp"

namespace {

using namespace ntk;

void set_jobs(int jobs) {
  if (jobs <= 0) return;
#ifdef _OPENMP
  omp_set_num_threads(jobs);
#endif
}

ScenarioSpec load_scenario(const std::string& path, const std::vector<std::string>& overrides) {
  nlohmann::json doc = ScenarioSpec::desk_default().to_json();
  merge_into(doc, load_config_file(path));
  for (const auto& kv : overrides) apply_override(doc, kv);
  ScenarioSpec spec = ScenarioSpec::from_json(doc);
  spec.validate();
  return spec;
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << content;
  if (!out) throw IoError("write failure: " + path);
}

struct PerturbArgs {
  std::string input, output, spec_file, preset;
  std::optional<double> lambda;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> distribution, scope;
  std::vector<std::string> exclude;
  int jobs = 0;
};

int cmd_perturb(const PerturbArgs& args) {
  set_jobs(args.jobs);
  NoiseSpec spec;
  if (args.preset == "multilingual") spec = NoiseSpec::multilingual_preset();
  else if (!args.preset.empty()) throw ConfigError("unknown preset '" + args.preset + "'");
  if (!args.spec_file.empty())
    spec = serde::noise_spec_from_json(load_config_file(args.spec_file), spec);
  if (args.lambda.has_value()) spec.lambda = *args.lambda;
  if (args.seed.has_value()) spec.seed = *args.seed;
  if (args.distribution.has_value()) spec.distribution = distribution_from_string(*args.distribution);
  if (args.scope.has_value()) spec.scope = scope_from_string(*args.scope);
  if (!args.exclude.empty()) spec.exclude = args.exclude;
  spec.validate();

  Checkpoint in = load_checkpoint(args.input);
  auto [out, report] = perturb_checkpoint(in, spec);
  save_checkpoint(out, args.output);
  write_text(args.output + ".report.json", serde::to_json(report).dump(2) + "\n");
  std::printf("perturbed %zu tensors -> %s\n", out.tensors.size(), args.output.c_str());
  return 0;
}

struct PretrainArgs {
  std::string scenario, out;
  std::vector<std::string> overrides;
  int jobs = 0;
};

int cmd_pretrain(const PretrainArgs& args) {
  set_jobs(args.jobs);
  ScenarioSpec spec = load_scenario(args.scenario, args.overrides);
  ModelParams params = init_params(spec.model, spec.init_seed);
  MlmDataset corpus = gen_pretrain_corpus(spec);
  for (const auto& w : corpus.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  PretrainResult result = pretrain_mlm(params, corpus, spec.pretrain);
  for (std::size_t e = 0; e < result.epoch_mean_loss.size(); ++e)
    std::fprintf(stderr, "epoch %zu mean loss %.4f\n", e + 1, result.epoch_mean_loss[e]);
  Checkpoint ckpt = params_to_checkpoint(result.params);
  ckpt.metadata["model_config"] = serde::to_json(spec.model).dump();
  save_checkpoint(ckpt, args.out);
  std::printf("pretrained checkpoint -> %s (final loss %.4f)\n", args.out.c_str(),
              result.epoch_mean_loss.back());
  return 0;
}

struct FinetuneArgs {
  std::string scenario, ckpt, out_dir;
  std::string method = "vanilla";
  bool noisytune = false;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
  std::vector<std::string> overrides;
  int jobs = 0;
};

int cmd_finetune(const FinetuneArgs& args) {
  set_jobs(args.jobs);
  ScenarioSpec spec = load_scenario(args.scenario, args.overrides);
  if (args.lambda.has_value()) {
    spec.noise.lambda = *args.lambda;
    spec.noise.validate();
  }
  Checkpoint start = args.ckpt.empty() ? pretrained_checkpoint(spec) : load_checkpoint(args.ckpt);
  const std::uint64_t seed = args.seed.value_or(spec.seeds.front());

  if (args.noisytune) {
    NoiseSpec noise = spec.noise;
    noise.seed = seed;
    start = perturb_checkpoint(start, noise).first;
  }
  FinetuneMethod method;
  if (args.method == "vanilla") method = FinetuneMethod::vanilla();
  else if (args.method == "mixout") method = FinetuneMethod::mixout(0.1);
  else if (args.method == "recadam") method = FinetuneMethod::recadam(0.5, -1, 1.0);
  else throw ConfigError("unknown method '" + args.method + "' (vanilla|mixout|recadam)");

  DownstreamData data = gen_downstream(spec, seed);
  TrainConfig ft = spec.finetune;
  ft.seed = seed;
  FinetuneResult result = finetune(start, method, data.train, data.eval, ft, spec.model);

  std::error_code ec;
  std::filesystem::create_directories(args.out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + args.out_dir + ": " + ec.message());
  save_checkpoint(params_to_checkpoint(result.params), args.out_dir + "/final.ntk");
  write_text(args.out_dir + "/trajectory.csv", serde::trajectory_csv(result.trajectory));
  write_text(args.out_dir + "/trajectory.json",
             serde::to_json(result.trajectory).dump(2) + "\n");
  std::printf("final accuracy %.4f (start %.4f) -> %s\n", result.trajectory.final_accuracy,
              result.trajectory.start_accuracy, args.out_dir.c_str());
  return 0;
}

struct StudyArgs {
  std::string name, scenario;
  std::string out_dir = "runs";
  std::vector<double> fractions;
  std::vector<double> lambdas;
  std::vector<std::string> overrides;
  std::optional<double> lambda;
  int jobs = 0;
};

int cmd_study(const StudyArgs& args) {
  set_jobs(args.jobs);
  ScenarioSpec spec = load_scenario(args.scenario, args.overrides);
  if (args.lambda.has_value()) {
    spec.noise.lambda = *args.lambda;
    spec.noise.validate();
  }
  StudyResult result;
  if (args.name == "data-fraction" && !args.fractions.empty())
    result = run_data_fraction_study(spec, args.fractions);
  else if (args.name == "lambda-sweep" && !args.lambdas.empty())
    result = run_lambda_sweep(spec, args.lambdas);
  else
    result = run_study_by_name(spec, args.name);
  const std::string run_dir = write_study(result, args.out_dir);
  std::printf("%s\n", run_dir.c_str());
  return 0;
}

int cmd_report(const std::string& run_dir) {
  std::fputs(render_run_dir(run_dir).c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"checkpoint perturbation toolkit and finetuning lab"};
  app.require_subcommand(1);

  PerturbArgs perturb_args;
  auto* perturb = app.add_subcommand("perturb", "add std-scaled noise to a checkpoint");
  perturb->add_option("input", perturb_args.input, "input checkpoint")->required();
  perturb->add_option("output", perturb_args.output, "output checkpoint")->required();
  perturb->add_option("--spec", perturb_args.spec_file, "noise spec file (.toml/.json)");
  perturb->add_option("--preset", perturb_args.preset, "named preset (multilingual)");
  double lambda_flag = 0.0;
  auto* lambda_opt = perturb->add_option("--lambda", lambda_flag, "noise intensity");
  std::uint64_t seed_flag = 0;
  auto* seed_opt = perturb->add_option("--seed", seed_flag, "noise seed");
  std::string dist_flag, scope_flag;
  auto* dist_opt = perturb->add_option("--distribution", dist_flag, "uniform|gaussian");
  auto* scope_opt = perturb->add_option("--scope", scope_flag, "matrix|global");
  perturb->add_option("--exclude", perturb_args.exclude, "name patterns to skip ('*' wildcard)");
  perturb->add_option("--jobs", perturb_args.jobs, "worker thread cap");

  PretrainArgs pretrain_args;
  auto* pretrain = app.add_subcommand("pretrain", "pretrain the toy model on a synthetic corpus");
  pretrain->add_option("--scenario", pretrain_args.scenario, "scenario file")->required();
  pretrain->add_option("--out", pretrain_args.out, "output checkpoint path")->required();
  pretrain->add_option("--set", pretrain_args.overrides, "dotted.key=value override");
  pretrain->add_option("--jobs", pretrain_args.jobs, "worker thread cap");

  FinetuneArgs finetune_args;
  auto* finetune = app.add_subcommand("finetune", "finetune on the downstream task");
  finetune->add_option("--scenario", finetune_args.scenario, "scenario file")->required();
  finetune->add_option("--ckpt", finetune_args.ckpt, "start checkpoint (default: pretrain now)");
  finetune->add_option("--out-dir", finetune_args.out_dir, "output directory")->required();
  finetune->add_option("--method", finetune_args.method, "vanilla|mixout|recadam");
  finetune->add_flag("--noisytune", finetune_args.noisytune, "perturb before finetuning");
  std::uint64_t ft_seed = 0;
  auto* ft_seed_opt = finetune->add_option("--seed", ft_seed, "run seed");
  double ft_lambda = 0.0;
  auto* ft_lambda_opt = finetune->add_option("--lambda", ft_lambda, "noise intensity override");
  finetune->add_option("--set", finetune_args.overrides, "dotted.key=value override");
  finetune->add_option("--jobs", finetune_args.jobs, "worker thread cap");

  StudyArgs study_args;
  auto* study = app.add_subcommand("study", "run a full experiment study");
  study->add_option("name", study_args.name, "main|noise-types|combination|data-fraction|norm-tracking|lambda-sweep")
      ->required();
  study->add_option("scenario", study_args.scenario, "scenario file")->required();
  study->add_option("--out", study_args.out_dir, "output root (default: runs)");
  study->add_option("--fractions", study_args.fractions, "fractions for data-fraction");
  study->add_option("--lambdas", study_args.lambdas, "grid for lambda-sweep");
  double study_lambda = 0.0;
  auto* study_lambda_opt = study->add_option("--lambda", study_lambda, "noise intensity override");
  study->add_option("--set", study_args.overrides, "dotted.key=value override");
  study->add_option("--jobs", study_args.jobs, "worker thread cap");

  std::string report_dir;
  auto* report = app.add_subcommand("report", "render the tables in a run directory");
  report->add_option("run_dir", report_dir, "run directory with manifest.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }

  try {
    if (perturb->parsed()) {
      if (*lambda_opt) perturb_args.lambda = lambda_flag;
      if (*seed_opt) perturb_args.seed = seed_flag;
      if (*dist_opt) perturb_args.distribution = dist_flag;
      if (*scope_opt) perturb_args.scope = scope_flag;
      return cmd_perturb(perturb_args);
    }
    if (pretrain->parsed()) return cmd_pretrain(pretrain_args);
    if (finetune->parsed()) {
      if (*ft_seed_opt) finetune_args.seed = ft_seed;
      if (*ft_lambda_opt) finetune_args.lambda = ft_lambda;
      return cmd_finetune(finetune_args);
    }
    if (study->parsed()) {
      if (*study_lambda_opt) study_args.lambda = study_lambda;
      return cmd_study(study_args);
    }
    if (report->parsed()) return cmd_report(report_dir);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const DomainError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
