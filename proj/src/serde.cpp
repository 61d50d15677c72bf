#include "ntk/serde.hpp"

#include <set>

#include "ntk/common.hpp"

namespace ntk::serde {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                    const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (known.find(key) == known.end())
      throw ConfigError(std::string("unknown key '") + key + "' in " + what);
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
  }
}

}  // namespace

nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
          {"n_heads", c.n_heads},       {"d_ffn", c.d_ffn},
          {"max_seq_len", c.max_seq_len}, {"n_classes", c.n_classes},
          {"init_profile", c.init_profile}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig defaults) {
  reject_unknown(j, {"vocab_size", "d_model", "n_heads", "d_ffn", "max_seq_len", "n_classes",
                     "init_profile"},
                 "model config");
  ModelConfig c = defaults;
  read(j, "vocab_size", c.vocab_size);
  read(j, "d_model", c.d_model);
  read(j, "n_heads", c.n_heads);
  read(j, "d_ffn", c.d_ffn);
  read(j, "max_seq_len", c.max_seq_len);
  read(j, "n_classes", c.n_classes);
  if (j.contains("init_profile")) {
    for (const auto& [group, stddev] : j.at("init_profile").items())
      c.init_profile[group] = stddev.get<double>();
  }
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},         {"epochs", c.epochs}, {"batch_size", c.batch_size},
          {"beta1", c.beta1},   {"beta2", c.beta2},   {"eps", c.eps},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults) {
  reject_unknown(j, {"lr", "epochs", "batch_size", "beta1", "beta2", "eps", "seed"},
                 "train config");
  TrainConfig c = defaults;
  read(j, "lr", c.lr);
  read(j, "epochs", c.epochs);
  read(j, "batch_size", c.batch_size);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "eps", c.eps);
  read(j, "seed", c.seed);
  return c;
}

nlohmann::json to_json(const NoiseSpec& s) {
  return {{"lambda", s.lambda},
          {"distribution", to_string(s.distribution)},
          {"scope", to_string(s.scope)},
          {"exclude", s.exclude},
          {"seed", s.seed}};
}

NoiseSpec noise_spec_from_json(const nlohmann::json& j, NoiseSpec defaults) {
  reject_unknown(j, {"lambda", "distribution", "scope", "exclude", "seed"}, "noise spec");
  NoiseSpec s = defaults;
  read(j, "lambda", s.lambda);
  if (j.contains("distribution"))
    s.distribution = distribution_from_string(j.at("distribution").get<std::string>());
  if (j.contains("scope")) s.scope = scope_from_string(j.at("scope").get<std::string>());
  read(j, "exclude", s.exclude);
  read(j, "seed", s.seed);
  return s;
}

nlohmann::json to_json(const FinetuneMethod& m) {
  nlohmann::json j{{"variant", method_label(m)}};
  if (m.kind == MethodKind::Mixout) j["p"] = m.mixout_p;
  if (m.kind == MethodKind::RecAdam) {
    j["anneal_a"] = m.anneal_a;
    j["anneal_t0"] = m.anneal_t0;
    j["penalty_weight"] = m.penalty_weight;
  }
  return j;
}

FinetuneMethod method_from_json(const nlohmann::json& j, FinetuneMethod defaults) {
  reject_unknown(j, {"variant", "p", "anneal_a", "anneal_t0", "penalty_weight"},
                 "finetune method");
  FinetuneMethod m = defaults;
  if (j.contains("variant")) {
    const std::string v = j.at("variant").get<std::string>();
    if (v == "vanilla") m.kind = MethodKind::Vanilla;
    else if (v == "mixout") m.kind = MethodKind::Mixout;
    else if (v == "recadam") m.kind = MethodKind::RecAdam;
    else throw ConfigError("unknown finetune method '" + v + "'");
  }
  read(j, "p", m.mixout_p);
  read(j, "anneal_a", m.anneal_a);
  read(j, "anneal_t0", m.anneal_t0);
  read(j, "penalty_weight", m.penalty_weight);
  return m;
}

nlohmann::json to_json(const PerturbReport& r) {
  nlohmann::json j;
  j["spec"] = to_json(r.spec);
  j["seed"] = r.spec.seed;
  if (r.pooled_std.has_value()) j["pooled_std"] = *r.pooled_std;
  j["tensors"] = nlohmann::json::array();
  for (const auto& rec : r.records)
    j["tensors"].push_back({{"name", rec.name},
                            {"std", rec.std},
                            {"scale", rec.scale},
                            {"status", to_string(rec.status)}});
  return j;
}

nlohmann::json to_json(const MetricTrajectory& t) {
  nlohmann::json j;
  j["start_accuracy"] = t.start_accuracy;
  j["final_accuracy"] = t.final_accuracy;
  j["step_loss"] = t.step_loss;
  j["epoch_eval_accuracy"] = t.epoch_eval_accuracy;
  j["epoch_l1_change"] = nlohmann::json::array();
  for (const auto& e : t.epoch_l1_change) {
    nlohmann::json entry;
    entry["by_group"] = e.by_group;
    entry["zero_baseline_groups"] = e.zero_baseline_groups;
    j["epoch_l1_change"].push_back(entry);
  }
  return j;
}

std::string trajectory_csv(const MetricTrajectory& t) {
  std::string csv = "epoch,eval_accuracy,mean_step_loss";
  for (const char* g : kParamGroups) csv += std::string(",l1_") + g;
  csv += "\n";
  const std::size_t epochs = t.epoch_eval_accuracy.size();
  const std::size_t steps_per_epoch = epochs == 0 ? 0 : t.step_loss.size() / epochs;
  for (std::size_t e = 0; e < epochs; ++e) {
    double loss = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s)
      loss += t.step_loss[e * steps_per_epoch + s];
    if (steps_per_epoch > 0) loss /= static_cast<double>(steps_per_epoch);
    csv += std::to_string(e + 1) + "," + format_double("%.6f", t.epoch_eval_accuracy[e]) + "," +
           format_double("%.6f", loss);
    for (const char* g : kParamGroups) {
      const auto it = t.epoch_l1_change[e].by_group.find(g);
      csv += "," + format_double("%.9g", it == t.epoch_l1_change[e].by_group.end() ? 0.0
                                                                                   : it->second);
    }
    csv += "\n";
  }
  return csv;
}

nlohmann::json to_json(const DiffReport& d) {
  nlohmann::json j;
  j["tensors"] = nlohmann::json::array();
  for (const auto& t : d.tensors)
    j["tensors"].push_back(
        {{"name", t.name}, {"max_abs", t.max_abs}, {"mean_abs", t.mean_abs}});
  j["only_in_a"] = d.only_in_a;
  j["only_in_b"] = d.only_in_b;
  j["shape_mismatch"] = d.shape_mismatch;
  j["identical"] = d.identical();
  return j;
}

}  // namespace ntk::serde
