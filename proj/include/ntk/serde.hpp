#pragma once

#include <json.hpp>

#include "ntk/perturb.hpp"
#include "ntk/tensorstore.hpp"
#include "ntk/toymodel.hpp"
#include "ntk/trainkit.hpp"

// JSON codecs for the config and report types. Readers start from the given
// defaults, apply only the keys present, and reject unknown keys so config
// typos fail loudly.
namespace ntk::serde {

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig defaults = {});

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults = {});

nlohmann::json to_json(const NoiseSpec& s);
NoiseSpec noise_spec_from_json(const nlohmann::json& j, NoiseSpec defaults = {});

nlohmann::json to_json(const FinetuneMethod& m);
FinetuneMethod method_from_json(const nlohmann::json& j, FinetuneMethod defaults = {});

nlohmann::json to_json(const PerturbReport& r);

nlohmann::json to_json(const MetricTrajectory& t);
std::string trajectory_csv(const MetricTrajectory& t);

nlohmann::json to_json(const DiffReport& d);

}  // namespace ntk::serde
