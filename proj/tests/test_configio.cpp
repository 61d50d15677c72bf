#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "ntk/common.hpp"
#include "ntk/configio.hpp"
#include "ntk/expbench.hpp"
#include "ntk/serde.hpp"

using namespace ntk;

TEST_CASE("toml subset: tables, scalars, arrays, comments") {
  const std::string text = R"(# a comment
top = 3
name = "hello \"quoted\""
flag = true
ratio = -0.25
big = 1e3

[table]
value = 7  # trailing comment
items = [1, 2, 3]
names = ["a", "b"]
empty = []
multi = [
  1.5,
  2.5,
]

[table.sub]
deep = false
)";
  nlohmann::json doc = parse_toml(text);
  CHECK(doc["top"] == 3);
  CHECK(doc["name"] == "hello \"quoted\"");
  CHECK(doc["flag"] == true);
  CHECK(doc["ratio"] == -0.25);
  CHECK(doc["big"] == 1000.0);
  CHECK(doc["table"]["value"] == 7);
  CHECK(doc["table"]["items"] == nlohmann::json({1, 2, 3}));
  CHECK(doc["table"]["names"] == nlohmann::json({"a", "b"}));
  CHECK(doc["table"]["empty"].is_array());
  CHECK(doc["table"]["empty"].empty());
  CHECK(doc["table"]["multi"] == nlohmann::json({1.5, 2.5}));
  CHECK(doc["table"]["sub"]["deep"] == false);
}

TEST_CASE("toml parse errors name the line") {
  try {
    parse_toml("a = 1\nb = = 2\n");
    FAIL("expected parse error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_toml("x = \"unterminated"), ConfigError);
  CHECK_THROWS_AS(parse_toml("x = [1, 2"), ConfigError);
  CHECK_THROWS_AS(parse_toml("x = zzz"), ConfigError);
}

TEST_CASE("the default scenario file matches the built-in defaults") {
  nlohmann::json base = ScenarioSpec::desk_default().to_json();
  nlohmann::json doc = base;
  merge_into(doc, load_config_file(std::string(NTK_SOURCE_DIR) + "/scenarios/default.toml"));
  ScenarioSpec from_file = ScenarioSpec::from_json(doc);
  CHECK(from_file.to_json() == base);
  CHECK(from_file.spec_hash() == ScenarioSpec::desk_default().spec_hash());
}

TEST_CASE("json and toml configs agree") {
  nlohmann::json toml_doc =
      load_config_file(std::string(NTK_SOURCE_DIR) + "/scenarios/smoke.toml");
  const std::string json_path = "/tmp/ntk_smoke_copy.json";
  std::ofstream(json_path) << toml_doc.dump();
  nlohmann::json json_doc = load_config_file(json_path);
  CHECK(toml_doc == json_doc);
  CHECK_THROWS_AS(load_config_file("/tmp/ntk_config.yaml"), ConfigError);
  CHECK_THROWS_AS(load_config_file("/tmp/does_not_exist.toml"), IoError);
}

TEST_CASE("dotted overrides require existing keys") {
  nlohmann::json doc = ScenarioSpec::desk_default().to_json();
  apply_override(doc, "noise.lambda=0.3");
  CHECK(doc["noise"]["lambda"] == 0.3);
  apply_override(doc, "noise.exclude=[\"embed*\"]");
  CHECK(doc["noise"]["exclude"] == nlohmann::json({"embed*"}));
  apply_override(doc, "seeds=[1,2]");
  CHECK(doc["seeds"] == nlohmann::json({1, 2}));
  apply_override(doc, "noise.distribution=gaussian");  // bare string value
  CHECK(doc["noise"]["distribution"] == "gaussian");

  CHECK_THROWS_AS(apply_override(doc, "noise.nonexistent=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "nope=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "justakey"), ConfigError);

  // overrides happen before validation, so bad values still get caught
  apply_override(doc, "noise.lambda=-1");
  CHECK_THROWS_AS(ScenarioSpec::from_json(doc).validate(), ValidationError);
}

TEST_CASE("scenario rejects unknown keys loudly") {
  nlohmann::json doc = ScenarioSpec::desk_default().to_json();
  doc["typo_key"] = 1;
  CHECK_THROWS_AS(ScenarioSpec::from_json(doc), ConfigError);
  doc.erase("typo_key");
  doc["noise"]["lamda"] = 0.2;
  CHECK_THROWS_AS(ScenarioSpec::from_json(doc), ConfigError);
}

TEST_CASE("noise spec json round trip matches the documented shape") {
  NoiseSpec spec;
  spec.lambda = 0.15;
  spec.exclude = {"embed*"};
  spec.seed = 42;
  nlohmann::json j = serde::to_json(spec);
  CHECK(j["lambda"] == 0.15);
  CHECK(j["distribution"] == "uniform");
  CHECK(j["scope"] == "matrix");
  CHECK(j["exclude"] == nlohmann::json({"embed*"}));
  CHECK(j["seed"] == 42);
  NoiseSpec back = serde::noise_spec_from_json(j);
  CHECK(back.lambda == spec.lambda);
  CHECK(back.exclude == spec.exclude);
  CHECK(back.seed == spec.seed);
}
