#pragma once

#include <string>

#include <json.hpp>

namespace ntk {

// Parses the TOML subset used by config files into a JSON document:
// [table] and [table.sub] headers, bare keys, strings with basic escapes,
// integers, floats, booleans, homogeneous arrays (multi-line allowed), and
// '#' comments. No inline tables, dates, or multi-line strings.
nlohmann::json parse_toml(const std::string& text);

// Loads a config by extension: .toml or .json.
nlohmann::json load_config_file(const std::string& path);

// Applies one "dotted.key=value" override. The dotted path must already exist
// in the document; the value is parsed as JSON when possible, else taken as a
// string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// Recursive overlay: objects merge key by key, anything else replaces.
void merge_into(nlohmann::json& base, const nlohmann::json& overlay);

}  // namespace ntk
