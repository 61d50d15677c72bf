#include "ntk/configio.hpp"

#include <cctype>
#include <fstream>

#include "ntk/common.hpp"

namespace ntk {

namespace {

struct TomlParser {
  const std::string& text;
  std::size_t pos = 0;
  std::size_t line = 1;

  explicit TomlParser(const std::string& t) : text(t) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("toml parse error at line " + std::to_string(line) + ": " + what);
  }

  bool eof() const { return pos >= text.size(); }
  char peek() const { return text[pos]; }

  char take() {
    char c = text[pos++];
    if (c == '\n') ++line;
    return c;
  }

  void skip_ws(bool cross_lines) {
    while (!eof()) {
      char c = peek();
      if (c == '#') {
        while (!eof() && peek() != '\n') take();
      } else if (c == ' ' || c == '\t' || c == '\r' || (cross_lines && c == '\n')) {
        take();
      } else {
        break;
      }
    }
  }

  std::string parse_bare_key() {
    std::string key;
    while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' ||
                      peek() == '-'))
      key += take();
    if (key.empty()) fail("expected a key");
    return key;
  }

  std::string parse_string() {
    take();  // opening quote
    std::string out;
    while (true) {
      if (eof()) fail("unterminated string");
      char c = take();
      if (c == '"') break;
      if (c == '\n') fail("newline in string");
      if (c == '\\') {
        if (eof()) fail("dangling escape");
        char e = take();
        switch (e) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case 'r': out += '\r'; break;
          case '"': out += '"'; break;
          case '\\': out += '\\'; break;
          default: fail(std::string("unsupported escape \\") + e);
        }
      } else {
        out += c;
      }
    }
    return out;
  }

  nlohmann::json parse_value() {
    skip_ws(false);
    if (eof()) fail("expected a value");
    char c = peek();
    if (c == '"') return parse_string();
    if (c == '[') {
      take();
      nlohmann::json arr = nlohmann::json::array();
      skip_ws(true);
      if (!eof() && peek() == ']') {
        take();
        return arr;
      }
      while (true) {
        arr.push_back(parse_value());
        skip_ws(true);
        if (eof()) fail("unterminated array");
        char d = take();
        if (d == ']') break;
        if (d != ',') fail("expected ',' or ']' in array");
        skip_ws(true);
        if (!eof() && peek() == ']') {  // trailing comma
          take();
          break;
        }
      }
      return arr;
    }
    std::string tok;
    while (!eof() && peek() != '\n' && peek() != ',' && peek() != ']' && peek() != '#' &&
           peek() != ' ' && peek() != '\t' && peek() != '\r')
      tok += take();
    if (tok == "true") return true;
    if (tok == "false") return false;
    if (tok.empty()) fail("expected a value");
    try {
      if (tok.find_first_of(".eEnif") == std::string::npos) {
        if (tok[0] == '-') return static_cast<std::int64_t>(std::stoll(tok));
        return static_cast<std::uint64_t>(std::stoull(tok));
      }
      std::size_t used = 0;
      double v = std::stod(tok, &used);
      if (used != tok.size()) fail("bad number '" + tok + "'");
      return v;
    } catch (const std::exception&) {
      fail("bad value '" + tok + "'");
    }
  }

  nlohmann::json parse_document() {
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* table = &root;
    while (true) {
      skip_ws(true);
      if (eof()) break;
      if (peek() == '[') {
        take();
        std::string path;
        table = &root;
        while (true) {
          std::string part = parse_bare_key();
          table = &(*table)[part];
          if (!table->is_object()) *table = nlohmann::json::object();
          if (eof()) fail("unterminated table header");
          char c = take();
          if (c == ']') break;
          if (c != '.') fail("expected '.' or ']' in table header");
          path += part + ".";
        }
        continue;
      }
      std::string key = parse_bare_key();
      skip_ws(false);
      if (eof() || take() != '=') fail("expected '=' after key '" + key + "'");
      (*table)[key] = parse_value();
      skip_ws(false);
      if (!eof() && peek() != '\n') fail("trailing characters after value for '" + key + "'");
    }
    return root;
  }
};

}  // namespace

nlohmann::json parse_toml(const std::string& text) {
  TomlParser parser(text);
  return parser.parse_document();
}

nlohmann::json load_config_file(const std::string& path) {
  const bool is_toml = path.size() >= 5 && path.substr(path.size() - 5) == ".toml";
  const bool is_json = path.size() >= 5 && path.substr(path.size() - 5) == ".json";
  if (!is_toml && !is_json)
    throw ConfigError("config file must end in .toml or .json: " + path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (is_toml) return parse_toml(text);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid JSON in " + path + ": " + e.what());
  }
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like dotted.key=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  nlohmann::json* node = &doc;
  std::size_t begin = 0;
  while (true) {
    const std::size_t dot = path.find('.', begin);
    const std::string part = path.substr(begin, dot == std::string::npos ? dot : dot - begin);
    if (part.empty()) throw ConfigError("empty path segment in override '" + assignment + "'");
    if (!node->is_object() || !node->contains(part))
      throw ConfigError("override path '" + path + "' does not exist in the config schema");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    begin = dot + 1;
  }

  try {
    *node = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    *node = raw;  // unquoted strings come through as-is
  }
}

void merge_into(nlohmann::json& base, const nlohmann::json& overlay) {
  if (!base.is_object() || !overlay.is_object()) {
    base = overlay;
    return;
  }
  for (const auto& [key, value] : overlay.items()) {
    if (base.contains(key))
      merge_into(base[key], value);
    else
      base[key] = value;
  }
}

}  // namespace ntk
