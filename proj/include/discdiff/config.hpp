#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "discdiff/training.hpp"

namespace discdiff {

// Parses "a.b.c=value". The value is read as JSON when it parses, otherwise
// as a bare string.
inline std::pair<std::vector<std::string>, nlohmann::json> parse_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + text + "' is not key=value");
  std::vector<std::string> path;
  std::string key = text.substr(0, eq);
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    path.push_back(key.substr(start, dot - start));
    if (path.back().empty()) throw ConfigError("empty path segment in '" + key + "'");
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  const std::string raw = text.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = raw;
  return {std::move(path), std::move(value)};
}

// Replaces an existing leaf; paths that do not name a known key are rejected.
inline void apply_override(nlohmann::json& doc, const std::string& text) {
  auto [path, value] = parse_override(text);
  nlohmann::json* node = &doc;
  std::string walked;
  for (const auto& seg : path) {
    walked += (walked.empty() ? "" : ".") + seg;
    if (!node->is_object() || !node->contains(seg)) throw ConfigError("unknown config key " + walked);
    node = &(*node)[seg];
  }
  if (node->is_object()) throw ConfigError("override must name a leaf, got object " + walked);
  *node = std::move(value);
}

inline nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

// Defaults <- config file <- overrides, validated.
inline TrainConfig resolve_train_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides,
                                        const TrainConfig& defaults = TrainConfig::desk()) {
  TrainConfig base = file ? config_from_json(read_json_file(*file), defaults) : defaults;
  nlohmann::json doc = config_to_json(base);
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc, defaults);
}

}  // namespace discdiff
