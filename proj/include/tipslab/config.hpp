#pragma once

// YAML run configuration. Every field is optional; absent fields keep their
// defaults. Keys are addressed with dotted paths (e.g. `ema.scope`), both in
// nested documents and in `key=value` overrides.

#include <filesystem>
#include <string>
#include <vector>

#include "tipslab/trainer.hpp"

namespace tipslab::config {

inline constexpr int kSchemaVersion = 1;

/// Parses a YAML document, applies overrides last, validates.
trainer::RunConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides = {});

/// File form of parse_config_text. A missing file is an IoError.
trainer::RunConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Resolved config as a YAML document; parse(serialize(c)) == c.
std::string serialize_config(const trainer::RunConfig& config);

/// Every accepted dotted key, in document order.
std::vector<std::string> known_keys();

/// Closest known key by edit distance.
std::string nearest_key(const std::string& key);

std::size_t edit_distance(const std::string& a, const std::string& b);

}  // namespace tipslab::config
