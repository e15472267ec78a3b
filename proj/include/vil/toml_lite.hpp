#pragma once

#include "vil/types.hpp"

#include <json.hpp>

#include <string>

namespace vil::toml {

/// Parses a TOML subset into a JSON object: comments, [table] and
/// [dotted.table] headers, bare or quoted keys, and scalar values (strings,
/// integers, floats, booleans) plus single-line arrays of scalars. This
/// covers the experiment-config surface; anything else is a ConfigError
/// with a line number.
nlohmann::json parse(const std::string& text);

nlohmann::json parse_file(const std::string& path);

}  // namespace vil::toml
