// Command-line surface: one verb per experiment stage. Exit codes: 0 on
// success, 2 when the command line or a config fails to parse (unknown
// verbs/keys included), 1 when a run fails at runtime.
#pragma once

#include <string>
#include <vector>

namespace cpm {

// Applies one "dotted.key=value" override onto a JSON config text. The path
// must already exist in the tree (so typos are rejected, matching the strict
// config parser); the value is parsed as JSON when possible, else taken as a
// string. Returns the rewritten JSON text. Errors: cpm::Error.
std::string apply_config_override(const std::string& config_json, const std::string& spec);

int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);  // args without the program name

}  // namespace cpm
