#pragma once

// Command implementations behind the `gka` executable. Kept in a library so
// tests can drive them without spawning processes.

#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

#include "gka/cost.hpp"

namespace gka::cli {

enum ExitCode : int { ok = 0, config_error = 2, numeric_error = 3, check_failed = 4 };

/// Parses argv (argv[0] is the program name) and runs one command.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

nlohmann::json to_json(const CostReport& report);
CostReport cost_report_from_json(const nlohmann::json& j);

/// Output directory used when --out is absent: $GKA_OUT_DIR/<run> or out/<run>.
std::string default_out_dir(const std::string& run);

}  // namespace gka::cli
