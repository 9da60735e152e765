#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rejepa/config.hpp"

namespace rejepa {

/// Environment variable that, when set, replaces the metrics directory of
/// `train` (normally the run's output directory).
inline constexpr const char* kMetricsDirEnv = "REJEPA_METRICS_DIR";

std::filesystem::path metrics_directory(const std::filesystem::path& output_dir);

/// Machine-readable error document written to stderr on failure.
nlohmann::json error_json(const std::string& kind, const std::string& message);

/// Entry point of the `rejepa` executable; args excludes the program name.
/// Returns the process exit code: 0 on success, 1 on a library error, 2 on a
/// command-line usage error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rejepa
