#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace cosync::cli {

enum ExitCode : int {
    kOk = 0,
    kVerifyFailed = 1,
    kConfigError = 2,
    kArtifactMismatch = 3,
    kRuntimeAbort = 4,
};

inline constexpr const char* kSeedEnv = "COSYNC_SEED";

/// Seed precedence: command-line flag, then COSYNC_SEED, then the config value.
std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, const char* env_value, std::uint64_t config_value);

// Runs one command; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cosync::cli
