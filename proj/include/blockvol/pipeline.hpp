#pragma once

#include "blockvol/config.hpp"
#include "blockvol/evaluate.hpp"

namespace blockvol {

#ifndef BLOCKVOL_VERSION
#define BLOCKVOL_VERSION "0.0.0"
#endif

constexpr const char* kVersion = BLOCKVOL_VERSION;

struct CommandOutcome {
    /// 0 success, 1 partial (failed blocks recorded), 2 configuration/IO
    /// error (thrown as Error before an outcome exists).
    int exit_code = 0;
    /// The run record document, also written to disk.
    nlohmann::json record;
};

/// Runs one of the config-driven commands: "target", "predict", "segment",
/// "evaluate", "sweep". Paths in the config resolve relative to the config
/// file. The workers override swaps the execution context's worker count
/// (serial configs move to threads); the journal override enables resume.
CommandOutcome run_command(const std::string& command, const std::filesystem::path& config_path,
                           std::optional<int> workers_override = {},
                           std::optional<std::filesystem::path> journal_override = {});

/// Dataset summary for the info command.
nlohmann::json dataset_info(const VolumeHandle& vol);

} // namespace blockvol
