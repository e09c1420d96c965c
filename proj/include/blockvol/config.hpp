#pragma once

#include <initializer_list>

#include "blockvol/predict.hpp"

namespace blockvol {

/// Strict parsing: any key outside `allowed` is a config error naming the
/// key and its location.
void check_keys(const nlohmann::json& obj, std::initializer_list<const char*> allowed,
                const std::string& where);

const nlohmann::json& require_key(const nlohmann::json& obj, const char* key,
                                  const std::string& where);

/// {"path": ..., "dataset": ...}; the path resolves relative to base_dir.
VolumeRef parse_volume_ref(const nlohmann::json& j, const std::filesystem::path& base_dir,
                           const std::string& where);

/// null, or {"id": "gzip", "level": 1-9}.
CompressorSpec parse_compressor(const nlohmann::json& j, const std::string& where);

/// {"kind": "serial" | "threads" | "processes", "n": N}.
ExecutionContext parse_execution(const nlohmann::json& j, const std::string& where);

nlohmann::json execution_to_json(const ExecutionContext& ctx);

} // namespace blockvol
