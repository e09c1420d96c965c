#include "blockvol/config.hpp"

#include <algorithm>

namespace blockvol {

using nlohmann::json;

void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                const std::string& where) {
    if (!obj.is_object()) fail(Errc::config, where + ": expected an object");
    for (const auto& [key, _] : obj.items()) {
        bool known = std::any_of(allowed.begin(), allowed.end(),
                                 [&](const char* k) { return key == k; });
        if (!known) fail(Errc::config, where + ": unknown key \"" + key + "\"");
    }
}

const json& require_key(const json& obj, const char* key, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key))
        fail(Errc::config, where + ": missing \"" + std::string(key) + "\"");
    return obj[key];
}

VolumeRef parse_volume_ref(const json& j, const std::filesystem::path& base_dir,
                           const std::string& where) {
    check_keys(j, {"path", "dataset"}, where);
    std::filesystem::path path = require_key(j, "path", where).get<std::string>();
    std::string dataset = require_key(j, "dataset", where).get<std::string>();
    if (path.is_relative()) path = base_dir / path;
    return {path, dataset};
}

CompressorSpec parse_compressor(const json& j, const std::string& where) {
    if (j.is_null()) return {Compressor::none, 0};
    check_keys(j, {"id", "level"}, where);
    std::string id = require_key(j, "id", where).get<std::string>();
    if (id != "gzip") fail(Errc::config, where + ": unsupported compressor id \"" + id + "\"");
    return {Compressor::gzip, j.value("level", 5)};
}

ExecutionContext parse_execution(const json& j, const std::string& where) {
    check_keys(j, {"kind", "n"}, where);
    std::string kind = j.value("kind", "serial");
    int n = j.value("n", 1);
    if (n < 1) fail(Errc::config, where + ": worker count must be at least 1");
    if (kind == "serial") return ExecutionContext::serial();
    if (kind == "threads") return ExecutionContext::threads(n);
    if (kind == "processes") return ExecutionContext::processes(n);
    fail(Errc::config, where + ": unknown kind \"" + kind + "\"");
}

json execution_to_json(const ExecutionContext& ctx) {
    const char* kind = "serial";
    if (ctx.kind == ExecutionContext::Kind::threads) kind = "threads";
    if (ctx.kind == ExecutionContext::Kind::processes) kind = "processes";
    return json{{"kind", kind}, {"n", ctx.workers}};
}

} // namespace blockvol
