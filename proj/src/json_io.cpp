#include "blockvol/json_io.hpp"

namespace blockvol {

using nlohmann::json;

json coordinate_to_json(const Coordinate& c) { return json(c.values()); }

Coordinate coordinate_from_json(const json& j, const std::string& where) {
    if (!j.is_array()) fail(Errc::config, where + ": expected an integer array");
    std::vector<std::int64_t> v;
    v.reserve(j.size());
    for (const auto& e : j) {
        if (!e.is_number_integer() && !e.is_number_unsigned())
            fail(Errc::config, where + ": expected integers");
        v.push_back(e.get<std::int64_t>());
    }
    return Coordinate(std::move(v));
}

json roi_to_json(const Roi& roi) {
    return json{{"offset", roi.offset.values()}, {"shape", roi.shape.values()}};
}

Roi roi_from_json(const json& j, const std::string& where) {
    if (!j.is_object() || !j.contains("offset") || !j.contains("shape"))
        fail(Errc::config, where + ": expected {\"offset\": [...], \"shape\": [...]}");
    return Roi(coordinate_from_json(j["offset"], where + ".offset"),
               coordinate_from_json(j["shape"], where + ".shape"));
}

} // namespace blockvol
