#pragma once

#include <string>

#include "json.hpp"

#include "blockvol/geometry.hpp"

namespace blockvol {

nlohmann::json coordinate_to_json(const Coordinate& c);
Coordinate coordinate_from_json(const nlohmann::json& j, const std::string& where);

/// ROIs appear in configs and protocol messages as {"offset": [...], "shape": [...]}.
nlohmann::json roi_to_json(const Roi& roi);
Roi roi_from_json(const nlohmann::json& j, const std::string& where);

} // namespace blockvol
