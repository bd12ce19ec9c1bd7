#pragma once

#include <json.hpp>

#include "neurotune/synthworld.hpp"

// Shared between the translation units that persist configs; not installed.
namespace neurotune::detail {

nlohmann::json world_config_to_json(const WorldConfig& c);
WorldConfig world_config_from_json(const nlohmann::json& j);

}  // namespace neurotune::detail
