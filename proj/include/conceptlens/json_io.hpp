#pragma once

#include "conceptlens/core.hpp"

#include <nlohmann/json.hpp>

#include <string>

namespace clens {

nlohmann::json topology_to_json(const ModelTopology& topology);
ModelTopology topology_from_json(const nlohmann::json& doc);

/// Widens a float to the double whose shortest decimal form is the float's
/// shortest decimal form. Serializing the result as a double and narrowing
/// it back after parsing reproduces the original float bit for bit.
double shortest_widen(float value);

}  // namespace clens
