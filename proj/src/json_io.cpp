#include "conceptlens/json_io.hpp"

#include "conceptlens/error.hpp"

#include <array>
#include <charconv>
#include <cmath>

namespace clens {

nlohmann::json topology_to_json(const ModelTopology& topology) {
  return nlohmann::json{{"n_layers", topology.n_layers},
                        {"d_model", topology.d_model},
                        {"mlp_width", topology.mlp_width},
                        {"vocab_size", topology.vocab_size},
                        {"label_token_ids", topology.label_token_ids}};
}

ModelTopology topology_from_json(const nlohmann::json& doc) {
  ModelTopology topology;
  try {
    topology.n_layers = doc.at("n_layers").get<int>();
    topology.d_model = doc.at("d_model").get<int>();
    topology.mlp_width = doc.at("mlp_width").get<int>();
    topology.vocab_size = doc.at("vocab_size").get<int>();
    topology.label_token_ids = doc.at("label_token_ids").get<std::vector<Token>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, std::string("topology: ") + e.what());
  }
  topology.validate();
  return topology;
}

double shortest_widen(float value) {
  if (!std::isfinite(value)) return static_cast<double>(value);
  std::array<char, 64> buffer{};
  auto [end, ec] = std::to_chars(buffer.data(), buffer.data() + buffer.size(), value);
  double widened = 0.0;
  std::from_chars(buffer.data(), end, widened);
  return widened;
}

}  // namespace clens
