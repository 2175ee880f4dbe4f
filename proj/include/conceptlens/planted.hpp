#pragma once

#include "conceptlens/core.hpp"
#include "conceptlens/transformer.hpp"

#include <Eigen/Core>

#include <compare>
#include <cstdint>
#include <optional>
#include <vector>

namespace clens {

/// Magnitudes of the hand-set weights. The defaults keep designated units
/// around +4 on their own concept, at -threshold elsewhere, and background
/// units inside (background_bias - spread, background_bias + spread).
struct PlantedGains {
  double filler_pool = 1.0;
  double marker_pool = 1.0;
  double unit_read = 8.0;
  double unit_threshold = 3.0;
  double unit_write = 2.0;
  double background_bias = -4.0;
  double background_spread = 0.5;
  double label_readout = 1.0;
};

/// Ground truth for the planted reference model. Concept directions carry
/// pooled marker evidence; designated units read them and write the label
/// directions that the unembedding reads.
struct PlantedSpec {
  std::vector<Token> concept_marker_tokens;
  Token query_token = 0;
  std::vector<std::vector<UnitCoord>> designated_units;
  Eigen::MatrixXd concept_directions;  // d x K, orthonormal, zero-mean columns
  Eigen::MatrixXd label_directions;    // d x K, orthonormal, zero-mean columns
  int context_length = 16;
  PlantedGains gains;
  std::uint64_t seed = 0;

  int num_concepts() const { return static_cast<int>(concept_marker_tokens.size()); }
  /// Layer holding every designated unit.
  int concept_layer() const;
  std::vector<UnitCoord> all_designated() const;
};

/// Spec matching the synthetic vocabulary layout. The concept layer defaults
/// to n_layers / 2 and designated units are a seeded choice of units there.
PlantedSpec default_planted_spec(const ModelTopology& topology, int units_per_concept = 4,
                                 std::optional<int> concept_layer = std::nullopt, std::uint64_t seed = 0,
                                 int context_length = 16);

ToyTransformer build_planted_model(const PlantedSpec& spec, const ModelTopology& topology);

}  // namespace clens
