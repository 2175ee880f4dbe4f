#pragma once

#include "conceptlens/core.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace clens {

/// Token layout shared by the synthetic generator and the reference models:
/// [0, K) concept markers, [K, 2K) label tokens, 2K the query token, and
/// everything above it filler.
struct SyntheticVocabulary {
  int num_concepts = 0;
  int vocab_size = 0;

  Token marker(ConceptId c) const { return c; }
  Token label(ConceptId c) const { return num_concepts + c; }
  Token query() const { return 2 * num_concepts; }
  Token first_filler() const { return 2 * num_concepts + 1; }
  int num_fillers() const { return vocab_size - first_filler(); }

  /// Throws a vocabulary error unless there is room for at least one filler.
  void validate() const;
};

struct SyntheticConfig {
  int num_concepts = 5;
  int items_per_concept = 12;
  int seq_len = 16;
  int markers_per_item = 3;
  std::uint64_t seed = 7;
  int vocab_size = 64;
};

/// Display names: the five Big Five domains when K = 5, "concept-<i>" otherwise.
std::vector<std::string> default_concept_names(int num_concepts);

/// Items are interleaved by concept (item i has concept i mod K). Each holds
/// exactly `markers_per_item` copies of its concept's marker at seeded random
/// positions, fillers elsewhere, and the query token last.
LabeledDataset generate_synthetic_dataset(const SyntheticConfig& config);

LabeledDataset generate_synthetic_dataset(int num_concepts, int items_per_concept, int seq_len,
                                          int markers_per_item, std::uint64_t seed, int vocab_size = 64);

ModelTopology synthetic_topology(int num_concepts, int n_layers = 4, int d_model = 32, int mlp_width = 128,
                                 int vocab_size = 64);

}  // namespace clens
