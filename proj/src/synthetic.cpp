#include "conceptlens/synthetic.hpp"

#include "conceptlens/error.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <random>

namespace clens {

void SyntheticVocabulary::validate() const {
  if (num_concepts < 2) throw Error(ErrorCode::invalid_argument, "need at least 2 concepts");
  if (num_fillers() < 1)
    throw Error(ErrorCode::vocabulary, "vocabulary of " + std::to_string(vocab_size) +
                                           " tokens cannot hold " + std::to_string(num_concepts) +
                                           " markers, labels, a query token and a filler");
}

std::vector<std::string> default_concept_names(int num_concepts) {
  if (num_concepts == 5)
    return {"Extraversion", "Agreeableness", "Conscientiousness", "Negative Emotionality", "Open-Mindedness"};
  std::vector<std::string> names;
  for (int c = 0; c < num_concepts; ++c) names.push_back("concept-" + std::to_string(c));
  return names;
}

LabeledDataset generate_synthetic_dataset(const SyntheticConfig& config) {
  const SyntheticVocabulary vocab{config.num_concepts, config.vocab_size};
  vocab.validate();
  if (config.items_per_concept < 1)
    throw Error(ErrorCode::invalid_argument, "items_per_concept must be >= 1");
  if (config.markers_per_item < 1)
    throw Error(ErrorCode::invalid_argument, "markers_per_item must be >= 1");
  if (config.seq_len < config.markers_per_item + 2)
    throw Error(ErrorCode::invalid_argument, "seq_len must be >= markers_per_item + 2");

  std::mt19937_64 rng(config.seed);
  const auto names = default_concept_names(config.num_concepts);
  std::vector<ConceptLabel> labels;
  for (int c = 0; c < config.num_concepts; ++c) labels.push_back({c, names[static_cast<std::size_t>(c)]});

  const int body = config.seq_len - 1;
  std::vector<int> positions(static_cast<std::size_t>(body));
  std::vector<Item> items;
  std::vector<ConceptId> item_labels;
  const int total = config.num_concepts * config.items_per_concept;
  for (int i = 0; i < total; ++i) {
    const ConceptId concept_id = i % config.num_concepts;
    std::vector<Token> tokens(static_cast<std::size_t>(config.seq_len));
    for (int t = 0; t < body; ++t)
      tokens[static_cast<std::size_t>(t)] =
          vocab.first_filler() + static_cast<Token>(rng() % static_cast<std::uint64_t>(vocab.num_fillers()));
    std::iota(positions.begin(), positions.end(), 0);
    // Partial Fisher-Yates: the first markers_per_item slots get the markers.
    for (int j = 0; j < config.markers_per_item; ++j) {
      const auto pick = j + static_cast<int>(rng() % static_cast<std::uint64_t>(body - j));
      std::swap(positions[static_cast<std::size_t>(j)], positions[static_cast<std::size_t>(pick)]);
      tokens[static_cast<std::size_t>(positions[static_cast<std::size_t>(j)])] = vocab.marker(concept_id);
    }
    tokens.back() = vocab.query();

    char id[32];
    std::snprintf(id, sizeof(id), "syn-%03d", i);
    items.push_back(Item{id, std::move(tokens), std::nullopt});
    item_labels.push_back(concept_id);
  }
  return make_dataset(std::move(labels), std::move(items), std::move(item_labels));
}

LabeledDataset generate_synthetic_dataset(int num_concepts, int items_per_concept, int seq_len,
                                          int markers_per_item, std::uint64_t seed, int vocab_size) {
  return generate_synthetic_dataset(
      SyntheticConfig{num_concepts, items_per_concept, seq_len, markers_per_item, seed, vocab_size});
}

ModelTopology synthetic_topology(int num_concepts, int n_layers, int d_model, int mlp_width, int vocab_size) {
  const SyntheticVocabulary vocab{num_concepts, vocab_size};
  vocab.validate();
  ModelTopology topology{n_layers, d_model, mlp_width, vocab_size, {}};
  for (int c = 0; c < num_concepts; ++c) topology.label_token_ids.push_back(vocab.label(c));
  topology.validate();
  return topology;
}

}  // namespace clens
