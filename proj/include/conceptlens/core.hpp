#pragma once

#include <Eigen/Core>

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace clens {

using Token = std::int32_t;
using ConceptId = int;

struct ConceptLabel {
  ConceptId id = 0;
  std::string name;

  bool operator==(const ConceptLabel&) const = default;
};

struct Item {
  std::string id;
  std::optional<std::vector<Token>> tokens;
  std::optional<std::string> text;

  bool operator==(const Item&) const = default;
};

/// Labeled concept items. Every item has exactly one label and every label
/// has at least one item; construction through `make_dataset` enforces this.
struct LabeledDataset {
  std::vector<Item> items;
  std::vector<ConceptLabel> labels;
  std::vector<ConceptId> item_labels;

  std::size_t size() const { return items.size(); }
  int num_concepts() const { return static_cast<int>(labels.size()); }
  std::vector<int> support() const;

  bool operator==(const LabeledDataset&) const = default;
};

LabeledDataset make_dataset(std::vector<ConceptLabel> labels, std::vector<Item> items,
                            std::vector<ConceptId> item_labels);

/// Throws if any item lacks tokens or carries a token outside [0, vocab_size).
void validate_tokens(const LabeledDataset& dataset, int vocab_size);

/// One MLP unit of the model.
struct UnitCoord {
  int layer = 0;
  int unit = 0;

  auto operator<=>(const UnitCoord&) const = default;
};

struct ModelTopology {
  int n_layers = 0;
  int d_model = 0;
  int mlp_width = 0;
  int vocab_size = 0;
  // Indexed by concept id.
  std::vector<Token> label_token_ids;

  int num_units() const { return n_layers * mlp_width; }
  void validate() const;

  bool operator==(const ModelTopology&) const = default;
};

/// Final-token captures for one item: the residual stream after each block
/// and the MLP pre-activations inside each block.
struct ActivationRecord {
  std::string item_id;
  std::vector<Eigen::VectorXf> residual;
  std::vector<Eigen::VectorXf> mlp_pre;
};

bool operator==(const ActivationRecord& a, const ActivationRecord& b);

/// Throws naming the item and layer on a shape or finiteness violation.
void validate_record(const ActivationRecord& record, const ModelTopology& topology);

/// Stacks the residual vectors of one layer into an N x d_model matrix.
Eigen::MatrixXd residual_matrix(const std::vector<ActivationRecord>& records, int layer);

/// Stacks the MLP pre-activations of one layer into an N x mlp_width matrix.
Eigen::MatrixXd mlp_matrix(const std::vector<ActivationRecord>& records, int layer);

}  // namespace clens
