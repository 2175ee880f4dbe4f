#include "conceptlens/core.hpp"

#include "conceptlens/error.hpp"

#include <cstring>
#include <set>
#include <unordered_set>

namespace clens {

std::vector<int> LabeledDataset::support() const {
  std::vector<int> counts(labels.size(), 0);
  for (ConceptId c : item_labels) ++counts[static_cast<std::size_t>(c)];
  return counts;
}

LabeledDataset make_dataset(std::vector<ConceptLabel> labels, std::vector<Item> items,
                            std::vector<ConceptId> item_labels) {
  const auto k = static_cast<int>(labels.size());
  if (k < 2) throw Error(ErrorCode::invalid_argument, "dataset needs at least 2 concept labels");
  std::set<std::string> names;
  for (int c = 0; c < k; ++c) {
    if (labels[c].id != c)
      throw Error(ErrorCode::invalid_argument, "concept ids must be dense and ordered");
    if (labels[c].name.empty()) throw Error(ErrorCode::invalid_argument, "empty concept name");
    if (!names.insert(labels[c].name).second)
      throw Error(ErrorCode::invalid_argument, "duplicate concept name '" + labels[c].name + "'");
  }
  if (items.empty()) throw Error(ErrorCode::empty_dataset, "dataset has no items");
  if (items.size() != item_labels.size())
    throw Error(ErrorCode::length_mismatch, "item and label counts differ");

  std::unordered_set<std::string> ids;
  std::vector<int> counts(labels.size(), 0);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Item& item = items[i];
    if (!ids.insert(item.id).second)
      throw Error(ErrorCode::duplicate_id, "duplicate item id '" + item.id + "'");
    if (!item.tokens && !item.text)
      throw Error(ErrorCode::invalid_argument, "item '" + item.id + "' has neither tokens nor text");
    if (item.tokens && item.tokens->empty())
      throw Error(ErrorCode::invalid_argument, "item '" + item.id + "' has an empty token list");
    if (item_labels[i] < 0 || item_labels[i] >= k)
      throw Error(ErrorCode::unknown_label, "item '" + item.id + "' has label id out of range");
    ++counts[static_cast<std::size_t>(item_labels[i])];
  }
  for (int c = 0; c < k; ++c) {
    if (counts[c] == 0)
      throw Error(ErrorCode::missing_class, "concept '" + labels[c].name + "' has no items");
  }
  return LabeledDataset{std::move(items), std::move(labels), std::move(item_labels)};
}

void validate_tokens(const LabeledDataset& dataset, int vocab_size) {
  for (const Item& item : dataset.items) {
    if (!item.tokens)
      throw Error(ErrorCode::invalid_argument, "item '" + item.id + "' is not tokenized");
    for (Token t : *item.tokens) {
      if (t < 0 || t >= vocab_size)
        throw Error(ErrorCode::out_of_range,
                    "item '" + item.id + "' has token " + std::to_string(t) + " outside vocabulary");
    }
  }
}

void ModelTopology::validate() const {
  if (n_layers < 1 || d_model < 1 || mlp_width < 1 || vocab_size < 1)
    throw Error(ErrorCode::invalid_argument, "topology dimensions must be >= 1");
  std::set<Token> seen;
  for (Token t : label_token_ids) {
    if (t < 0 || t >= vocab_size)
      throw Error(ErrorCode::out_of_range, "label token " + std::to_string(t) + " outside vocabulary");
    if (!seen.insert(t).second)
      throw Error(ErrorCode::invalid_argument, "label token ids must be distinct");
  }
}

namespace {

bool same_bits(const Eigen::VectorXf& a, const Eigen::VectorXf& b) {
  if (a.size() != b.size()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    // Compare representations so -0.0f and NaN payloads are not conflated.
    if (std::memcmp(&a[i], &b[i], sizeof(float)) != 0) return false;
  }
  return true;
}

}  // namespace

bool operator==(const ActivationRecord& a, const ActivationRecord& b) {
  if (a.item_id != b.item_id || a.residual.size() != b.residual.size() ||
      a.mlp_pre.size() != b.mlp_pre.size())
    return false;
  for (std::size_t l = 0; l < a.residual.size(); ++l)
    if (!same_bits(a.residual[l], b.residual[l])) return false;
  for (std::size_t l = 0; l < a.mlp_pre.size(); ++l)
    if (!same_bits(a.mlp_pre[l], b.mlp_pre[l])) return false;
  return true;
}

void validate_record(const ActivationRecord& record, const ModelTopology& topology) {
  const auto layers = static_cast<std::size_t>(topology.n_layers);
  if (record.residual.size() != layers || record.mlp_pre.size() != layers)
    throw Error(ErrorCode::length_mismatch,
                "record '" + record.item_id + "' does not have one vector per layer");
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string where = "record '" + record.item_id + "' layer " + std::to_string(l);
    if (record.residual[l].size() != topology.d_model)
      throw Error(ErrorCode::length_mismatch, where + ": residual length differs from d_model");
    if (record.mlp_pre[l].size() != topology.mlp_width)
      throw Error(ErrorCode::length_mismatch, where + ": mlp_pre length differs from mlp_width");
    if (!record.residual[l].allFinite())
      throw Error(ErrorCode::non_finite, where + ": non-finite residual entry");
    if (!record.mlp_pre[l].allFinite())
      throw Error(ErrorCode::non_finite, where + ": non-finite mlp_pre entry");
  }
}

Eigen::MatrixXd residual_matrix(const std::vector<ActivationRecord>& records, int layer) {
  if (records.empty()) return {};
  Eigen::MatrixXd out(static_cast<Eigen::Index>(records.size()), records.front().residual.at(layer).size());
  for (std::size_t i = 0; i < records.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = records[i].residual.at(layer).cast<double>().transpose();
  return out;
}

Eigen::MatrixXd mlp_matrix(const std::vector<ActivationRecord>& records, int layer) {
  if (records.empty()) return {};
  Eigen::MatrixXd out(static_cast<Eigen::Index>(records.size()), records.front().mlp_pre.at(layer).size());
  for (std::size_t i = 0; i < records.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = records[i].mlp_pre.at(layer).cast<double>().transpose();
  return out;
}

}  // namespace clens
