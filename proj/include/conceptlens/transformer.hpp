#pragma once

#include "conceptlens/core.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace clens {

struct LayerWeights {
  Eigen::VectorXd ln1_gain, ln1_bias;
  Eigen::MatrixXd w_query, w_key, w_value, w_output;  // d x d, applied on the right
  Eigen::VectorXd ln2_gain, ln2_bias;
  Eigen::MatrixXd w_in;  // d x m
  Eigen::VectorXd b_in;  // m
  Eigen::MatrixXd w_out;  // m x d
  Eigen::VectorXd b_out;  // d

  template <typename Visitor>
  void visit(const std::string& prefix, Visitor&& visitor);
};

/// Parameter storage for the pre-norm, single-head decoder. The same type
/// holds gradients and Adam moments.
struct TransformerWeights {
  Eigen::MatrixXd token_embedding;     // V x d
  Eigen::MatrixXd position_embedding;  // context x d
  std::vector<LayerWeights> layers;
  Eigen::VectorXd final_gain, final_bias;
  Eigen::MatrixXd unembedding;  // d x V

  static TransformerWeights zeros(const ModelTopology& topology, int context_length);

  /// Calls visitor(name, matrix_or_vector&) for every parameter block in a
  /// fixed order.
  template <typename Visitor>
  void visit(Visitor&& visitor);
  template <typename Visitor>
  void visit(Visitor&& visitor) const {
    const_cast<TransformerWeights*>(this)->visit(
        [&](const std::string& name, auto& block) { visitor(name, std::as_const(block)); });
  }

  std::size_t parameter_count() const;
  bool all_finite() const;
};

enum class Provenance { planted, trained };

std::string_view to_string(Provenance provenance);

struct ToyTransformer {
  ModelTopology topology;
  int context_length = 0;
  TransformerWeights weights;
  Provenance provenance = Provenance::trained;
  std::uint64_t seed = 0;

  /// Throws if any weight block disagrees with the topology.
  void validate() const;
};

/// Replaces the pre-activation of one MLP unit at the final token before the
/// nonlinearity.
struct UnitOverride {
  int layer = 0;
  int unit = 0;
  double value = 0.0;

  bool operator==(const UnitOverride&) const = default;
};

struct ForwardResult {
  Eigen::VectorXd final_logits;
  std::optional<ActivationRecord> captures;
};

/// Position used for captures; std::nullopt selects the final token.
using CapturePosition = std::optional<int>;

ForwardResult forward(const ToyTransformer& model, const Item& item,
                      std::span<const UnitOverride> overrides = {}, bool capture = true,
                      CapturePosition position = std::nullopt);

ForwardResult forward_tokens(const ToyTransformer& model, std::span<const Token> tokens,
                             std::span<const UnitOverride> overrides = {}, bool capture = true,
                             CapturePosition position = std::nullopt,
                             const std::string& item_id = {});

/// One capture per dataset item, in dataset order.
std::vector<ActivationRecord> capture_all(const ToyTransformer& model, const LabeledDataset& dataset);

/// Row-wise attention weights of every layer for one token sequence
/// (diagnostics and tests).
std::vector<Eigen::MatrixXd> attention_weights(const ToyTransformer& model, std::span<const Token> tokens);

/// Softmax restricted to the label tokens of the topology, indexed by concept.
Eigen::VectorXd label_probabilities(const ModelTopology& topology, const Eigen::VectorXd& logits);
Eigen::VectorXd label_logits(const ModelTopology& topology, const Eigen::VectorXd& logits);

/// Cross-entropy of `target` under the final-position logits, and its
/// gradient with respect to every parameter (accumulated into `gradient`).
double loss_and_gradient(const ToyTransformer& model, std::span<const Token> tokens, Token target,
                         TransformerWeights* gradient);

// --- visitor implementations ---

template <typename Visitor>
void LayerWeights::visit(const std::string& prefix, Visitor&& visitor) {
  visitor(prefix + "ln1_gain", ln1_gain);
  visitor(prefix + "ln1_bias", ln1_bias);
  visitor(prefix + "w_query", w_query);
  visitor(prefix + "w_key", w_key);
  visitor(prefix + "w_value", w_value);
  visitor(prefix + "w_output", w_output);
  visitor(prefix + "ln2_gain", ln2_gain);
  visitor(prefix + "ln2_bias", ln2_bias);
  visitor(prefix + "w_in", w_in);
  visitor(prefix + "b_in", b_in);
  visitor(prefix + "w_out", w_out);
  visitor(prefix + "b_out", b_out);
}

template <typename Visitor>
void TransformerWeights::visit(Visitor&& visitor) {
  visitor(std::string("token_embedding"), token_embedding);
  visitor(std::string("position_embedding"), position_embedding);
  for (std::size_t l = 0; l < layers.size(); ++l)
    layers[l].visit("layers." + std::to_string(l) + ".", visitor);
  visitor(std::string("final_gain"), final_gain);
  visitor(std::string("final_bias"), final_bias);
  visitor(std::string("unembedding"), unembedding);
}

}  // namespace clens
