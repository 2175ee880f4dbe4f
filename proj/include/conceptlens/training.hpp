#pragma once

#include "conceptlens/core.hpp"
#include "conceptlens/transformer.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace clens {

struct TrainConfig {
  double lr = 3e-3;
  int steps = 400;
  int batch = 20;
  std::uint64_t seed = 0;
  int context_length = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainResult {
  ToyTransformer model;
  double train_accuracy = 0.0;
  double final_loss = 0.0;
  std::vector<double> loss_history;  // mean batch loss per step
};

/// Seeded initialization; every weight is a float32-representable value so
/// checkpoints round-trip exactly.
ToyTransformer init_toy_model(const ModelTopology& topology, int context_length, std::uint64_t seed);

/// Adam on the cross-entropy of each item's label token at the final
/// (query) position. Batches follow a seeded per-epoch permutation. The
/// returned weights are rounded to float32.
TrainResult train_toy_model(const LabeledDataset& dataset, const ModelTopology& topology,
                            const TrainConfig& config);

/// Mean loss over `indices`, accumulating the mean gradient when requested.
double dataset_loss(const ToyTransformer& model, const LabeledDataset& dataset,
                    std::span<const std::size_t> indices, TransformerWeights* gradient = nullptr);

/// Fraction of items whose argmax over label tokens is their own label.
double label_accuracy(const ToyTransformer& model, const LabeledDataset& dataset);

void round_to_float32(TransformerWeights& weights);

}  // namespace clens
