#include "conceptlens/training.hpp"

#include "conceptlens/error.hpp"

#include <cmath>
#include <numeric>
#include <random>

namespace clens {

namespace {

template <typename Block>
void fill_normal(Block& block, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<float> normal(0.0f, static_cast<float>(stddev));
  for (Eigen::Index i = 0; i < block.size(); ++i) block.data()[i] = static_cast<double>(normal(rng));
}

Eigen::Index argmax_lowest(const Eigen::VectorXd& values) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

}  // namespace

void round_to_float32(TransformerWeights& weights) {
  weights.visit([](const std::string&, auto& block) {
    for (Eigen::Index i = 0; i < block.size(); ++i)
      block.data()[i] = static_cast<double>(static_cast<float>(block.data()[i]));
  });
}

ToyTransformer init_toy_model(const ModelTopology& topology, int context_length, std::uint64_t seed) {
  topology.validate();
  ToyTransformer model;
  model.topology = topology;
  model.context_length = context_length;
  model.provenance = Provenance::trained;
  model.seed = seed;
  model.weights = TransformerWeights::zeros(topology, context_length);

  std::mt19937_64 rng(seed);
  const double d = topology.d_model;
  const double m = topology.mlp_width;
  auto& w = model.weights;
  fill_normal(w.token_embedding, 1.0, rng);
  fill_normal(w.position_embedding, 0.1, rng);
  for (auto& layer : w.layers) {
    layer.ln1_gain.setOnes();
    layer.ln2_gain.setOnes();
    fill_normal(layer.w_query, 1.0 / std::sqrt(d), rng);
    fill_normal(layer.w_key, 1.0 / std::sqrt(d), rng);
    fill_normal(layer.w_value, 1.0 / std::sqrt(d), rng);
    fill_normal(layer.w_output, 0.5 / std::sqrt(d), rng);
    fill_normal(layer.w_in, 1.0 / std::sqrt(d), rng);
    fill_normal(layer.w_out, 0.5 / std::sqrt(m), rng);
  }
  w.final_gain.setOnes();
  fill_normal(w.unembedding, 1.0 / std::sqrt(d), rng);
  return model;
}

double dataset_loss(const ToyTransformer& model, const LabeledDataset& dataset,
                    std::span<const std::size_t> indices, TransformerWeights* gradient) {
  if (indices.empty()) return 0.0;
  const auto& labels = model.topology.label_token_ids;
  double total = 0.0;
  for (std::size_t i : indices) {
    const Item& item = dataset.items.at(i);
    if (!item.tokens) throw Error(ErrorCode::invalid_argument, "item '" + item.id + "' is not tokenized");
    const Token target = labels.at(static_cast<std::size_t>(dataset.item_labels[i]));
    total += loss_and_gradient(model, *item.tokens, target, gradient);
  }
  const double scale = 1.0 / static_cast<double>(indices.size());
  if (gradient != nullptr) gradient->visit([&](const std::string&, auto& block) { block *= scale; });
  return total * scale;
}

double label_accuracy(const ToyTransformer& model, const LabeledDataset& dataset) {
  int correct = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto result = forward(model, dataset.items[i], {}, false);
    if (argmax_lowest(label_logits(model.topology, result.final_logits)) == dataset.item_labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

TrainResult train_toy_model(const LabeledDataset& dataset, const ModelTopology& topology,
                            const TrainConfig& config) {
  if (config.steps < 0 || config.batch < 1 || !(config.lr > 0.0))
    throw Error(ErrorCode::invalid_argument, "invalid training configuration");
  if (static_cast<int>(topology.label_token_ids.size()) != dataset.num_concepts())
    throw Error(ErrorCode::topology_mismatch, "topology label tokens differ from dataset concepts");
  validate_tokens(dataset, topology.vocab_size);

  TrainResult result;
  result.model = init_toy_model(topology, config.context_length, config.seed);
  auto& weights = result.model.weights;
  TransformerWeights first = TransformerWeights::zeros(topology, config.context_length);
  TransformerWeights second = first;

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.seed + 0x5851f42d4c957f2dULL);
  auto shuffle = [&] {
    for (std::size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i], order[static_cast<std::size_t>(rng() % (i + 1))]);
  };
  shuffle();

  const auto batch = std::min<std::size_t>(static_cast<std::size_t>(config.batch), order.size());
  std::size_t cursor = 0;
  for (int step = 0; step < config.steps; ++step) {
    if (cursor + batch > order.size()) {
      shuffle();
      cursor = 0;
    }
    std::span<const std::size_t> indices(order.data() + cursor, batch);
    cursor += batch;

    TransformerWeights gradient = TransformerWeights::zeros(topology, config.context_length);
    const double loss = dataset_loss(result.model, dataset, indices, &gradient);
    if (!std::isfinite(loss) || !gradient.all_finite())
      throw Error(ErrorCode::divergence, "non-finite training loss at step " + std::to_string(step));
    result.loss_history.push_back(loss);

    const double t = step + 1;
    const double correction1 = 1.0 - std::pow(config.beta1, t);
    const double correction2 = 1.0 - std::pow(config.beta2, t);
    // Walk the four structures in lockstep through their shared visit order.
    std::vector<Eigen::Map<Eigen::VectorXd>> g_blocks, m_blocks, v_blocks, w_blocks;
    auto collect = [](std::vector<Eigen::Map<Eigen::VectorXd>>& out) {
      return [&out](const std::string&, auto& block) { out.emplace_back(block.data(), block.size()); };
    };
    gradient.visit(collect(g_blocks));
    first.visit(collect(m_blocks));
    second.visit(collect(v_blocks));
    weights.visit(collect(w_blocks));
    for (std::size_t b = 0; b < g_blocks.size(); ++b) {
      m_blocks[b] = config.beta1 * m_blocks[b] + (1.0 - config.beta1) * g_blocks[b];
      v_blocks[b] = config.beta2 * v_blocks[b] + (1.0 - config.beta2) * g_blocks[b].cwiseAbs2();
      w_blocks[b].array() -= config.lr * (m_blocks[b].array() / correction1) /
                             ((v_blocks[b].array() / correction2).sqrt() + config.epsilon);
    }
  }

  round_to_float32(weights);
  std::vector<std::size_t> all(dataset.size());
  std::iota(all.begin(), all.end(), 0);
  result.final_loss = dataset_loss(result.model, dataset, all);
  result.train_accuracy = label_accuracy(result.model, dataset);
  return result;
}

}  // namespace clens
