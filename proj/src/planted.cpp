#include "conceptlens/planted.hpp"

#include "conceptlens/error.hpp"
#include "conceptlens/synthetic.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

namespace clens {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Orthonormal basis of the complement of span(fixed) inside R^d. Columns of
// `fixed` must be orthonormal.
MatrixXd complement_basis(const MatrixXd& fixed, int d) {
  MatrixXd stacked(d, fixed.cols() + d);
  stacked << fixed, MatrixXd::Identity(d, d);
  Eigen::HouseholderQR<MatrixXd> qr(stacked);
  MatrixXd q = qr.householderQ() * MatrixXd::Identity(d, d);
  return q.rightCols(d - fixed.cols());
}

MatrixXd zero_mean_basis(int d) {
  const MatrixXd ones = VectorXd::Constant(d, 1.0 / std::sqrt(static_cast<double>(d)));
  return complement_basis(ones, d);
}

void require(bool condition, const std::string& message) {
  if (!condition) throw Error(ErrorCode::topology_mismatch, "planted spec: " + message);
}

}  // namespace

int PlantedSpec::concept_layer() const {
  require(!designated_units.empty() && !designated_units.front().empty(), "no designated units");
  return designated_units.front().front().layer;
}

std::vector<UnitCoord> PlantedSpec::all_designated() const {
  std::vector<UnitCoord> all;
  for (const auto& units : designated_units) all.insert(all.end(), units.begin(), units.end());
  return all;
}

PlantedSpec default_planted_spec(const ModelTopology& topology, int units_per_concept,
                                 std::optional<int> concept_layer, std::uint64_t seed, int context_length) {
  topology.validate();
  const int k = static_cast<int>(topology.label_token_ids.size());
  const SyntheticVocabulary vocab{k, topology.vocab_size};
  vocab.validate();
  const int d = topology.d_model;
  require(d >= 3 * k + 3, "d_model must be at least 3K + 3 for the planted layout");
  require(units_per_concept >= 1 && units_per_concept * k <= topology.mlp_width,
          "designated units do not fit in the MLP width");

  PlantedSpec spec;
  spec.context_length = context_length;
  spec.seed = seed;
  spec.query_token = vocab.query();
  for (int c = 0; c < k; ++c) spec.concept_marker_tokens.push_back(vocab.marker(c));

  const MatrixXd basis = zero_mean_basis(d);
  spec.concept_directions = basis.leftCols(k);
  spec.label_directions = basis.middleCols(k, k);

  const int layer = concept_layer.value_or(topology.n_layers / 2);
  std::vector<int> units(static_cast<std::size_t>(topology.mlp_width));
  std::iota(units.begin(), units.end(), 0);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  for (std::size_t i = units.size() - 1; i > 0; --i)
    std::swap(units[i], units[static_cast<std::size_t>(rng() % (i + 1))]);
  spec.designated_units.resize(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) {
    for (int j = 0; j < units_per_concept; ++j)
      spec.designated_units[static_cast<std::size_t>(c)].push_back(
          {layer, units[static_cast<std::size_t>(c * units_per_concept + j)]});
    std::sort(spec.designated_units[static_cast<std::size_t>(c)].begin(),
              spec.designated_units[static_cast<std::size_t>(c)].end());
  }
  return spec;
}

ToyTransformer build_planted_model(const PlantedSpec& spec, const ModelTopology& topology) {
  topology.validate();
  const int k = spec.num_concepts();
  const int d = topology.d_model;
  const int m = topology.mlp_width;
  const auto& gains = spec.gains;

  require(k >= 2, "need at least 2 concepts");
  require(static_cast<int>(topology.label_token_ids.size()) == k, "label token count differs from concept count");
  require(static_cast<int>(spec.designated_units.size()) == k, "designated unit lists differ from concept count");
  require(spec.concept_directions.rows() == d && spec.concept_directions.cols() == k,
          "concept directions must be d_model x K");
  require(spec.label_directions.rows() == d && spec.label_directions.cols() == k,
          "label directions must be d_model x K");
  require(spec.context_length >= 1, "context length must be positive");

  MatrixXd fixed(d, 1 + 2 * k);
  fixed << VectorXd::Constant(d, 1.0 / std::sqrt(static_cast<double>(d))), spec.concept_directions,
      spec.label_directions;
  const MatrixXd gram = fixed.transpose() * fixed;
  require((gram - MatrixXd::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff() < 1e-9,
          "concept and label directions must be orthonormal and zero-mean");
  require(d - 1 - 2 * k >= k + 2, "d_model too small for marker, query and filler directions");

  const int layer = spec.concept_layer();
  require(layer >= 0 && layer < topology.n_layers, "designated layer outside [0, n_layers)");
  std::set<UnitCoord> seen;
  for (const auto& units : spec.designated_units) {
    require(!units.empty(), "every concept needs designated units");
    for (const auto& u : units) {
      require(u.layer == layer, "all designated units must share one layer");
      require(u.unit >= 0 && u.unit < m, "designated unit outside [0, mlp_width)");
      require(seen.insert(u).second, "designated unit lists must be disjoint");
    }
  }

  std::set<Token> markers(spec.concept_marker_tokens.begin(), spec.concept_marker_tokens.end());
  require(static_cast<int>(markers.size()) == k, "marker tokens must be distinct");
  for (Token t : spec.concept_marker_tokens) require(t >= 0 && t < topology.vocab_size, "marker token outside vocabulary");
  require(spec.query_token >= 0 && spec.query_token < topology.vocab_size && !markers.count(spec.query_token),
          "query token must be in vocabulary and distinct from markers");

  // Embedding directions: markers, query, then a filler subspace.
  const MatrixXd free = complement_basis(fixed, d);
  const MatrixXd marker_dirs = free.leftCols(k);
  const VectorXd query_dir = free.col(k);
  const MatrixXd filler_dirs = free.rightCols(free.cols() - k - 1);
  const MatrixXd filler_projector = filler_dirs * filler_dirs.transpose();

  ToyTransformer model;
  model.topology = topology;
  model.context_length = spec.context_length;
  model.provenance = Provenance::planted;
  model.seed = spec.seed;
  TransformerWeights& w = model.weights;
  w = TransformerWeights::zeros(topology, spec.context_length);

  int filler_index = 0;
  for (Token t = 0; t < topology.vocab_size; ++t) {
    auto found = std::find(spec.concept_marker_tokens.begin(), spec.concept_marker_tokens.end(), t);
    if (found != spec.concept_marker_tokens.end()) {
      w.token_embedding.row(t) = marker_dirs.col(found - spec.concept_marker_tokens.begin()).transpose();
    } else if (t == spec.query_token) {
      w.token_embedding.row(t) = query_dir.transpose();
    } else {
      const auto slot = filler_index % filler_dirs.cols();
      const double sign = (filler_index / filler_dirs.cols()) % 2 == 0 ? 1.0 : -1.0;
      w.token_embedding.row(t) = sign * filler_dirs.col(slot).transpose();
      ++filler_index;
    }
  }

  const double root_d = std::sqrt(static_cast<double>(d));
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int l = 0; l < topology.n_layers; ++l) {
    LayerWeights& lw = w.layers[static_cast<std::size_t>(l)];
    lw.ln1_gain.setOnes();
    lw.ln2_gain.setOnes();
    lw.w_output.setIdentity();
    // Zero query/key weights give uniform causal attention.
    if (l == 0) lw.w_value += (gains.filler_pool / root_d) * filler_projector;
    if (l == layer) lw.w_value += (gains.marker_pool / root_d) * marker_dirs * spec.concept_directions.transpose();

    // Background units respond to filler content only and write nothing.
    for (int j = 0; j < m; ++j) {
      VectorXd direction(d);
      for (int i = 0; i < d; ++i) direction[i] = normal(rng);
      direction = filler_projector * direction;
      lw.w_in.col(j) = (gains.background_spread / root_d) * direction.normalized();
      lw.b_in[j] = gains.background_bias;
    }
  }

  // Writes are centered across label directions so the summed label mass of
  // the residual is the same for every input.
  const VectorXd mean_label = spec.label_directions.rowwise().mean();
  LayerWeights& concept_block = w.layers[static_cast<std::size_t>(layer)];
  for (int c = 0; c < k; ++c) {
    for (const auto& u : spec.designated_units[static_cast<std::size_t>(c)]) {
      concept_block.w_in.col(u.unit) = gains.unit_read * spec.concept_directions.col(c);
      concept_block.b_in[u.unit] = -gains.unit_threshold;
      concept_block.w_out.row(u.unit) = gains.unit_write * (spec.label_directions.col(c) - mean_label).transpose();
    }
  }

  w.final_gain.setOnes();
  for (int c = 0; c < k; ++c)
    w.unembedding.col(topology.label_token_ids[static_cast<std::size_t>(c)]) =
        gains.label_readout * spec.label_directions.col(c);
  model.validate();
  return model;
}

}  // namespace clens
