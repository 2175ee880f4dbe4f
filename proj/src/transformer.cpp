#include "conceptlens/transformer.hpp"

#include "conceptlens/error.hpp"

#include <cmath>
#include <numbers>

namespace clens {

namespace {

constexpr double kNormEpsilon = 1e-5;
constexpr double kInvSqrt2 = 0.5 * std::numbers::sqrt2;

using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

struct NormCache {
  MatrixXd normalized;  // (x - mean) * inv_std, before gain and bias
  VectorXd inv_std;
};

MatrixXd layer_norm(const MatrixXd& x, const VectorXd& gain, const VectorXd& bias, NormCache& cache) {
  const Eigen::Index rows = x.rows();
  const auto width = static_cast<double>(x.cols());
  cache.normalized.resize(rows, x.cols());
  cache.inv_std.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = x.row(r).sum() / width;
    const RowVectorXd centered = x.row(r).array() - mean;
    const double variance = centered.squaredNorm() / width;
    cache.inv_std[r] = 1.0 / std::sqrt(variance + kNormEpsilon);
    cache.normalized.row(r) = centered * cache.inv_std[r];
  }
  MatrixXd y = cache.normalized * gain.asDiagonal();
  y.rowwise() += bias.transpose();
  return y;
}

// Returns d(loss)/dx and accumulates gain/bias gradients.
MatrixXd layer_norm_backward(const MatrixXd& dy, const VectorXd& gain, const NormCache& cache,
                             VectorXd& d_gain, VectorXd& d_bias) {
  d_gain += (dy.array() * cache.normalized.array()).colwise().sum().transpose().matrix();
  d_bias += dy.colwise().sum().transpose();
  const MatrixXd d_norm = dy * gain.asDiagonal();
  const auto width = static_cast<double>(dy.cols());
  MatrixXd dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_d = d_norm.row(r).sum() / width;
    const double mean_dx = d_norm.row(r).dot(cache.normalized.row(r)) / width;
    dx.row(r) = cache.inv_std[r] *
                (d_norm.row(r).array() - mean_d - cache.normalized.row(r).array() * mean_dx).matrix();
  }
  return dx;
}

double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z * kInvSqrt2)); }

double gelu_derivative(double z) {
  const double cdf = 0.5 * (1.0 + std::erf(z * kInvSqrt2));
  const double pdf = std::exp(-0.5 * z * z) * kInvSqrt2 * std::numbers::inv_sqrtpi;
  return cdf + z * pdf;
}

// Causal row softmax of scaled scores.
MatrixXd causal_softmax(const MatrixXd& scores) {
  const Eigen::Index n = scores.rows();
  MatrixXd probs = MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double peak = scores.row(i).head(i + 1).maxCoeff();
    double total = 0.0;
    for (Eigen::Index j = 0; j <= i; ++j) {
      probs(i, j) = std::exp(scores(i, j) - peak);
      total += probs(i, j);
    }
    probs.row(i).head(i + 1) /= total;
  }
  return probs;
}

struct LayerCache {
  MatrixXd input;
  NormCache norm1;
  MatrixXd attn_in, query, key, value, probs, attended;
  MatrixXd middle;
  NormCache norm2;
  MatrixXd mlp_in, pre, post;
  MatrixXd output;
};

struct ForwardPass {
  std::vector<LayerCache> layers;
  NormCache final_norm;
  RowVectorXd final_hidden;
  VectorXd logits;
};

void check_overrides(const ModelTopology& topology, std::span<const UnitOverride> overrides) {
  for (const auto& o : overrides) {
    if (o.layer < 0 || o.layer >= topology.n_layers)
      throw Error(ErrorCode::out_of_range, "intervention layer " + std::to_string(o.layer) +
                                               " outside [0, " + std::to_string(topology.n_layers) + ")");
    if (o.unit < 0 || o.unit >= topology.mlp_width)
      throw Error(ErrorCode::out_of_range, "intervention unit " + std::to_string(o.unit) +
                                               " outside [0, " + std::to_string(topology.mlp_width) + ")");
    if (!std::isfinite(o.value))
      throw Error(ErrorCode::non_finite, "intervention value is not finite");
  }
}

void check_tokens(const ToyTransformer& model, std::span<const Token> tokens) {
  if (tokens.empty()) throw Error(ErrorCode::invalid_argument, "empty token sequence");
  if (static_cast<int>(tokens.size()) > model.context_length)
    throw Error(ErrorCode::out_of_range, "sequence of length " + std::to_string(tokens.size()) +
                                             " exceeds context length " +
                                             std::to_string(model.context_length));
  for (Token t : tokens) {
    if (t < 0 || t >= model.topology.vocab_size)
      throw Error(ErrorCode::out_of_range, "token " + std::to_string(t) + " outside vocabulary");
  }
}

ForwardPass run_forward(const ToyTransformer& model, std::span<const Token> tokens,
                        std::span<const UnitOverride> overrides) {
  const auto& w = model.weights;
  const auto length = static_cast<Eigen::Index>(tokens.size());
  const double scale = 1.0 / std::sqrt(static_cast<double>(model.topology.d_model));

  MatrixXd x(length, model.topology.d_model);
  for (Eigen::Index t = 0; t < length; ++t)
    x.row(t) = w.token_embedding.row(tokens[static_cast<std::size_t>(t)]) + w.position_embedding.row(t);

  ForwardPass pass;
  pass.layers.resize(w.layers.size());
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const LayerWeights& lw = w.layers[l];
    LayerCache& c = pass.layers[l];
    c.input = x;
    c.attn_in = layer_norm(x, lw.ln1_gain, lw.ln1_bias, c.norm1);
    c.query = c.attn_in * lw.w_query;
    c.key = c.attn_in * lw.w_key;
    c.value = c.attn_in * lw.w_value;
    c.probs = causal_softmax(scale * c.query * c.key.transpose());
    c.attended = c.probs * c.value;
    c.middle = x + c.attended * lw.w_output;

    c.mlp_in = layer_norm(c.middle, lw.ln2_gain, lw.ln2_bias, c.norm2);
    c.pre = c.mlp_in * lw.w_in;
    c.pre.rowwise() += lw.b_in.transpose();
    for (const auto& o : overrides) {
      if (o.layer == static_cast<int>(l)) c.pre(length - 1, o.unit) = o.value;
    }
    c.post = c.pre.unaryExpr([](double z) { return gelu(z); });
    c.output = c.middle + c.post * lw.w_out;
    c.output.rowwise() += lw.b_out.transpose();
    x = c.output;
  }

  const MatrixXd last = x.row(length - 1);
  pass.final_hidden = layer_norm(last, w.final_gain, w.final_bias, pass.final_norm);
  pass.logits = (pass.final_hidden * w.unembedding).transpose();
  return pass;
}

}  // namespace

TransformerWeights TransformerWeights::zeros(const ModelTopology& topology, int context_length) {
  const int d = topology.d_model;
  const int m = topology.mlp_width;
  TransformerWeights w;
  w.token_embedding = MatrixXd::Zero(topology.vocab_size, d);
  w.position_embedding = MatrixXd::Zero(context_length, d);
  w.layers.resize(static_cast<std::size_t>(topology.n_layers));
  for (auto& layer : w.layers) {
    layer.ln1_gain = VectorXd::Zero(d);
    layer.ln1_bias = VectorXd::Zero(d);
    layer.w_query = MatrixXd::Zero(d, d);
    layer.w_key = MatrixXd::Zero(d, d);
    layer.w_value = MatrixXd::Zero(d, d);
    layer.w_output = MatrixXd::Zero(d, d);
    layer.ln2_gain = VectorXd::Zero(d);
    layer.ln2_bias = VectorXd::Zero(d);
    layer.w_in = MatrixXd::Zero(d, m);
    layer.b_in = VectorXd::Zero(m);
    layer.w_out = MatrixXd::Zero(m, d);
    layer.b_out = VectorXd::Zero(d);
  }
  w.final_gain = VectorXd::Zero(d);
  w.final_bias = VectorXd::Zero(d);
  w.unembedding = MatrixXd::Zero(d, topology.vocab_size);
  return w;
}

std::size_t TransformerWeights::parameter_count() const {
  std::size_t count = 0;
  visit([&](const std::string&, const auto& block) { count += static_cast<std::size_t>(block.size()); });
  return count;
}

bool TransformerWeights::all_finite() const {
  bool finite = true;
  visit([&](const std::string&, const auto& block) { finite = finite && block.allFinite(); });
  return finite;
}

std::string_view to_string(Provenance provenance) {
  return provenance == Provenance::planted ? "planted" : "trained";
}

void ToyTransformer::validate() const {
  topology.validate();
  if (context_length < 1) throw Error(ErrorCode::invalid_argument, "context length must be >= 1");
  const TransformerWeights reference = TransformerWeights::zeros(topology, context_length);
  if (weights.layers.size() != reference.layers.size())
    throw Error(ErrorCode::topology_mismatch, "layer count differs from topology");
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  reference.visit([&](const std::string&, const auto& block) { shapes.emplace_back(block.rows(), block.cols()); });
  std::size_t index = 0;
  weights.visit([&](const std::string& name, const auto& block) {
    if (block.rows() != shapes[index].first || block.cols() != shapes[index].second)
      throw Error(ErrorCode::topology_mismatch, "weight block '" + name + "' has the wrong shape");
    ++index;
  });
}

ForwardResult forward_tokens(const ToyTransformer& model, std::span<const Token> tokens,
                             std::span<const UnitOverride> overrides, bool capture,
                             CapturePosition position, const std::string& item_id) {
  check_tokens(model, tokens);
  check_overrides(model.topology, overrides);
  const auto length = static_cast<int>(tokens.size());
  const int at = position.value_or(length - 1);
  if (at < 0 || at >= length)
    throw Error(ErrorCode::out_of_range, "capture position " + std::to_string(at) + " outside sequence");

  ForwardPass pass = run_forward(model, tokens, overrides);
  ForwardResult result;
  result.final_logits = std::move(pass.logits);
  if (capture) {
    ActivationRecord record;
    record.item_id = item_id;
    for (const auto& c : pass.layers) {
      record.residual.push_back(c.output.row(at).transpose().cast<float>());
      record.mlp_pre.push_back(c.pre.row(at).transpose().cast<float>());
    }
    result.captures = std::move(record);
  }
  return result;
}

ForwardResult forward(const ToyTransformer& model, const Item& item, std::span<const UnitOverride> overrides,
                      bool capture, CapturePosition position) {
  if (!item.tokens)
    throw Error(ErrorCode::invalid_argument, "item '" + item.id + "' has no tokens for the reference model");
  return forward_tokens(model, *item.tokens, overrides, capture, position, item.id);
}

std::vector<ActivationRecord> capture_all(const ToyTransformer& model, const LabeledDataset& dataset) {
  std::vector<ActivationRecord> records;
  records.reserve(dataset.size());
  for (const Item& item : dataset.items) records.push_back(*forward(model, item).captures);
  return records;
}

std::vector<Eigen::MatrixXd> attention_weights(const ToyTransformer& model, std::span<const Token> tokens) {
  check_tokens(model, tokens);
  ForwardPass pass = run_forward(model, tokens, {});
  std::vector<MatrixXd> out;
  for (auto& c : pass.layers) out.push_back(std::move(c.probs));
  return out;
}

Eigen::VectorXd label_logits(const ModelTopology& topology, const Eigen::VectorXd& logits) {
  VectorXd out(static_cast<Eigen::Index>(topology.label_token_ids.size()));
  for (std::size_t c = 0; c < topology.label_token_ids.size(); ++c)
    out[static_cast<Eigen::Index>(c)] = logits[topology.label_token_ids[c]];
  return out;
}

Eigen::VectorXd label_probabilities(const ModelTopology& topology, const Eigen::VectorXd& logits) {
  VectorXd selected = label_logits(topology, logits);
  selected.array() -= selected.maxCoeff();
  selected = selected.array().exp();
  return selected / selected.sum();
}

double loss_and_gradient(const ToyTransformer& model, std::span<const Token> tokens, Token target,
                         TransformerWeights* gradient) {
  check_tokens(model, tokens);
  const auto& w = model.weights;
  ForwardPass pass = run_forward(model, tokens, {});
  const Eigen::Index length = static_cast<Eigen::Index>(tokens.size());

  const double peak = pass.logits.maxCoeff();
  VectorXd probs = (pass.logits.array() - peak).exp();
  const double total = probs.sum();
  probs /= total;
  const double loss = -(pass.logits[target] - peak - std::log(total));
  if (gradient == nullptr) return loss;

  TransformerWeights& g = *gradient;
  RowVectorXd d_logits = probs.transpose();
  d_logits[target] -= 1.0;
  g.unembedding += pass.final_hidden.transpose() * d_logits;
  const MatrixXd d_hidden = d_logits * w.unembedding.transpose();
  MatrixXd dx = MatrixXd::Zero(length, model.topology.d_model);
  dx.row(length - 1) = layer_norm_backward(d_hidden, w.final_gain, pass.final_norm, g.final_gain, g.final_bias);

  const double scale = 1.0 / std::sqrt(static_cast<double>(model.topology.d_model));
  for (std::size_t li = w.layers.size(); li-- > 0;) {
    const LayerWeights& lw = w.layers[li];
    LayerWeights& lg = g.layers[li];
    const LayerCache& c = pass.layers[li];

    // MLP block.
    lg.w_out += c.post.transpose() * dx;
    lg.b_out += dx.colwise().sum().transpose();
    MatrixXd d_pre = (dx * lw.w_out.transpose()).cwiseProduct(
        c.pre.unaryExpr([](double z) { return gelu_derivative(z); }));
    lg.w_in += c.mlp_in.transpose() * d_pre;
    lg.b_in += d_pre.colwise().sum().transpose();
    const MatrixXd d_mlp_in = d_pre * lw.w_in.transpose();
    MatrixXd d_middle = dx + layer_norm_backward(d_mlp_in, lw.ln2_gain, c.norm2, lg.ln2_gain, lg.ln2_bias);

    // Attention block.
    lg.w_output += c.attended.transpose() * d_middle;
    const MatrixXd d_attended = d_middle * lw.w_output.transpose();
    const MatrixXd d_probs = d_attended * c.value.transpose();
    const MatrixXd d_value = c.probs.transpose() * d_attended;
    const Eigen::VectorXd row_dot = (d_probs.array() * c.probs.array()).rowwise().sum();
    const MatrixXd d_scores = (c.probs.array() * (d_probs.colwise() - row_dot).array()).matrix();
    const MatrixXd d_query = scale * d_scores * c.key;
    const MatrixXd d_key = scale * d_scores.transpose() * c.query;
    lg.w_query += c.attn_in.transpose() * d_query;
    lg.w_key += c.attn_in.transpose() * d_key;
    lg.w_value += c.attn_in.transpose() * d_value;
    const MatrixXd d_attn_in =
        d_query * lw.w_query.transpose() + d_key * lw.w_key.transpose() + d_value * lw.w_value.transpose();
    dx = d_middle + layer_norm_backward(d_attn_in, lw.ln1_gain, c.norm1, lg.ln1_gain, lg.ln1_bias);
  }

  for (Eigen::Index t = 0; t < length; ++t) {
    g.token_embedding.row(tokens[static_cast<std::size_t>(t)]) += dx.row(t);
    g.position_embedding.row(t) += dx.row(t);
  }
  return loss;
}

}  // namespace clens
