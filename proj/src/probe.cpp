#include "conceptlens/probe.hpp"

#include "conceptlens/error.hpp"
#include "conceptlens/text_format.hpp"

#include <cmath>

namespace clens {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr double kArmijo = 1e-4;
constexpr double kMinStep = 1e-12;

// Row-wise log-softmax.
MatrixXd log_softmax(const MatrixXd& logits) {
  MatrixXd out = logits;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double peak = out.row(r).maxCoeff();
    out.row(r).array() -= peak;
    out.row(r).array() -= std::log(out.row(r).array().exp().sum());
  }
  return out;
}

struct Objective {
  const MatrixXd& x;  // standardized, N x d
  const MatrixXd& y;  // one-hot, N x K
  double lambda;

  double value(const MatrixXd& w, const VectorXd& b) const {
    MatrixXd logits = x * w.transpose();
    logits.rowwise() += b.transpose();
    const double data = -(log_softmax(logits).array() * y.array()).sum() / static_cast<double>(x.rows());
    return data + 0.5 * lambda * w.squaredNorm();
  }

  double value_and_gradient(const MatrixXd& w, const VectorXd& b, MatrixXd& grad_w, VectorXd& grad_b) const {
    MatrixXd logits = x * w.transpose();
    logits.rowwise() += b.transpose();
    const MatrixXd log_probs = log_softmax(logits);
    const double n = static_cast<double>(x.rows());
    const MatrixXd residual = (log_probs.array().exp().matrix() - y) / n;
    grad_w = residual.transpose() * x + lambda * w;
    grad_b = residual.colwise().sum().transpose();
    return -(log_probs.array() * y.array()).sum() / n + 0.5 * lambda * w.squaredNorm();
  }
};

void check_labels(std::span<const ConceptId> labels, int num_classes, Eigen::Index rows) {
  if (static_cast<Eigen::Index>(labels.size()) != rows)
    throw Error(ErrorCode::length_mismatch, "feature rows and labels differ in count");
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (ConceptId c : labels) {
    if (c < 0 || c >= num_classes) throw Error(ErrorCode::out_of_range, "label outside [0, K)");
    ++counts[static_cast<std::size_t>(c)];
  }
  for (int c = 0; c < num_classes; ++c)
    if (counts[static_cast<std::size_t>(c)] == 0)
      throw Error(ErrorCode::missing_class, "class " + std::to_string(c) + " has no training items");
}

}  // namespace

Standardization fit_standardization(const MatrixXd& features) {
  Standardization s;
  const double n = static_cast<double>(features.rows());
  s.mean = features.colwise().sum().transpose() / n;
  s.scale = ((features.rowwise() - s.mean.transpose()).colwise().squaredNorm().transpose() / n).cwiseSqrt();
  for (Eigen::Index j = 0; j < s.scale.size(); ++j)
    if (!(s.scale[j] > 1e-12)) s.scale[j] = 1.0;
  return s;
}

ProbeModel fit_probe(const MatrixXd& features, std::span<const ConceptId> labels, int num_classes,
                     const ProbeConfig& config, int layer) {
  if (num_classes < 2) throw Error(ErrorCode::invalid_argument, "probe needs K >= 2");
  if (features.rows() < num_classes) throw Error(ErrorCode::invalid_argument, "probe needs N >= K");
  if (!features.allFinite()) throw Error(ErrorCode::non_finite, "probe features are not finite");
  check_labels(labels, num_classes, features.rows());

  ProbeModel model;
  model.layer = layer;
  model.standardization = fit_standardization(features);
  const MatrixXd x = model.standardization.apply(features);
  MatrixXd y = MatrixXd::Zero(features.rows(), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) y(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  const Objective objective{x, y, config.l2_lambda};

  MatrixXd w = MatrixXd::Zero(num_classes, features.cols());
  VectorXd b = VectorXd::Zero(num_classes);
  MatrixXd grad_w;
  VectorXd grad_b;
  double value = objective.value_and_gradient(w, b, grad_w, grad_b);
  double step = 1.0;
  if (config.record_trace) model.objective_trace.push_back(value);

  int iter = 0;
  for (; iter < config.max_iter; ++iter) {
    const double grad_sq = grad_w.squaredNorm() + grad_b.squaredNorm();
    if (std::sqrt(grad_sq) <= config.tol) {
      model.converged = true;
      break;
    }
    // Backtracking from a doubled previous step.
    step = std::min(step * 2.0, 1e6);
    double candidate = 0.0;
    for (;;) {
      candidate = objective.value(w - step * grad_w, b - step * grad_b);
      if (candidate <= value - kArmijo * step * grad_sq) break;
      step *= 0.5;
      if (step < kMinStep) break;
    }
    if (step < kMinStep) break;
    w -= step * grad_w;
    b -= step * grad_b;
    value = objective.value_and_gradient(w, b, grad_w, grad_b);
    if (config.record_trace) model.objective_trace.push_back(value);
  }
  model.gradient_norm = std::sqrt(grad_w.squaredNorm() + grad_b.squaredNorm());
  if (!model.converged && model.gradient_norm <= config.tol) model.converged = true;
  model.iterations = iter;
  model.objective = value;
  model.weights = std::move(w);
  model.bias = std::move(b);
  return model;
}

ProbePrediction probe_predict(const ProbeModel& model, const VectorXd& feature) {
  if (feature.size() != model.dimension())
    throw Error(ErrorCode::length_mismatch, "feature dimension " + std::to_string(feature.size()) +
                                                " differs from probe dimension " + std::to_string(model.dimension()));
  if (!feature.allFinite()) throw Error(ErrorCode::non_finite, "probe input is not finite");
  const VectorXd standardized =
      (feature - model.standardization.mean).cwiseQuotient(model.standardization.scale);
  VectorXd logits = model.weights * standardized + model.bias;
  ProbePrediction out;
  for (Eigen::Index c = 1; c < logits.size(); ++c)
    if (logits[c] > logits[out.argmax]) out.argmax = static_cast<ConceptId>(c);
  logits.array() -= logits.maxCoeff();
  out.probabilities = logits.array().exp();
  out.probabilities /= out.probabilities.sum();
  return out;
}

ProbeModel fit_fold(const MatrixXd& features, std::span<const ConceptId> labels, int num_classes,
                    std::size_t held_out, const ProbeConfig& config) {
  const auto n = static_cast<Eigen::Index>(labels.size());
  MatrixXd train(n - 1, features.cols());
  std::vector<ConceptId> train_labels;
  train_labels.reserve(static_cast<std::size_t>(n - 1));
  for (Eigen::Index i = 0, r = 0; i < n; ++i) {
    if (static_cast<std::size_t>(i) == held_out) continue;
    train.row(r++) = features.row(i);
    train_labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  return fit_probe(train, train_labels, num_classes, config);
}

LayerAccuracy loocv_accuracy(const MatrixXd& features, std::span<const ConceptId> labels, int num_classes,
                             const ProbeConfig& config, int layer) {
  check_labels(labels, num_classes, features.rows());
  const std::size_t n = labels.size();
  if (static_cast<int>(n) < num_classes + 1)
    throw Error(ErrorCode::missing_class, "layer " + std::to_string(layer) + ": LOOCV needs N >= K + 1");
  LayerAccuracy out;
  out.layer = layer;
  out.support.assign(static_cast<std::size_t>(num_classes), 0);
  for (ConceptId c : labels) ++out.support[static_cast<std::size_t>(c)];
  for (int c = 0; c < num_classes; ++c)
    if (out.support[static_cast<std::size_t>(c)] < 2)
      throw Error(ErrorCode::missing_class, "layer " + std::to_string(layer) + ": holding out the only item of class " +
                                                std::to_string(c) + " leaves a fold without that class");

  std::vector<int> hits(static_cast<std::size_t>(num_classes), 0);
  out.predictions.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const ProbeModel fold = fit_fold(features, labels, num_classes, i, config);
    if (!fold.converged) ++out.non_converged_folds;
    out.predictions[i] = probe_predict(fold, features.row(static_cast<Eigen::Index>(i)).transpose()).argmax;
    if (out.predictions[i] == labels[i]) ++hits[static_cast<std::size_t>(labels[i])];
  }
  int total = 0;
  for (int c = 0; c < num_classes; ++c) {
    total += hits[static_cast<std::size_t>(c)];
    out.per_concept.push_back(static_cast<double>(hits[static_cast<std::size_t>(c)]) /
                              out.support[static_cast<std::size_t>(c)]);
  }
  out.overall = static_cast<double>(total) / static_cast<double>(n);
  return out;
}

LayerAccuracy loocv_layer_accuracy(const std::vector<ActivationRecord>& records, const LabeledDataset& dataset,
                                   int layer, const ProbeConfig& config) {
  if (records.size() != dataset.size()) throw Error(ErrorCode::length_mismatch, "records and dataset differ in size");
  return loocv_accuracy(residual_matrix(records, layer), dataset.item_labels, dataset.num_concepts(), config, layer);
}

double ProbeReport::normalized_depth(int layer) const {
  return n_layers <= 1 ? 0.0 : static_cast<double>(layer) / static_cast<double>(n_layers - 1);
}

int ProbeReport::best_layer() const {
  int best = 0;
  for (std::size_t l = 1; l < layers.size(); ++l)
    if (layers[l].overall > layers[static_cast<std::size_t>(best)].overall) best = static_cast<int>(l);
  return best;
}

ProbeReport probe_curve(const std::vector<ActivationRecord>& records, const LabeledDataset& dataset,
                        const ProbeConfig& config) {
  if (records.empty()) throw Error(ErrorCode::empty_dataset, "no activation records");
  ProbeReport report;
  report.n_layers = static_cast<int>(records.front().residual.size());
  for (const auto& label : dataset.labels) report.concept_names.push_back(label.name);
  for (int l = 0; l < report.n_layers; ++l) report.layers.push_back(loocv_layer_accuracy(records, dataset, l, config));
  return report;
}

std::string probe_report_csv(const ProbeReport& report) {
  std::string out = "layer,normalized_depth,concept,accuracy\n";
  for (const auto& layer : report.layers) {
    const std::string prefix = std::to_string(layer.layer) + "," + format_double(report.normalized_depth(layer.layer)) + ",";
    for (std::size_t c = 0; c < layer.per_concept.size(); ++c)
      out += prefix + csv_field(report.concept_names[c]) + "," + format_double(layer.per_concept[c]) + "\n";
    out += prefix + "Overall," + format_double(layer.overall) + "\n";
  }
  return out;
}

nlohmann::json probe_report_json(const ProbeReport& report) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : report.layers) {
    layers.push_back({{"layer", layer.layer},
                      {"normalized_depth", report.normalized_depth(layer.layer)},
                      {"overall", layer.overall},
                      {"per_concept", layer.per_concept},
                      {"support", layer.support},
                      {"predictions", layer.predictions},
                      {"non_converged_folds", layer.non_converged_folds}});
  }
  return {{"n_layers", report.n_layers},
          {"concepts", report.concept_names},
          {"best_layer", report.best_layer()},
          {"layers", layers}};
}

namespace {

nlohmann::json vector_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

VectorXd vector_from(const nlohmann::json& doc) {
  const auto values = doc.get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

}  // namespace

nlohmann::json probe_to_json(const ProbeModel& model) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index k = 0; k < model.weights.rows(); ++k) rows.push_back(vector_json(model.weights.row(k).transpose()));
  return {{"layer", model.layer},
          {"weights", rows},
          {"bias", vector_json(model.bias)},
          {"mean", vector_json(model.standardization.mean)},
          {"scale", vector_json(model.standardization.scale)},
          {"converged", model.converged},
          {"iterations", model.iterations},
          {"objective", model.objective}};
}

ProbeModel probe_from_json(const nlohmann::json& doc) {
  ProbeModel model;
  try {
    model.layer = doc.at("layer").get<int>();
    model.bias = vector_from(doc.at("bias"));
    model.standardization.mean = vector_from(doc.at("mean"));
    model.standardization.scale = vector_from(doc.at("scale"));
    const auto& rows = doc.at("weights");
    model.weights.resize(static_cast<Eigen::Index>(rows.size()), model.standardization.mean.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const VectorXd row = vector_from(rows[k]);
      if (row.size() != model.weights.cols()) throw Error(ErrorCode::parse, "probe weight row has wrong length");
      model.weights.row(static_cast<Eigen::Index>(k)) = row.transpose();
    }
    model.converged = doc.value("converged", true);
    model.iterations = doc.value("iterations", 0);
    model.objective = doc.value("objective", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, std::string("probe JSON: ") + e.what());
  }
  if (model.bias.size() != model.weights.rows() || model.standardization.scale.size() != model.weights.cols())
    throw Error(ErrorCode::parse, "probe JSON has inconsistent shapes");
  if ((model.standardization.scale.array() <= 0.0).any())
    throw Error(ErrorCode::parse, "probe standardization scale must be positive");
  return model;
}

}  // namespace clens
