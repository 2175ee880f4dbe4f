#pragma once

#include "conceptlens/core.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace clens {

struct ProbeConfig {
  double l2_lambda = 1e-2;
  int max_iter = 5000;
  double tol = 1e-6;
  /// Keep the objective value of every iteration in ProbeModel::objective_trace.
  bool record_trace = false;
};

struct Standardization {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;  // > 0; constant features get scale 1

  template <typename Derived>
  Eigen::MatrixXd apply(const Eigen::MatrixBase<Derived>& rows) const {
    return (rows.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
  }
};

Standardization fit_standardization(const Eigen::MatrixXd& features);

/// Softmax linear readout over standardized features.
struct ProbeModel {
  int layer = -1;
  Eigen::MatrixXd weights;  // K x d
  Eigen::VectorXd bias;     // K
  Standardization standardization;
  bool converged = false;
  int iterations = 0;
  double objective = 0.0;
  double gradient_norm = 0.0;
  std::vector<double> objective_trace;

  int num_classes() const { return static_cast<int>(bias.size()); }
  int dimension() const { return static_cast<int>(weights.cols()); }
};

/// Minimizes mean multinomial cross-entropy + (lambda / 2) ||W||^2 from a
/// zero start by gradient descent with backtracking line search. The bias is
/// not penalized. Non-convergence is reported on the model, not thrown.
ProbeModel fit_probe(const Eigen::MatrixXd& features, std::span<const ConceptId> labels, int num_classes,
                     const ProbeConfig& config = {}, int layer = -1);

struct ProbePrediction {
  Eigen::VectorXd probabilities;
  ConceptId argmax = 0;  // lowest id among ties
};

ProbePrediction probe_predict(const ProbeModel& model, const Eigen::VectorXd& feature);

/// Overall and per-concept held-out accuracy of one layer.
struct LayerAccuracy {
  int layer = 0;
  double overall = 0.0;
  std::vector<double> per_concept;
  std::vector<int> support;
  std::vector<ConceptId> predictions;  // held-out prediction per item
  int non_converged_folds = 0;
};

/// The probe fitted for one LOOCV fold: standardization and parameters see
/// only the rows other than `held_out`.
ProbeModel fit_fold(const Eigen::MatrixXd& features, std::span<const ConceptId> labels, int num_classes,
                    std::size_t held_out, const ProbeConfig& config = {});

LayerAccuracy loocv_accuracy(const Eigen::MatrixXd& features, std::span<const ConceptId> labels,
                             int num_classes, const ProbeConfig& config = {}, int layer = 0);

LayerAccuracy loocv_layer_accuracy(const std::vector<ActivationRecord>& records, const LabeledDataset& dataset,
                                   int layer, const ProbeConfig& config = {});

struct ProbeReport {
  int n_layers = 0;
  std::vector<std::string> concept_names;
  std::vector<LayerAccuracy> layers;

  double normalized_depth(int layer) const;
  /// Highest overall accuracy, lowest layer among ties.
  int best_layer() const;
};

ProbeReport probe_curve(const std::vector<ActivationRecord>& records, const LabeledDataset& dataset,
                        const ProbeConfig& config = {});

std::string probe_report_csv(const ProbeReport& report);
nlohmann::json probe_report_json(const ProbeReport& report);

nlohmann::json probe_to_json(const ProbeModel& model);
ProbeModel probe_from_json(const nlohmann::json& doc);

}  // namespace clens
