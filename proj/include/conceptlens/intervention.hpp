#pragma once

#include "conceptlens/core.hpp"
#include "conceptlens/driver.hpp"
#include "conceptlens/error.hpp"
#include "conceptlens/probe.hpp"
#include "conceptlens/selectivity.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace clens {

/// Linear interpolation between the order statistics around p (n - 1)
/// ("type 7"). `sorted` must be ascending.
double quantile_sorted(std::span<const double> sorted, double p);

template <typename Derived>
double quantile(const Eigen::DenseBase<Derived>& values, double p) {
  std::vector<double> sorted(static_cast<std::size_t>(values.size()));
  for (Eigen::Index i = 0; i < values.size(); ++i) sorted[static_cast<std::size_t>(i)] = static_cast<double>(values.derived().coeff(i));
  std::sort(sorted.begin(), sorted.end());
  return quantile_sorted(sorted, p);
}

/// Per (layer, unit, concept): the upper quantile of the unit over the
/// concept's items and the lower quantile over every other item.
struct QuantileTable {
  double p_low = 0.01;
  double p_high = 0.99;
  std::string method = "type7";
  int num_concepts = 0;
  std::vector<Eigen::MatrixXd> upper;  // per layer, m x K
  std::vector<Eigen::MatrixXd> lower;

  int n_layers() const { return static_cast<int>(upper.size()); }
  int mlp_width() const { return upper.empty() ? 0 : static_cast<int>(upper.front().rows()); }
  double upper_value(UnitCoord unit, ConceptId concept_id) const;
  double lower_value(UnitCoord unit, ConceptId concept_id) const;
};

QuantileTable build_quantile_table(const UnitResponseMatrix& responses, const LabeledDataset& dataset,
                                   double p_low = 0.01, double p_high = 0.99);

enum class InterventionMode { boost_only, suppress_only, both };
enum class InterventionScope { probe_path, first_generation_step };

std::string mode_name(InterventionMode mode);
std::string scope_name(InterventionScope scope);
InterventionMode parse_mode(const std::string& name);
InterventionScope parse_scope(const std::string& name);

struct UnitAssignment {
  int layer = 0;
  int unit = 0;
  double value = 0.0;

  bool operator==(const UnitAssignment&) const = default;
};

struct InterventionSpec {
  ConceptId target = 0;      // c+
  ConceptId suppressed = 0;  // c-
  InterventionMode mode = InterventionMode::both;
  InterventionScope scope = InterventionScope::probe_path;
  std::vector<UnitAssignment> boost;
  std::vector<UnitAssignment> suppress;

  bool empty() const { return boost.empty() && suppress.empty(); }
  std::vector<UnitOverride> overrides() const;
};

using ConceptSets = std::map<ConceptId, ConceptUnitSet>;

/// Boost entries take the upper quantile of (unit, target); suppress entries
/// the lower quantile of (unit, true_label). A unit in both sets keeps only
/// its boost entry.
InterventionSpec assemble_intervention(ConceptId target, ConceptId true_label, const ConceptSets& sets,
                                       const QuantileTable& table, InterventionMode mode, InterventionScope scope);

/// One intervention trial: an item evaluated under one target concept.
struct Trial {
  ConceptId true_label = 0;
  ConceptId target = 0;
  ConceptId baseline = 0;
  ConceptId intervened = 0;
  double baseline_target_prob = 0.0;
  double intervened_target_prob = 0.0;
};

struct TransitionCell {
  ConceptId true_label = 0;
  ConceptId target = 0;
  int n_eval = 0;
  double tsr = 0.0;
  double spillover = 0.0;
  double unchanged = 0.0;
  std::vector<int> predicted;  // count per predicted concept
  double baseline_target_prob = 0.0;    // mean over evaluated trials
  double intervened_target_prob = 0.0;
};

struct TargetSummary {
  ConceptId target = 0;
  int n_eval = 0;
  double tsr = 0.0;
  double spillover = 0.0;
  double baseline_target_prob = 0.0;
  double intervened_target_prob = 0.0;
};

struct TransitionReport {
  int num_concepts = 0;
  InterventionMode mode = InterventionMode::both;
  InterventionScope scope = InterventionScope::probe_path;
  int layer = -1;  // probe readout layer, -1 for generation
  int n_items = 0;
  int n_baseline_correct = 0;
  std::vector<TransitionCell> cells;  // every (true, target) with true != target, row-major

  bool empty() const { return n_baseline_correct == 0; }
  const TransitionCell& cell(ConceptId true_label, ConceptId target) const;
  int n_eval() const;
  /// Trial-weighted rates over every evaluated trial.
  double tsr() const;
  double spillover() const;
  double unchanged() const;
  /// Per target concept, pooled over true labels.
  std::vector<TargetSummary> per_target() const;
  /// Mean over targets with trials of the per-target TSR.
  double mean_tsr() const;
  /// Counts of (true label, intervened prediction) over all trials.
  std::vector<std::vector<int>> transition_matrix() const;
};

/// Scores trials; trials whose baseline misses the true label or whose
/// target equals the true label are excluded.
TransitionReport score_trials(std::span<const Trial> trials, int num_concepts);

TransitionReport transition_metrics(std::span<const ConceptId> baseline_preds, std::span<const ConceptId> intervened_preds,
                                    std::span<const ConceptId> true_labels, std::span<const ConceptId> targets,
                                    int num_concepts);

/// Interventions read out through a frozen probe on the residual stream at
/// the probe's layer.
TransitionReport evaluate_probe_intervention(Driver& driver, const ProbeModel& probe, const LabeledDataset& dataset,
                                             const ConceptSets& sets, const QuantileTable& table,
                                             InterventionMode mode);

/// Interventions read out as the label-token argmax of the next-token
/// prediction.
TransitionReport evaluate_generation_intervention(Driver& driver, const LabeledDataset& dataset,
                                                  const ConceptSets& sets, const QuantileTable& table,
                                                  InterventionMode mode);

std::string transition_csv(const TransitionReport& report, const std::vector<std::string>& concept_names);
nlohmann::json transition_json(const TransitionReport& report, const std::vector<std::string>& concept_names);

}  // namespace clens
