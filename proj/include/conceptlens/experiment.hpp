#pragma once

#include "conceptlens/core.hpp"
#include "conceptlens/driver.hpp"
#include "conceptlens/intervention.hpp"
#include "conceptlens/probe.hpp"
#include "conceptlens/selectivity.hpp"
#include "conceptlens/synthetic.hpp"
#include "conceptlens/training.hpp"
#include "conceptlens/transformer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace clens {

enum class ModelKind { planted, checkpoint, external };

struct ModelSource {
  ModelKind kind = ModelKind::planted;
  std::string location;  // checkpoint path or driver command
};

struct PlantedShape {
  int n_layers = 4;
  int d_model = 32;
  int mlp_width = 128;
};

/// Everything that determines an experiment's outputs. Unset optionals take
/// per-command defaults.
struct ExperimentConfig {
  std::optional<std::string> dataset;  // otherwise the synthetic generator
  SyntheticConfig synthetic;
  std::optional<std::string> model;  // "planted" or a checkpoint path
  std::optional<std::string> driver_cmd;
  PlantedShape planted;
  std::optional<std::string> preset;  // fig4 | fig6 | intervention | custom
  std::optional<int> count;
  std::optional<double> fraction;
  std::optional<int> layer;
  InterventionMode mode = InterventionMode::both;
  InterventionScope scope = InterventionScope::probe_path;
  std::string out = "out";
  std::uint64_t seed = 0;
  int mc_draws = 10000;
  TrainConfig train;
  std::optional<std::string> embeddings;  // directory of external 2-D embeddings
  std::optional<std::string> trace;       // reuse a captured trace

  /// Exactly one model source; planted when none is named.
  ModelSource model_source() const;
  /// Preset (or `default_preset`) with count/fraction/layer applied on top.
  SelectionRule selection_rule(const std::string& default_preset) const;

  nlohmann::json to_json() const;
  /// Unknown keys are rejected so typos do not pass silently.
  static ExperimentConfig from_json(const nlohmann::json& doc);
  /// SHA-256 of the canonical JSON, leaving out the output directory.
  std::string hash() const;
};

LabeledDataset resolve_dataset(const ExperimentConfig& config);

/// Reference model named by the config (planted or checkpoint).
ToyTransformer reference_model(const ExperimentConfig& config, const LabeledDataset& dataset);

/// In-process driver for planted or checkpoint sources, a child-process
/// protocol session for external ones.
std::unique_ptr<Driver> open_driver(const ExperimentConfig& config, const LabeledDataset& dataset);

/// Report files keyed by relative path.
using Artifacts = std::map<std::string, std::string>;

/// Writes every artifact atomically below `directory`.
void write_artifacts(const Artifacts& artifacts, const std::filesystem::path& directory);

/// Lazily computed analysis stages over one driver. Each *_artifacts call
/// renders the reports of one command.
class Pipeline {
 public:
  Pipeline(ExperimentConfig config, const LabeledDataset& dataset, Driver& driver);

  const std::vector<ActivationRecord>& records();
  const ProbeReport& probe_report();
  /// Probe fit on every item at the best layer.
  const ProbeModel& frozen_probe();
  ConceptSets select(const SelectionRule& rule);
  TransitionReport intervene();

  Artifacts capture_artifacts();
  Artifacts probe_artifacts();
  Artifacts select_artifacts();
  Artifacts overlap_artifacts();
  Artifacts intervene_artifacts();
  Artifacts geometry_artifacts();
  /// Every stage above, in order.
  Artifacts all_artifacts();

  const ExperimentConfig& config() const { return config_; }

 private:
  std::string provenance() const;

  ExperimentConfig config_;
  const LabeledDataset& dataset_;
  Driver& driver_;
  std::optional<std::vector<ActivationRecord>> records_;
  std::optional<std::string> trace_bytes_;
  std::optional<ProbeReport> probe_report_;
  std::optional<ProbeModel> frozen_probe_;
  std::optional<UnitResponseMatrix> responses_;
  std::map<ConceptId, UnitRanking> rankings_;
};

}  // namespace clens
