#pragma once

#include "conceptlens/core.hpp"
#include "conceptlens/error.hpp"
#include "conceptlens/transformer.hpp"

#include <Eigen/Core>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace clens {

struct CaptureRequest {
  std::vector<int> residual_layers;
  std::vector<int> mlp_layers;
  CapturePosition position;  // std::nullopt = final token

  static CaptureRequest all_layers(int n_layers);
  bool empty() const { return residual_layers.empty() && mlp_layers.empty(); }
  bool operator==(const CaptureRequest&) const = default;
};

/// One forward pass. Interventions overwrite final-token MLP pre-activations;
/// `generate` asks for label-token logits of the next-token prediction.
struct RunRequest {
  std::optional<std::vector<Token>> tokens;
  std::optional<std::string> text;
  CaptureRequest capture;
  std::vector<UnitOverride> interventions;
  bool generate = false;

  static RunRequest for_item(const Item& item);
  bool operator==(const RunRequest&) const = default;
};

struct LayerVector {
  int layer = 0;
  Eigen::VectorXf values;
};

bool operator==(const LayerVector& a, const LayerVector& b);

struct RunResult {
  std::vector<LayerVector> residual;
  std::vector<LayerVector> mlp;
  std::optional<Eigen::VectorXd> label_logits;  // indexed by concept id

  const Eigen::VectorXf& residual_at(int layer) const;
  const Eigen::VectorXf& mlp_at(int layer) const;
};

bool operator==(const RunResult& a, const RunResult& b);

/// Failure reported by a driver for one request. `code` is one of the wire
/// error codes (bad_layer, bad_unit, bad_token, bad_position, no_tokens,
/// malformed, schema, internal).
class DriverError : public Error {
 public:
  DriverError(std::string code, const std::string& detail);
  const std::string& driver_code() const { return code_; }
  const std::string& detail() const { return detail_; }

 private:
  std::string code_;
  std::string detail_;
};

/// A model runtime that answers capture and intervention requests.
class Driver {
 public:
  virtual ~Driver() = default;
  virtual const ModelTopology& topology() const = 0;
  /// Longest accepted token sequence, when the runtime has one.
  virtual std::optional<int> context_length() const { return std::nullopt; }
  /// Short name of the model behind the driver, recorded in trace headers.
  virtual std::string description() const = 0;
  virtual RunResult run(const RunRequest& request) = 0;
  /// Results in request order. The default runs requests one at a time.
  virtual std::vector<RunResult> run_batch(std::span<const RunRequest> requests);
};

/// In-process driver over a reference transformer.
class ReferenceDriver final : public Driver {
 public:
  explicit ReferenceDriver(ToyTransformer model);

  const ModelTopology& topology() const override { return model_.topology; }
  std::optional<int> context_length() const override { return model_.context_length; }
  std::string description() const override;
  RunResult run(const RunRequest& request) override;
  const ToyTransformer& model() const { return model_; }

 private:
  ToyTransformer model_;
};

/// Checks a request against a topology, throwing the matching DriverError.
void check_request(const RunRequest& request, const ModelTopology& topology, int context_length);

/// Captures every layer at the final token of each item, in dataset order.
std::vector<ActivationRecord> capture_records(Driver& driver, const LabeledDataset& dataset);

/// Softmax over label logits.
Eigen::VectorXd softmax(const Eigen::VectorXd& logits);

/// Index of the largest entry, lowest index among ties.
int argmax_lowest(const Eigen::VectorXd& values);

}  // namespace clens
