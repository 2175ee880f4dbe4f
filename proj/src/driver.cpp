#include "conceptlens/driver.hpp"

#include <cmath>
#include <cstring>

namespace clens {

CaptureRequest CaptureRequest::all_layers(int n_layers) {
  CaptureRequest req;
  for (int l = 0; l < n_layers; ++l) {
    req.residual_layers.push_back(l);
    req.mlp_layers.push_back(l);
  }
  return req;
}

RunRequest RunRequest::for_item(const Item& item) {
  RunRequest req;
  req.tokens = item.tokens;
  req.text = item.text;
  return req;
}

bool operator==(const LayerVector& a, const LayerVector& b) {
  return a.layer == b.layer && a.values.size() == b.values.size() &&
         std::memcmp(a.values.data(), b.values.data(), static_cast<std::size_t>(a.values.size()) * sizeof(float)) == 0;
}

bool operator==(const RunResult& a, const RunResult& b) {
  if (a.residual != b.residual || a.mlp != b.mlp) return false;
  if (a.label_logits.has_value() != b.label_logits.has_value()) return false;
  if (!a.label_logits) return true;
  return a.label_logits->size() == b.label_logits->size() &&
         std::memcmp(a.label_logits->data(), b.label_logits->data(),
                     static_cast<std::size_t>(a.label_logits->size()) * sizeof(double)) == 0;
}

namespace {

const Eigen::VectorXf& find_layer(const std::vector<LayerVector>& v, int layer, const char* what) {
  for (const auto& entry : v)
    if (entry.layer == layer) return entry.values;
  throw Error(ErrorCode::out_of_range, std::string("result holds no ") + what + " capture for layer " + std::to_string(layer));
}

}  // namespace

const Eigen::VectorXf& RunResult::residual_at(int layer) const { return find_layer(residual, layer, "residual"); }
const Eigen::VectorXf& RunResult::mlp_at(int layer) const { return find_layer(mlp, layer, "mlp"); }

DriverError::DriverError(std::string code, const std::string& detail)
    : Error(ErrorCode::driver, code + ": " + detail), code_(std::move(code)), detail_(detail) {}

std::vector<RunResult> Driver::run_batch(std::span<const RunRequest> requests) {
  std::vector<RunResult> out;
  out.reserve(requests.size());
  for (const auto& r : requests) out.push_back(run(r));
  return out;
}

void check_request(const RunRequest& request, const ModelTopology& topology, int context_length) {
  if (!request.tokens || request.tokens->empty()) throw DriverError("no_tokens", "request carries no token sequence");
  const auto& tokens = *request.tokens;
  if (context_length > 0 && static_cast<int>(tokens.size()) > context_length)
    throw DriverError("bad_token", "sequence of " + std::to_string(tokens.size()) + " tokens exceeds context " +
                                       std::to_string(context_length));
  for (std::size_t t = 0; t < tokens.size(); ++t)
    if (tokens[t] < 0 || tokens[t] >= topology.vocab_size)
      throw DriverError("bad_token", "token " + std::to_string(tokens[t]) + " at position " + std::to_string(t) +
                                         " outside vocabulary");
  const auto check_layer = [&](int layer, const char* field) {
    if (layer < 0 || layer >= topology.n_layers)
      throw DriverError("bad_layer", std::string(field) + " layer " + std::to_string(layer) + " outside [0, " +
                                         std::to_string(topology.n_layers) + ")");
  };
  for (int l : request.capture.residual_layers) check_layer(l, "residual");
  for (int l : request.capture.mlp_layers) check_layer(l, "mlp");
  if (request.capture.position) {
    const int p = *request.capture.position;
    if (p < 0 || p >= static_cast<int>(tokens.size()))
      throw DriverError("bad_position", "capture position " + std::to_string(p) + " outside sequence");
  }
  for (const auto& o : request.interventions) {
    check_layer(o.layer, "intervention");
    if (o.unit < 0 || o.unit >= topology.mlp_width)
      throw DriverError("bad_unit", "intervention unit " + std::to_string(o.unit) + " outside [0, " +
                                        std::to_string(topology.mlp_width) + ")");
    if (!std::isfinite(o.value)) throw DriverError("schema", "intervention value is not finite");
  }
}

ReferenceDriver::ReferenceDriver(ToyTransformer model) : model_(std::move(model)) { model_.validate(); }

std::string ReferenceDriver::description() const {
  return "reference/" + std::string(to_string(model_.provenance));
}

RunResult ReferenceDriver::run(const RunRequest& request) {
  check_request(request, model_.topology, model_.context_length);
  const bool capture = !request.capture.empty();
  const auto forward_result =
      forward_tokens(model_, *request.tokens, request.interventions, capture, request.capture.position);
  RunResult out;
  if (capture) {
    const auto& rec = *forward_result.captures;
    for (int l : request.capture.residual_layers) out.residual.push_back({l, rec.residual[static_cast<std::size_t>(l)]});
    for (int l : request.capture.mlp_layers) out.mlp.push_back({l, rec.mlp_pre[static_cast<std::size_t>(l)]});
  }
  if (request.generate) out.label_logits = label_logits(model_.topology, forward_result.final_logits);
  return out;
}

std::vector<ActivationRecord> capture_records(Driver& driver, const LabeledDataset& dataset) {
  const auto& topo = driver.topology();
  std::vector<RunRequest> requests;
  requests.reserve(dataset.size());
  for (const auto& item : dataset.items) {
    auto req = RunRequest::for_item(item);
    req.capture = CaptureRequest::all_layers(topo.n_layers);
    requests.push_back(std::move(req));
  }
  const auto results = driver.run_batch(requests);
  std::vector<ActivationRecord> records;
  records.reserve(dataset.size());
  for (std::size_t i = 0; i < results.size(); ++i) {
    ActivationRecord rec;
    rec.item_id = dataset.items[i].id;
    for (int l = 0; l < topo.n_layers; ++l) {
      rec.residual.push_back(results[i].residual_at(l));
      rec.mlp_pre.push_back(results[i].mlp_at(l));
    }
    validate_record(rec, topo);
    records.push_back(std::move(rec));
  }
  return records;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  Eigen::VectorXd p = (logits.array() - logits.maxCoeff()).exp();
  return p / p.sum();
}

int argmax_lowest(const Eigen::VectorXd& values) {
  int best = 0;
  for (Eigen::Index i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = static_cast<int>(i);
  return best;
}

}  // namespace clens
