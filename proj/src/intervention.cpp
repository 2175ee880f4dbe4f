#include "conceptlens/intervention.hpp"

#include "conceptlens/text_format.hpp"

#include <set>

namespace clens {

double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw Error(ErrorCode::empty_dataset, "quantile of an empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::invalid_argument, "quantile level must be in [0, 1]");
  const double h = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = h - static_cast<double>(lo);
  if (frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

namespace {

void check_coordinate(const QuantileTable& table, UnitCoord unit, ConceptId concept_id) {
  if (unit.layer < 0 || unit.layer >= table.n_layers() || unit.unit < 0 || unit.unit >= table.mlp_width() ||
      concept_id < 0 || concept_id >= table.num_concepts)
    throw Error(ErrorCode::out_of_range, "quantile table has no entry for layer " + std::to_string(unit.layer) +
                                             " unit " + std::to_string(unit.unit) + " concept " +
                                             std::to_string(concept_id));
}

}  // namespace

double QuantileTable::upper_value(UnitCoord unit, ConceptId concept_id) const {
  check_coordinate(*this, unit, concept_id);
  return upper[static_cast<std::size_t>(unit.layer)](unit.unit, concept_id);
}

double QuantileTable::lower_value(UnitCoord unit, ConceptId concept_id) const {
  check_coordinate(*this, unit, concept_id);
  return lower[static_cast<std::size_t>(unit.layer)](unit.unit, concept_id);
}

QuantileTable build_quantile_table(const UnitResponseMatrix& responses, const LabeledDataset& dataset, double p_low,
                                   double p_high) {
  if (responses.n_items() != static_cast<Eigen::Index>(dataset.size()))
    throw Error(ErrorCode::length_mismatch, "unit responses and dataset differ in item count");
  const int k = dataset.num_concepts();
  const auto support = dataset.support();
  for (int c = 0; c < k; ++c) {
    const int pos = support[static_cast<std::size_t>(c)];
    const int neg = static_cast<int>(dataset.size()) - pos;
    if (pos < 2 || neg < 2)
      throw Error(ErrorCode::insufficient_support, "concept " + std::to_string(c) + " has " + std::to_string(pos) +
                                                       " positives and " + std::to_string(neg) +
                                                       " negatives; quantiles need at least 2 of each");
  }
  QuantileTable table;
  table.p_low = p_low;
  table.p_high = p_high;
  table.num_concepts = k;
  std::vector<double> pos, neg;
  for (const auto& layer : responses.layers) {
    Eigen::MatrixXd upper(layer.cols(), k), lower(layer.cols(), k);
    for (Eigen::Index j = 0; j < layer.cols(); ++j) {
      for (int c = 0; c < k; ++c) {
        pos.clear();
        neg.clear();
        for (std::size_t i = 0; i < dataset.size(); ++i)
          (dataset.item_labels[i] == c ? pos : neg).push_back(layer(static_cast<Eigen::Index>(i), j));
        std::sort(pos.begin(), pos.end());
        std::sort(neg.begin(), neg.end());
        upper(j, c) = quantile_sorted(pos, p_high);
        lower(j, c) = quantile_sorted(neg, p_low);
      }
    }
    table.upper.push_back(std::move(upper));
    table.lower.push_back(std::move(lower));
  }
  return table;
}

std::string mode_name(InterventionMode mode) {
  switch (mode) {
    case InterventionMode::boost_only: return "boost";
    case InterventionMode::suppress_only: return "suppress";
    case InterventionMode::both: return "both";
  }
  return "both";
}

std::string scope_name(InterventionScope scope) {
  return scope == InterventionScope::probe_path ? "probe" : "generation";
}

InterventionMode parse_mode(const std::string& name) {
  if (name == "boost") return InterventionMode::boost_only;
  if (name == "suppress") return InterventionMode::suppress_only;
  if (name == "both") return InterventionMode::both;
  throw Error(ErrorCode::invalid_argument, "unknown intervention mode '" + name + "'");
}

InterventionScope parse_scope(const std::string& name) {
  if (name == "probe") return InterventionScope::probe_path;
  if (name == "generation") return InterventionScope::first_generation_step;
  throw Error(ErrorCode::invalid_argument, "unknown intervention scope '" + name + "'");
}

std::vector<UnitOverride> InterventionSpec::overrides() const {
  std::vector<UnitOverride> out;
  out.reserve(boost.size() + suppress.size());
  for (const auto& a : boost) out.push_back({a.layer, a.unit, a.value});
  for (const auto& a : suppress) out.push_back({a.layer, a.unit, a.value});
  return out;
}

namespace {

const ConceptUnitSet& set_for(const ConceptSets& sets, ConceptId c) {
  const auto it = sets.find(c);
  if (it == sets.end()) throw Error(ErrorCode::invalid_argument, "no unit set for concept " + std::to_string(c));
  return it->second;
}

}  // namespace

InterventionSpec assemble_intervention(ConceptId target, ConceptId true_label, const ConceptSets& sets,
                                       const QuantileTable& table, InterventionMode mode, InterventionScope scope) {
  InterventionSpec spec;
  spec.target = target;
  spec.suppressed = true_label;
  spec.mode = mode;
  spec.scope = scope;
  std::set<UnitCoord> boosted;
  if (mode != InterventionMode::suppress_only) {
    for (const auto& u : set_for(sets, target).units) {
      if (!boosted.insert(u.coordinate()).second) continue;
      spec.boost.push_back({u.layer, u.unit, table.upper_value(u.coordinate(), target)});
    }
  }
  if (mode != InterventionMode::boost_only) {
    std::set<UnitCoord> suppressed;
    for (const auto& u : set_for(sets, true_label).units) {
      if (boosted.count(u.coordinate()) || !suppressed.insert(u.coordinate()).second) continue;
      spec.suppress.push_back({u.layer, u.unit, table.lower_value(u.coordinate(), true_label)});
    }
  }
  return spec;
}

const TransitionCell& TransitionReport::cell(ConceptId true_label, ConceptId target) const {
  for (const auto& c : cells)
    if (c.true_label == true_label && c.target == target) return c;
  throw Error(ErrorCode::out_of_range, "no transition cell (" + std::to_string(true_label) + ", " +
                                           std::to_string(target) + ")");
}

int TransitionReport::n_eval() const {
  int n = 0;
  for (const auto& c : cells) n += c.n_eval;
  return n;
}

namespace {

double pooled(const std::vector<TransitionCell>& cells, double TransitionCell::*rate) {
  double sum = 0.0;
  int n = 0;
  for (const auto& c : cells) {
    sum += c.*rate * c.n_eval;
    n += c.n_eval;
  }
  return n == 0 ? 0.0 : sum / n;
}

}  // namespace

double TransitionReport::tsr() const { return pooled(cells, &TransitionCell::tsr); }
double TransitionReport::spillover() const { return pooled(cells, &TransitionCell::spillover); }

double TransitionReport::unchanged() const {
  return n_eval() == 0 ? 1.0 : pooled(cells, &TransitionCell::unchanged);
}

std::vector<TargetSummary> TransitionReport::per_target() const {
  std::vector<TargetSummary> out;
  for (int g = 0; g < num_concepts; ++g) {
    std::vector<TransitionCell> column;
    for (const auto& c : cells)
      if (c.target == g) column.push_back(c);
    TargetSummary s;
    s.target = g;
    for (const auto& c : column) s.n_eval += c.n_eval;
    s.tsr = pooled(column, &TransitionCell::tsr);
    s.spillover = pooled(column, &TransitionCell::spillover);
    s.baseline_target_prob = pooled(column, &TransitionCell::baseline_target_prob);
    s.intervened_target_prob = pooled(column, &TransitionCell::intervened_target_prob);
    out.push_back(s);
  }
  return out;
}

double TransitionReport::mean_tsr() const {
  double sum = 0.0;
  int n = 0;
  for (const auto& s : per_target()) {
    if (s.n_eval == 0) continue;
    sum += s.tsr;
    ++n;
  }
  return n == 0 ? 0.0 : sum / n;
}

std::vector<std::vector<int>> TransitionReport::transition_matrix() const {
  std::vector<std::vector<int>> m(static_cast<std::size_t>(num_concepts),
                                  std::vector<int>(static_cast<std::size_t>(num_concepts), 0));
  for (const auto& c : cells)
    for (int p = 0; p < num_concepts; ++p)
      m[static_cast<std::size_t>(c.true_label)][static_cast<std::size_t>(p)] += c.predicted[static_cast<std::size_t>(p)];
  return m;
}

TransitionReport score_trials(std::span<const Trial> trials, int num_concepts) {
  if (num_concepts < 2) throw Error(ErrorCode::invalid_argument, "transition report needs K >= 2");
  TransitionReport report;
  report.num_concepts = num_concepts;
  const auto k = static_cast<std::size_t>(num_concepts);
  std::vector<TransitionCell> grid(k * k);
  std::vector<int> hits(k * k, 0), stays(k * k, 0);
  for (const auto& t : trials) {
    for (ConceptId c : {t.true_label, t.target, t.baseline, t.intervened})
      if (c < 0 || c >= num_concepts) throw Error(ErrorCode::out_of_range, "trial concept outside [0, K)");
    if (t.target == t.true_label || t.baseline != t.true_label) continue;
    auto& cell = grid[static_cast<std::size_t>(t.true_label) * k + static_cast<std::size_t>(t.target)];
    if (cell.predicted.empty()) cell.predicted.assign(k, 0);
    ++cell.n_eval;
    ++cell.predicted[static_cast<std::size_t>(t.intervened)];
    cell.baseline_target_prob += t.baseline_target_prob;
    cell.intervened_target_prob += t.intervened_target_prob;
  }
  for (ConceptId y = 0; y < num_concepts; ++y) {
    for (ConceptId g = 0; g < num_concepts; ++g) {
      if (y == g) continue;
      TransitionCell cell = grid[static_cast<std::size_t>(y) * k + static_cast<std::size_t>(g)];
      cell.true_label = y;
      cell.target = g;
      if (cell.predicted.empty()) cell.predicted.assign(k, 0);
      if (cell.n_eval > 0) {
        const double n = cell.n_eval;
        const int to_target = cell.predicted[static_cast<std::size_t>(g)];
        const int to_true = cell.predicted[static_cast<std::size_t>(y)];
        cell.tsr = to_target / n;
        cell.unchanged = to_true / n;
        cell.spillover = (cell.n_eval - to_target - to_true) / n;
        cell.baseline_target_prob /= n;
        cell.intervened_target_prob /= n;
      } else {
        cell.unchanged = 1.0;
      }
      report.cells.push_back(std::move(cell));
    }
  }
  return report;
}

TransitionReport transition_metrics(std::span<const ConceptId> baseline_preds, std::span<const ConceptId> intervened_preds,
                                    std::span<const ConceptId> true_labels, std::span<const ConceptId> targets,
                                    int num_concepts) {
  const std::size_t n = baseline_preds.size();
  if (intervened_preds.size() != n || true_labels.size() != n || targets.size() != n)
    throw Error(ErrorCode::length_mismatch, "transition inputs differ in length");
  std::vector<Trial> trials(n);
  for (std::size_t i = 0; i < n; ++i) {
    trials[i].baseline = baseline_preds[i];
    trials[i].intervened = intervened_preds[i];
    trials[i].true_label = true_labels[i];
    trials[i].target = targets[i];
  }
  auto report = score_trials(trials, num_concepts);
  report.n_items = static_cast<int>(n);
  for (std::size_t i = 0; i < n; ++i) report.n_baseline_correct += baseline_preds[i] == true_labels[i];
  return report;
}

namespace {

struct Readout {
  ConceptId prediction = 0;
  Eigen::VectorXd probabilities;
};

void require_labels(const ModelTopology& topology, const LabeledDataset& dataset) {
  if (static_cast<int>(topology.label_token_ids.size()) != dataset.num_concepts())
    throw Error(ErrorCode::vocabulary, "driver topology exposes " + std::to_string(topology.label_token_ids.size()) +
                                           " label tokens for " + std::to_string(dataset.num_concepts()) +
                                           " concepts");
}

// Runs baseline and intervention passes with a shared readout.
template <typename MakeRequest, typename Read>
TransitionReport run_trials(Driver& driver, const LabeledDataset& dataset, const ConceptSets& sets,
                            const QuantileTable& table, InterventionMode mode, InterventionScope scope,
                            MakeRequest make_request, Read read) {
  const int k = dataset.num_concepts();
  std::vector<RunRequest> baseline_requests;
  for (const auto& item : dataset.items) baseline_requests.push_back(make_request(item));
  const auto baseline_results = driver.run_batch(baseline_requests);
  std::vector<Readout> baseline;
  for (const auto& r : baseline_results) baseline.push_back(read(r));

  std::vector<Trial> trials;
  std::vector<RunRequest> requests;
  int correct = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const ConceptId y = dataset.item_labels[i];
    if (baseline[i].prediction != y) continue;
    ++correct;
    for (ConceptId g = 0; g < k; ++g) {
      if (g == y) continue;
      auto req = make_request(dataset.items[i]);
      req.interventions = assemble_intervention(g, y, sets, table, mode, scope).overrides();
      requests.push_back(std::move(req));
      Trial t;
      t.true_label = y;
      t.target = g;
      t.baseline = baseline[i].prediction;
      t.baseline_target_prob = baseline[i].probabilities[g];
      trials.push_back(t);
    }
  }
  const auto results = driver.run_batch(requests);
  for (std::size_t t = 0; t < trials.size(); ++t) {
    const auto r = read(results[t]);
    trials[t].intervened = r.prediction;
    trials[t].intervened_target_prob = r.probabilities[trials[t].target];
  }
  auto report = score_trials(trials, k);
  report.mode = mode;
  report.scope = scope;
  report.n_items = static_cast<int>(dataset.size());
  report.n_baseline_correct = correct;
  return report;
}

}  // namespace

TransitionReport evaluate_probe_intervention(Driver& driver, const ProbeModel& probe, const LabeledDataset& dataset,
                                             const ConceptSets& sets, const QuantileTable& table,
                                             InterventionMode mode) {
  if (probe.num_classes() != dataset.num_concepts())
    throw Error(ErrorCode::invalid_argument, "probe class count differs from dataset concepts");
  if (probe.layer < 0 || probe.layer >= driver.topology().n_layers)
    throw Error(ErrorCode::out_of_range, "probe layer " + std::to_string(probe.layer) + " outside the driver topology");
  const auto make_request = [&](const Item& item) {
    auto req = RunRequest::for_item(item);
    req.capture.residual_layers = {probe.layer};
    return req;
  };
  const auto read = [&](const RunResult& r) {
    const auto p = probe_predict(probe, r.residual_at(probe.layer).cast<double>());
    return Readout{p.argmax, p.probabilities};
  };
  auto report = run_trials(driver, dataset, sets, table, mode, InterventionScope::probe_path, make_request, read);
  report.layer = probe.layer;
  return report;
}

TransitionReport evaluate_generation_intervention(Driver& driver, const LabeledDataset& dataset,
                                                  const ConceptSets& sets, const QuantileTable& table,
                                                  InterventionMode mode) {
  require_labels(driver.topology(), dataset);
  const auto make_request = [](const Item& item) {
    auto req = RunRequest::for_item(item);
    req.generate = true;
    return req;
  };
  const auto read = [](const RunResult& r) {
    if (!r.label_logits) throw Error(ErrorCode::protocol, "driver returned no label logits");
    return Readout{argmax_lowest(*r.label_logits), softmax(*r.label_logits)};
  };
  return run_trials(driver, dataset, sets, table, mode, InterventionScope::first_generation_step, make_request, read);
}

std::string transition_csv(const TransitionReport& report, const std::vector<std::string>& concept_names) {
  std::string out = "true,target,n_eval,tsr,spillover,unchanged,baseline_target_prob,intervened_target_prob\n";
  for (const auto& c : report.cells)
    out += csv_field(concept_names.at(static_cast<std::size_t>(c.true_label))) + "," +
           csv_field(concept_names.at(static_cast<std::size_t>(c.target))) + "," + std::to_string(c.n_eval) + "," +
           format_double(c.tsr) + "," + format_double(c.spillover) + "," + format_double(c.unchanged) + "," +
           format_double(c.baseline_target_prob) + "," + format_double(c.intervened_target_prob) + "\n";
  return out;
}

nlohmann::json transition_json(const TransitionReport& report, const std::vector<std::string>& concept_names) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : report.cells)
    cells.push_back({{"true", concept_names.at(static_cast<std::size_t>(c.true_label))},
                     {"target", concept_names.at(static_cast<std::size_t>(c.target))},
                     {"n_eval", c.n_eval},
                     {"tsr", c.tsr},
                     {"spillover", c.spillover},
                     {"unchanged", c.unchanged},
                     {"predicted", c.predicted},
                     {"baseline_target_prob", c.baseline_target_prob},
                     {"intervened_target_prob", c.intervened_target_prob}});
  nlohmann::json targets = nlohmann::json::array();
  for (const auto& s : report.per_target())
    targets.push_back({{"target", concept_names.at(static_cast<std::size_t>(s.target))},
                       {"n_eval", s.n_eval},
                       {"tsr", s.tsr},
                       {"spillover", s.spillover},
                       {"baseline_target_prob", s.baseline_target_prob},
                       {"intervened_target_prob", s.intervened_target_prob}});
  nlohmann::json doc = {{"mode", mode_name(report.mode)},
                        {"scope", scope_name(report.scope)},
                        {"n_items", report.n_items},
                        {"n_baseline_correct", report.n_baseline_correct},
                        {"empty", report.empty()},
                        {"tsr", report.tsr()},
                        {"mean_tsr", report.mean_tsr()},
                        {"spillover", report.spillover()},
                        {"unchanged", report.unchanged()},
                        {"per_target", targets},
                        {"transition_matrix", report.transition_matrix()},
                        {"cells", cells}};
  if (report.layer >= 0) doc["layer"] = report.layer;
  return doc;
}

}  // namespace clens
