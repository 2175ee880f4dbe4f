#include "conceptlens/experiment.hpp"

#include "conceptlens/checkpoint.hpp"
#include "conceptlens/dataset.hpp"
#include "conceptlens/fileio.hpp"
#include "conceptlens/geometry.hpp"
#include "conceptlens/planted.hpp"
#include "conceptlens/session.hpp"
#include "conceptlens/svg.hpp"
#include "conceptlens/text_format.hpp"
#include "conceptlens/trace.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <set>

namespace clens {

using nlohmann::json;

// --- config ---

ModelSource ExperimentConfig::model_source() const {
  if (driver_cmd && model)
    throw Error(ErrorCode::invalid_argument, "name either a model or a driver command, not both");
  if (driver_cmd) {
    if (driver_cmd->empty()) throw Error(ErrorCode::invalid_argument, "driver command is empty");
    return {ModelKind::external, *driver_cmd};
  }
  if (!model || *model == "planted") return {ModelKind::planted, {}};
  return {ModelKind::checkpoint, *model};
}

SelectionRule ExperimentConfig::selection_rule(const std::string& default_preset) const {
  const std::string name = preset.value_or(default_preset);
  SelectionRule rule;
  if (name == "custom") {
    if (!count && !fraction) throw Error(ErrorCode::invalid_argument, "custom preset needs a count or a fraction");
  } else {
    rule = selection_preset(name);
  }
  if (count && fraction) throw Error(ErrorCode::invalid_argument, "give a count or a fraction, not both");
  if (count) rule.k = KSpec::of_count(*count);
  if (fraction) rule.k = KSpec::of_fraction(*fraction);
  if (layer) {
    rule.scope = SelectionScope::single_layer;
    rule.layer = *layer;
  }
  return rule;
}

namespace {

template <typename T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

template <typename T>
T read_key(const json& doc, const char* key, const std::string& where) {
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse, "config key '" + where + key + "': " + e.what());
  }
}

template <typename T>
void read_into(const json& doc, const char* key, T& target, const std::string& where = {}) {
  if (doc.contains(key) && !doc.at(key).is_null()) target = read_key<T>(doc, key, where);
}

template <typename T>
void read_into(const json& doc, const char* key, std::optional<T>& target, const std::string& where = {}) {
  if (doc.contains(key) && !doc.at(key).is_null()) target = read_key<T>(doc, key, where);
}

void reject_unknown(const json& doc, const std::set<std::string>& known, const std::string& where) {
  if (!doc.is_object()) throw Error(ErrorCode::parse, "config section '" + where + "' is not an object");
  for (const auto& [key, value] : doc.items())
    if (!known.contains(key)) throw Error(ErrorCode::parse, "unknown config key '" + where + key + "'");
}

}  // namespace

json ExperimentConfig::to_json() const {
  return {{"dataset", optional_json(dataset)},
          {"synthetic",
           {{"concepts", synthetic.num_concepts},
            {"items_per_concept", synthetic.items_per_concept},
            {"seq_len", synthetic.seq_len},
            {"markers_per_item", synthetic.markers_per_item},
            {"seed", synthetic.seed},
            {"vocab_size", synthetic.vocab_size}}},
          {"model", optional_json(model)},
          {"driver_cmd", optional_json(driver_cmd)},
          {"planted", {{"n_layers", planted.n_layers}, {"d_model", planted.d_model}, {"mlp_width", planted.mlp_width}}},
          {"preset", optional_json(preset)},
          {"count", optional_json(count)},
          {"fraction", optional_json(fraction)},
          {"layer", optional_json(layer)},
          {"mode", mode_name(mode)},
          {"scope", scope_name(scope)},
          {"out", out},
          {"seed", seed},
          {"mc_draws", mc_draws},
          {"train", {{"steps", train.steps}, {"lr", train.lr}, {"batch", train.batch}}},
          {"embeddings", optional_json(embeddings)},
          {"trace", optional_json(trace)}};
}

ExperimentConfig ExperimentConfig::from_json(const json& doc) {
  reject_unknown(doc,
                 {"dataset", "synthetic", "model", "driver_cmd", "planted", "preset", "count", "fraction", "layer",
                  "mode", "scope", "out", "seed", "mc_draws", "train", "embeddings", "trace"},
                 "");
  ExperimentConfig c;
  read_into(doc, "dataset", c.dataset);
  if (doc.contains("synthetic")) {
    const auto& s = doc["synthetic"];
    reject_unknown(s, {"concepts", "items_per_concept", "seq_len", "markers_per_item", "seed", "vocab_size"},
                   "synthetic.");
    read_into(s, "concepts", c.synthetic.num_concepts, "synthetic.");
    read_into(s, "items_per_concept", c.synthetic.items_per_concept, "synthetic.");
    read_into(s, "seq_len", c.synthetic.seq_len, "synthetic.");
    read_into(s, "markers_per_item", c.synthetic.markers_per_item, "synthetic.");
    read_into(s, "seed", c.synthetic.seed, "synthetic.");
    read_into(s, "vocab_size", c.synthetic.vocab_size, "synthetic.");
  }
  read_into(doc, "model", c.model);
  read_into(doc, "driver_cmd", c.driver_cmd);
  if (doc.contains("planted")) {
    const auto& p = doc["planted"];
    reject_unknown(p, {"n_layers", "d_model", "mlp_width"}, "planted.");
    read_into(p, "n_layers", c.planted.n_layers, "planted.");
    read_into(p, "d_model", c.planted.d_model, "planted.");
    read_into(p, "mlp_width", c.planted.mlp_width, "planted.");
  }
  read_into(doc, "preset", c.preset);
  read_into(doc, "count", c.count);
  read_into(doc, "fraction", c.fraction);
  read_into(doc, "layer", c.layer);
  if (doc.contains("mode") && !doc["mode"].is_null()) c.mode = parse_mode(read_key<std::string>(doc, "mode", ""));
  if (doc.contains("scope") && !doc["scope"].is_null()) c.scope = parse_scope(read_key<std::string>(doc, "scope", ""));
  read_into(doc, "out", c.out);
  read_into(doc, "seed", c.seed);
  read_into(doc, "mc_draws", c.mc_draws);
  if (doc.contains("train")) {
    const auto& t = doc["train"];
    reject_unknown(t, {"steps", "lr", "batch"}, "train.");
    read_into(t, "steps", c.train.steps, "train.");
    read_into(t, "lr", c.train.lr, "train.");
    read_into(t, "batch", c.train.batch, "train.");
  }
  read_into(doc, "embeddings", c.embeddings);
  read_into(doc, "trace", c.trace);
  return c;
}

std::string ExperimentConfig::hash() const {
  auto doc = to_json();
  doc.erase("out");
  return sha256_hex(doc.dump());
}

// --- sources ---

LabeledDataset resolve_dataset(const ExperimentConfig& config) {
  if (config.dataset) return load_dataset(*config.dataset);
  return generate_synthetic_dataset(config.synthetic);
}

ToyTransformer reference_model(const ExperimentConfig& config, const LabeledDataset& dataset) {
  const auto source = config.model_source();
  switch (source.kind) {
    case ModelKind::planted: {
      const auto topology = synthetic_topology(dataset.num_concepts(), config.planted.n_layers, config.planted.d_model,
                                               config.planted.mlp_width, config.synthetic.vocab_size);
      std::size_t longest = 0;
      for (const auto& item : dataset.items)
        if (item.tokens) longest = std::max(longest, item.tokens->size());
      const int context = std::max(16, static_cast<int>(longest));
      return build_planted_model(default_planted_spec(topology, 4, std::nullopt, config.seed, context), topology);
    }
    case ModelKind::checkpoint:
      return load_checkpoint(source.location);
    case ModelKind::external:
      break;
  }
  throw Error(ErrorCode::invalid_argument, "an external driver has no in-process reference model");
}

std::unique_ptr<Driver> open_driver(const ExperimentConfig& config, const LabeledDataset& dataset) {
  const auto source = config.model_source();
  if (source.kind == ModelKind::external)
    return std::make_unique<ProtocolDriver>(std::make_unique<ChildProcessTransport>(source.location));
  return std::make_unique<ReferenceDriver>(reference_model(config, dataset));
}

void write_artifacts(const Artifacts& artifacts, const std::filesystem::path& directory) {
  for (const auto& [name, bytes] : artifacts) write_file_atomic(directory / name, bytes);
}

// --- pipeline ---

Pipeline::Pipeline(ExperimentConfig config, const LabeledDataset& dataset, Driver& driver)
    : config_(std::move(config)), dataset_(dataset), driver_(driver) {}

std::string Pipeline::provenance() const { return "conceptlens config sha256 " + config_.hash(); }

const std::vector<ActivationRecord>& Pipeline::records() {
  if (!records_) {
    if (config_.trace) {
      auto contents = read_trace_with_header(*config_.trace, dataset_, driver_.topology());
      records_ = std::move(contents.records);
      trace_bytes_ = read_file(*config_.trace);
    } else {
      records_ = capture_records(driver_, dataset_);
    }
  }
  return *records_;
}

const ProbeReport& Pipeline::probe_report() {
  if (!probe_report_) probe_report_ = probe_curve(records(), dataset_);
  return *probe_report_;
}

const ProbeModel& Pipeline::frozen_probe() {
  if (!frozen_probe_) {
    const int best = probe_report().best_layer();
    frozen_probe_ = fit_probe(residual_matrix(records(), best), dataset_.item_labels, dataset_.num_concepts(),
                              ProbeConfig{}, best);
  }
  return *frozen_probe_;
}

ConceptSets Pipeline::select(const SelectionRule& rule) {
  if (!responses_) responses_ = unit_responses(records());
  ConceptSets sets;
  for (ConceptId c = 0; c < dataset_.num_concepts(); ++c) {
    auto it = rankings_.find(c);
    if (it == rankings_.end()) it = rankings_.emplace(c, rank_units(*responses_, dataset_, c)).first;
    sets.emplace(c, select_top(it->second, rule));
  }
  return sets;
}

TransitionReport Pipeline::intervene() {
  const auto sets = select(config_.selection_rule("intervention"));
  const auto table = build_quantile_table(*responses_, dataset_);
  if (config_.scope == InterventionScope::probe_path)
    return evaluate_probe_intervention(driver_, frozen_probe(), dataset_, sets, table, config_.mode);
  return evaluate_generation_intervention(driver_, dataset_, sets, table, config_.mode);
}

namespace {

std::vector<std::string> concept_names(const LabeledDataset& dataset) {
  std::vector<std::string> names;
  for (const auto& label : dataset.labels) names.push_back(label.name);
  return names;
}

std::string format_fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::string dump(const json& doc) { return doc.dump(2) + "\n"; }

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

Artifacts Pipeline::capture_artifacts() {
  records();
  if (!trace_bytes_) trace_bytes_ = encode_trace(dataset_, driver_.topology(), *records_, driver_.description());
  return {{"trace.clns", *trace_bytes_}};
}

Artifacts Pipeline::probe_artifacts() {
  const auto& report = probe_report();
  std::vector<Series> series;
  for (std::size_t c = 0; c < report.concept_names.size(); ++c) {
    Series s{report.concept_names[c], {}};
    for (const auto& l : report.layers) s.points.emplace_back(report.normalized_depth(l.layer), l.per_concept[c]);
    series.push_back(std::move(s));
  }
  Series overall{"Overall", {}};
  for (const auto& l : report.layers) overall.points.emplace_back(report.normalized_depth(l.layer), l.overall);
  series.push_back(std::move(overall));
  return {{"probe.csv", probe_report_csv(report)},
          {"probe.json", dump(probe_report_json(report))},
          {"probe_model.json", dump(probe_to_json(frozen_probe()))},
          {"probe.svg", svg_line_chart("LOOCV probe accuracy", "normalized depth", "accuracy", series, provenance())}};
}

Artifacts Pipeline::select_artifacts() {
  const auto rule = config_.selection_rule("fig6");
  const auto sets = select(rule);
  const auto names = concept_names(dataset_);
  const int n_layers = driver_.topology().n_layers;

  std::string units_csv = "concept,rank,layer,unit,ap\n";
  json units_json = json::array();
  std::map<ConceptId, std::vector<int>> histograms;
  Eigen::MatrixXd bars(n_layers, static_cast<Eigen::Index>(names.size()));
  for (const auto& [c, set] : sets) {
    const std::string body = unit_set_csv(set);
    const std::string prefix = csv_field(names[static_cast<std::size_t>(c)]) + ",";
    for (std::size_t start = body.find('\n') + 1; start < body.size();) {
      const std::size_t end = body.find('\n', start);
      units_csv += prefix + body.substr(start, end - start + 1);
      start = end + 1;
    }
    auto doc = unit_set_json(set);
    doc["name"] = names[static_cast<std::size_t>(c)];
    units_json.push_back(std::move(doc));
    histograms[c] = layer_histogram(set, n_layers);
    for (int l = 0; l < n_layers; ++l) bars(l, c) = histograms[c][static_cast<std::size_t>(l)];
  }
  std::vector<std::string> layers;
  for (int l = 0; l < n_layers; ++l) layers.push_back("L" + std::to_string(l));
  return {{"units.csv", units_csv},
          {"units.json", dump(units_json)},
          {"histogram.csv", histogram_csv(histograms, names)},
          {"histogram.svg", svg_bar_chart("Selected units per layer", layers, names, bars, provenance())}};
}

Artifacts Pipeline::overlap_artifacts() {
  const auto rule = config_.selection_rule("fig6");
  const auto sets = select(rule);
  const auto& topo = driver_.topology();
  const int universe = rule.scope == SelectionScope::whole_model ? topo.num_units() : topo.mlp_width;
  const auto report = overlap_report(sets, universe, OverlapOptions{config_.mc_draws, config_.seed});
  const auto names = concept_names(dataset_);
  const auto k = static_cast<Eigen::Index>(names.size());
  Eigen::MatrixXd ratios = Eigen::MatrixXd::Constant(k, k, kNaN);
  for (const auto& p : report.pairs) ratios(p.a, p.b) = ratios(p.b, p.a) = p.ratio;
  return {{"overlap.csv", overlap_csv(report, names)},
          {"overlap.json", dump(overlap_json(report, names))},
          {"overlap.svg", svg_heatmap("Jaccard overlap / random expectation", names, names, ratios, provenance())}};
}

Artifacts Pipeline::intervene_artifacts() {
  const auto report = intervene();
  const auto names = concept_names(dataset_);
  const auto k = static_cast<Eigen::Index>(names.size());
  Eigen::MatrixXd tsr = Eigen::MatrixXd::Constant(k, k, kNaN);
  for (const auto& cell : report.cells) tsr(cell.true_label, cell.target) = cell.tsr;
  const std::string title = "TSR by true (rows) and target (columns), " + mode_name(report.mode) + ", " +
                            scope_name(report.scope);
  return {{"transitions.csv", transition_csv(report, names)},
          {"transitions.json", dump(transition_json(report, names))},
          {"transitions.svg", svg_heatmap(title, names, names, tsr, provenance())}};
}

Artifacts Pipeline::geometry_artifacts() {
  const Embedder embedder = config_.embeddings ? external_embedder(*config_.embeddings, dataset_) : pca_embedder();
  Artifacts out;
  std::vector<SeparationMetrics> metrics;
  for (int l = 0; l < driver_.topology().n_layers; ++l) {
    const auto embedded = embedder(residual_matrix(records(), l), l);
    out["embeddings/layer_" + std::to_string(l) + ".csv"] = embedding_csv(embedded, dataset_);
    metrics.push_back(separation_metrics(embedded, dataset_.item_labels));
    const std::string title = "layer " + std::to_string(l) + ": S = " + format_fixed(metrics.back().silhouette) +
                              ", D = " + format_fixed(metrics.back().intra_cluster);
    out["embeddings/layer_" + std::to_string(l) + ".svg"] = svg_scatter(
        title, embedded.points, std::vector<int>(dataset_.item_labels.begin(), dataset_.item_labels.end()),
        concept_names(dataset_), provenance());
  }
  Series s{"S", {}}, d{"D", {}};
  for (const auto& m : metrics) {
    s.points.emplace_back(m.layer, m.silhouette);
    d.points.emplace_back(m.layer, m.intra_cluster);
  }
  out["geometry.csv"] = metrics_csv(metrics);
  out["geometry.svg"] = svg_line_chart("Embedding separation by layer", "layer", "value", {s, d}, provenance());
  return out;
}

Artifacts Pipeline::all_artifacts() {
  Artifacts out;
  for (auto&& part : {capture_artifacts(), probe_artifacts(), select_artifacts(), overlap_artifacts(),
                      intervene_artifacts(), geometry_artifacts()})
    out.insert(part.begin(), part.end());
  return out;
}

}  // namespace clens
