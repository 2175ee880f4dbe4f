#include "conceptlens/checkpoint.hpp"
#include "conceptlens/dataset.hpp"
#include "conceptlens/experiment.hpp"
#include "conceptlens/fileio.hpp"
#include "conceptlens/session.hpp"
#include "conceptlens/text_format.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace clens;

namespace {

// Flag values; unset flags leave the config file (or defaults) alone.
struct Flags {
  std::optional<std::string> config, dataset, model, driver_cmd, out, preset, mode, scope, trace, embeddings;
  std::optional<std::uint64_t> seed;
  std::optional<double> fraction, lr;
  std::optional<int> count, layer, mc_draws, steps, batch;
  std::optional<int> concepts, items_per_concept, seq_len, markers, vocab_size;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON experiment config; flags override it");
  cmd->add_option("--dataset", f.dataset, "dataset file (.json or .csv); default is the synthetic set");
  cmd->add_option("--model", f.model, "'planted' or a checkpoint path");
  cmd->add_option("--driver-cmd", f.driver_cmd, "shell command that speaks the driver protocol");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seed", f.seed, "seed for planted layout, training and Monte Carlo draws");
  cmd->add_option("--preset", f.preset, "unit selection preset")
      ->check(CLI::IsMember({"fig4", "fig6", "intervention", "custom"}));
  cmd->add_option("--mode", f.mode, "intervention mode")->check(CLI::IsMember({"boost", "suppress", "both"}));
  cmd->add_option("--scope", f.scope, "intervention readout")->check(CLI::IsMember({"probe", "generation"}));
  cmd->add_option("--fraction", f.fraction, "select this fraction of the pool");
  cmd->add_option("--count", f.count, "select this many units");
  cmd->add_option("--layer", f.layer, "restrict selection to one layer");
  cmd->add_option("--trace", f.trace, "reuse a captured trace instead of running the model");
  cmd->add_option("--embeddings", f.embeddings, "directory of external 2-D embeddings (layer_<l>.csv)");
  cmd->add_option("--mc-draws", f.mc_draws, "Monte Carlo draws for the overlap baseline");
}

ExperimentConfig resolve_config(const Flags& f) {
  ExperimentConfig c;
  if (f.config) c = ExperimentConfig::from_json(nlohmann::json::parse(read_file(*f.config)));
  if (f.dataset) c.dataset = f.dataset;
  if (f.model) c.model = f.model;
  if (f.driver_cmd) c.driver_cmd = f.driver_cmd;
  if (f.out) c.out = *f.out;
  if (f.seed) c.seed = *f.seed;
  if (f.preset) c.preset = f.preset;
  if (f.mode) c.mode = parse_mode(*f.mode);
  if (f.scope) c.scope = parse_scope(*f.scope);
  if (f.fraction) {
    c.fraction = f.fraction;
    c.count.reset();
  }
  if (f.count) {
    c.count = f.count;
    c.fraction.reset();
  }
  if (f.layer) c.layer = f.layer;
  if (f.trace) c.trace = f.trace;
  if (f.embeddings) c.embeddings = f.embeddings;
  if (f.mc_draws) c.mc_draws = *f.mc_draws;
  if (f.steps) c.train.steps = *f.steps;
  if (f.lr) c.train.lr = *f.lr;
  if (f.batch) c.train.batch = *f.batch;
  if (f.concepts) c.synthetic.num_concepts = *f.concepts;
  if (f.items_per_concept) c.synthetic.items_per_concept = *f.items_per_concept;
  if (f.seq_len) c.synthetic.seq_len = *f.seq_len;
  if (f.markers) c.synthetic.markers_per_item = *f.markers;
  if (f.vocab_size) c.synthetic.vocab_size = *f.vocab_size;
  c.model_source();  // reject two model sources early
  return c;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Outputs are deterministic; wall-clock times only go to the sidecar.
void finish(const std::string& command, const ExperimentConfig& config, const Artifacts& artifacts,
            const std::string& started) {
  write_artifacts(artifacts, config.out);
  nlohmann::json files = nlohmann::json::object();
  for (const auto& [name, bytes] : artifacts) files[name] = sha256_hex(bytes);
  const nlohmann::json meta = {{"command", command},
                               {"config", config.to_json()},
                               {"config_sha256", config.hash()},
                               {"started_at", started},
                               {"finished_at", utc_now()},
                               {"files", files}};
  write_file_atomic(fs::path(config.out) / (command + ".meta.json"), meta.dump(2) + "\n");
}

void summarize(const std::string& command, Pipeline& p, const Artifacts& artifacts) {
  if (command == "capture") {
    const auto& recs = p.records();
    const int layers = recs.empty() ? 0 : static_cast<int>(recs.front().residual.size());
    const auto width = recs.empty() || layers == 0 ? 0 : recs.front().mlp_pre.front().size();
    std::cout << "captured N=" << recs.size() << " L=" << layers << " m=" << width << "\n";
  } else if (command == "probe") {
    const auto& report = p.probe_report();
    const int best = report.best_layer();
    std::cout << "best layer " << best << " accuracy " << format_double(report.layers[static_cast<std::size_t>(best)].overall)
              << "\n";
  } else if (command == "intervene") {
    const auto doc = nlohmann::json::parse(artifacts.at("transitions.json"));
    std::cout << "mode " << doc["mode"].get<std::string>() << " scope " << doc["scope"].get<std::string>()
              << ": tsr " << format_double(doc["tsr"].get<double>()) << " mean_tsr "
              << format_double(doc["mean_tsr"].get<double>()) << " spillover "
              << format_double(doc["spillover"].get<double>()) << "\n";
  }
  for (const auto& [name, bytes] : artifacts) std::cout << "wrote " << (fs::path(p.config().out) / name).string() << "\n";
}

int run_stage(const std::string& command, const Flags& flags) {
  const std::string started = utc_now();
  const auto config = resolve_config(flags);
  const auto dataset = resolve_dataset(config);
  const auto driver = open_driver(config, dataset);
  Pipeline pipeline(config, dataset, *driver);
  Artifacts artifacts;
  if (command == "capture") artifacts = pipeline.capture_artifacts();
  else if (command == "probe") artifacts = pipeline.probe_artifacts();
  else if (command == "select") artifacts = pipeline.select_artifacts();
  else if (command == "overlap") artifacts = pipeline.overlap_artifacts();
  else if (command == "intervene") artifacts = pipeline.intervene_artifacts();
  else if (command == "geometry") artifacts = pipeline.geometry_artifacts();
  else if (command == "pipeline") artifacts = pipeline.all_artifacts();
  finish(command, config, artifacts, started);
  summarize(command, pipeline, artifacts);
  return 0;
}

int train_toy(const Flags& flags) {
  const std::string started = utc_now();
  auto config = resolve_config(flags);
  const auto dataset = resolve_dataset(config);
  auto train = config.train;
  train.seed = config.seed;
  const auto topology = synthetic_topology(dataset.num_concepts(), config.planted.n_layers, config.planted.d_model,
                                           config.planted.mlp_width, config.synthetic.vocab_size);
  const auto result = train_toy_model(dataset, topology, train);
  const nlohmann::json summary = {{"train_accuracy", result.train_accuracy},
                                  {"final_loss", result.final_loss},
                                  {"steps", train.steps},
                                  {"seed", train.seed},
                                  {"loss_history", result.loss_history}};
  const Artifacts artifacts = {{"model.ckpt", encode_checkpoint(result.model)}, {"train.json", summary.dump(2) + "\n"}};
  finish("train-toy", config, artifacts, started);
  std::cout << "train accuracy " << format_double(result.train_accuracy) << " final loss "
            << format_double(result.final_loss) << "\nwrote " << (fs::path(config.out) / "model.ckpt").string() << "\n";
  return 0;
}

int make_dataset(const Flags& flags) {
  const std::string started = utc_now();
  auto config = resolve_config(flags);
  if (flags.seed) config.synthetic.seed = *flags.seed;
  const auto dataset = generate_synthetic_dataset(config.synthetic);
  const Artifacts artifacts = {{"dataset.json", dataset_to_json(dataset)}};
  finish("make-dataset", config, artifacts, started);
  std::cout << "generated " << dataset.size() << " items over " << dataset.num_concepts() << " concepts\nwrote "
            << (fs::path(config.out) / "dataset.json").string() << "\n";
  return 0;
}

int serve(const Flags& flags) {
  const auto config = resolve_config(flags);
  if (config.model_source().kind == ModelKind::external)
    throw Error(ErrorCode::invalid_argument, "serve-reference-driver needs --model, not --driver-cmd");
  const auto dataset = resolve_dataset(config);
  ReferenceDriver driver(reference_model(config, dataset));
  std::ios::sync_with_stdio(false);
  serve_stream(driver, std::cin, std::cout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept probing, selective-unit and intervention experiments on reference transformers"};
  app.require_subcommand(1);
  Flags flags;

  const std::vector<std::pair<std::string, std::string>> stages = {
      {"capture", "capture final-token residuals and MLP pre-activations"},
      {"probe", "layer-wise LOOCV linear probes"},
      {"select", "rank units by average precision and select per concept"},
      {"overlap", "pairwise Jaccard overlap against random expectation"},
      {"intervene", "quantile boost/suppress interventions"},
      {"geometry", "2-D embedding separation metrics per layer"},
      {"pipeline", "every stage above in one run"}};
  for (const auto& [name, help] : stages) add_common(app.add_subcommand(name, help), flags);

  auto* train = app.add_subcommand("train-toy", "train the reference decoder on the dataset");
  add_common(train, flags);
  train->add_option("--steps", flags.steps, "optimizer steps");
  train->add_option("--lr", flags.lr, "Adam learning rate");
  train->add_option("--batch", flags.batch, "batch size");

  auto* make = app.add_subcommand("make-dataset", "write a synthetic labeled dataset");
  add_common(make, flags);
  make->add_option("--concepts", flags.concepts, "number of concepts");
  make->add_option("--items-per-concept", flags.items_per_concept, "items per concept");
  make->add_option("--seq-len", flags.seq_len, "tokens per item");
  make->add_option("--markers", flags.markers, "concept markers per item");
  make->add_option("--vocab-size", flags.vocab_size, "vocabulary size");

  auto* serve_cmd = app.add_subcommand("serve-reference-driver", "answer driver protocol lines on stdin/stdout");
  add_common(serve_cmd, flags);

  CLI11_PARSE(app, argc, argv);

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "train-toy") return train_toy(flags);
    if (name == "make-dataset") return make_dataset(flags);
    if (name == "serve-reference-driver") return serve(flags);
    return run_stage(name, flags);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
