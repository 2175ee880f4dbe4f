#include "conceptlens/geometry.hpp"

#include "conceptlens/fileio.hpp"
#include "conceptlens/text_format.hpp"

#include <Eigen/SVD>

#include <unordered_map>

namespace clens {

EmbeddedLayer embed_pca(const Eigen::MatrixXd& features, int layer) {
  if (features.rows() < 3) throw Error(ErrorCode::invalid_argument, "PCA embedding needs at least 3 points");
  if (features.cols() < 2) throw Error(ErrorCode::invalid_argument, "PCA embedding needs at least 2 features");
  if (!features.allFinite()) throw Error(ErrorCode::non_finite, "PCA features are not finite");
  const Eigen::MatrixXd centered = features.rowwise() - features.colwise().mean();
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const auto& sigma = svd.singularValues();
  if (sigma.size() < 2 || !(sigma[0] > 0.0) || sigma[1] <= 1e-10 * sigma[0])
    throw Error(ErrorCode::degenerate, "layer " + std::to_string(layer) +
                                           ": centered features have rank below 2, second axis is degenerate");
  Eigen::MatrixXd axes = svd.matrixV().leftCols(2);
  for (Eigen::Index a = 0; a < 2; ++a) {
    Eigen::Index peak = 0;
    for (Eigen::Index i = 1; i < axes.rows(); ++i)
      if (std::abs(axes(i, a)) > std::abs(axes(peak, a))) peak = i;
    if (axes(peak, a) < 0.0) axes.col(a) *= -1.0;
  }
  return {layer, centered * axes, "pca"};
}

SeparationMetrics separation_metrics(const EmbeddedLayer& embedded, std::span<const ConceptId> labels) {
  if (!embedded.points.allFinite()) throw Error(ErrorCode::non_finite, "embedding coordinates are not finite");
  SeparationMetrics m;
  m.layer = embedded.layer;
  m.embedder = embedded.embedder;
  m.silhouette = silhouette(embedded.points, labels).score;
  auto d = intra_cluster_distance(embedded.points, labels);
  m.intra_cluster = d.distance;
  m.singleton_groups = std::move(d.singleton_groups);
  return m;
}

Embedder pca_embedder() {
  return [](const Eigen::MatrixXd& features, int layer) { return embed_pca(features, layer); };
}

Embedder external_embedder(std::string directory, const LabeledDataset& dataset) {
  return [directory = std::move(directory), &dataset](const Eigen::MatrixXd&, int layer) {
    const auto path = std::filesystem::path(directory) / ("layer_" + std::to_string(layer) + ".csv");
    return parse_embedding_csv(read_file(path), dataset, layer);
  };
}

std::vector<SeparationMetrics> metrics_curve(const std::vector<ActivationRecord>& records, const LabeledDataset& dataset,
                                             const Embedder& embedder) {
  if (records.size() != dataset.size()) throw Error(ErrorCode::length_mismatch, "records and dataset differ in size");
  if (records.empty()) throw Error(ErrorCode::empty_dataset, "no activation records");
  std::vector<SeparationMetrics> out;
  const int n_layers = static_cast<int>(records.front().residual.size());
  for (int l = 0; l < n_layers; ++l) {
    const auto embedded = embedder(residual_matrix(records, l), l);
    if (embedded.points.rows() != static_cast<Eigen::Index>(dataset.size()) || embedded.points.cols() != 2)
      throw Error(ErrorCode::length_mismatch, "embedding for layer " + std::to_string(l) + " is not N x 2");
    out.push_back(separation_metrics(embedded, dataset.item_labels));
  }
  return out;
}

std::string embedding_csv(const EmbeddedLayer& embedded, const LabeledDataset& dataset) {
  std::string out = "item_id,x,y\n";
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out += csv_field(dataset.items[i].id) + "," + format_double(embedded.points(r, 0)) + "," +
           format_double(embedded.points(r, 1)) + "\n";
  }
  return out;
}

EmbeddedLayer parse_embedding_csv(const std::string& text, const LabeledDataset& dataset, int layer) {
  const auto rows = parse_csv_rows(text);
  if (rows.empty() || rows.front() != std::vector<std::string>{"item_id", "x", "y"})
    throw Error(ErrorCode::parse, "embedding CSV must start with the header item_id,x,y");
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < dataset.size(); ++i) index.emplace(dataset.items[i].id, i);
  EmbeddedLayer out{layer, Eigen::MatrixXd(static_cast<Eigen::Index>(dataset.size()), 2), "external"};
  std::vector<char> seen(dataset.size(), 0);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != 3) throw Error(ErrorCode::parse, "embedding CSV row " + std::to_string(r) + " needs 3 fields");
    const auto it = index.find(row[0]);
    if (it == index.end()) throw Error(ErrorCode::parse, "embedding CSV names unknown item '" + row[0] + "'");
    if (seen[it->second]) throw Error(ErrorCode::duplicate_id, "embedding CSV repeats item '" + row[0] + "'");
    seen[it->second] = 1;
    const auto i = static_cast<Eigen::Index>(it->second);
    out.points(i, 0) = parse_double(row[1], "embedding x of " + row[0]);
    out.points(i, 1) = parse_double(row[2], "embedding y of " + row[0]);
  }
  for (std::size_t i = 0; i < dataset.size(); ++i)
    if (!seen[i]) throw Error(ErrorCode::length_mismatch, "embedding CSV lacks item '" + dataset.items[i].id + "'");
  return out;
}

std::string metrics_csv(const std::vector<SeparationMetrics>& metrics) {
  std::string out = "layer,S,D\n";
  for (const auto& m : metrics)
    out += std::to_string(m.layer) + "," + format_double(m.silhouette) + "," + format_double(m.intra_cluster) + "\n";
  return out;
}

}  // namespace clens
