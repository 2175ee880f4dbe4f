#pragma once

#include "conceptlens/core.hpp"
#include "conceptlens/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace clens {

struct EmbeddedLayer {
  int layer = 0;
  Eigen::MatrixXd points;  // N x 2
  std::string embedder;    // "pca" or "external"
};

/// Mean-centered projection onto the top two principal axes. Each axis is
/// signed so its largest-magnitude loading is positive. Throws `degenerate`
/// when the centered features have rank below 2.
EmbeddedLayer embed_pca(const Eigen::MatrixXd& features, int layer = 0);

namespace detail {

inline std::map<ConceptId, std::vector<Eigen::Index>> group_rows(std::span<const ConceptId> labels, Eigen::Index rows) {
  if (static_cast<Eigen::Index>(labels.size()) != rows)
    throw Error(ErrorCode::length_mismatch, "points and labels differ in count");
  std::map<ConceptId, std::vector<Eigen::Index>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(static_cast<Eigen::Index>(i));
  return groups;
}

template <typename Derived>
double mean_distance(const Eigen::MatrixBase<Derived>& points, Eigen::Index i, const std::vector<Eigen::Index>& group) {
  double sum = 0.0;
  std::size_t n = 0;
  for (Eigen::Index j : group) {
    if (j == i) continue;
    sum += (points.row(i) - points.row(j)).norm();
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

}  // namespace detail

struct SilhouetteResult {
  double score = 0.0;
  Eigen::VectorXd per_point;
};

/// s(i) = (b - a) / max(a, b) with a(i) the mean distance to the rest of its
/// group and b(i) the smallest mean distance to another group. Members of
/// singleton groups, and points with a = b = 0, get s(i) = 0.
template <typename Derived>
SilhouetteResult silhouette(const Eigen::MatrixBase<Derived>& points, std::span<const ConceptId> labels) {
  const auto groups = detail::group_rows(labels, points.rows());
  if (groups.size() < 2) throw Error(ErrorCode::invalid_argument, "silhouette needs at least two label groups");
  SilhouetteResult out;
  out.per_point = Eigen::VectorXd::Zero(points.rows());
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const auto& own = groups.at(labels[static_cast<std::size_t>(i)]);
    if (own.size() < 2) continue;
    const double a = detail::mean_distance(points, i, own);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, members] : groups)
      if (label != labels[static_cast<std::size_t>(i)]) b = std::min(b, detail::mean_distance(points, i, members));
    const double denom = std::max(a, b);
    out.per_point[i] = denom > 0.0 ? (b - a) / denom : 0.0;
  }
  out.score = out.per_point.mean();
  return out;
}

struct IntraClusterResult {
  double distance = 0.0;
  std::vector<ConceptId> singleton_groups;  // contributed 0
};

/// Mean over label groups of the mean pairwise Euclidean distance inside each
/// group.
template <typename Derived>
IntraClusterResult intra_cluster_distance(const Eigen::MatrixBase<Derived>& points, std::span<const ConceptId> labels) {
  const auto groups = detail::group_rows(labels, points.rows());
  IntraClusterResult out;
  if (groups.empty()) return out;
  double total = 0.0;
  for (const auto& [label, members] : groups) {
    if (members.size() < 2) {
      out.singleton_groups.push_back(label);
      continue;
    }
    double sum = 0.0;
    for (std::size_t x = 0; x < members.size(); ++x)
      for (std::size_t y = x + 1; y < members.size(); ++y) sum += (points.row(members[x]) - points.row(members[y])).norm();
    total += sum / (0.5 * static_cast<double>(members.size()) * static_cast<double>(members.size() - 1));
  }
  out.distance = total / static_cast<double>(groups.size());
  return out;
}

struct SeparationMetrics {
  int layer = 0;
  double silhouette = 0.0;
  double intra_cluster = 0.0;
  std::vector<ConceptId> singleton_groups;
  std::string embedder;
};

SeparationMetrics separation_metrics(const EmbeddedLayer& embedded, std::span<const ConceptId> labels);

/// Maps one layer's N x d residual features to a 2-D embedding.
using Embedder = std::function<EmbeddedLayer(const Eigen::MatrixXd& features, int layer)>;

Embedder pca_embedder();

/// Reads `<directory>/layer_<l>.csv` (item_id,x,y) for each layer, matching
/// rows to dataset items by id.
Embedder external_embedder(std::string directory, const LabeledDataset& dataset);

std::vector<SeparationMetrics> metrics_curve(const std::vector<ActivationRecord>& records, const LabeledDataset& dataset,
                                             const Embedder& embedder = pca_embedder());

std::string embedding_csv(const EmbeddedLayer& embedded, const LabeledDataset& dataset);
EmbeddedLayer parse_embedding_csv(const std::string& text, const LabeledDataset& dataset, int layer);
std::string metrics_csv(const std::vector<SeparationMetrics>& metrics);

}  // namespace clens
