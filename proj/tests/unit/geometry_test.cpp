#include "conceptlens/error.hpp"
#include "conceptlens/fileio.hpp"
#include "conceptlens/geometry.hpp"

#include "reference_fixtures.hpp"
#include "test_util.hpp"

#include <Eigen/Eigenvalues>
#include <doctest.h>

#include <cmath>
#include <random>

using namespace clens;
using clens::testing::planted;

namespace {

double dist(const std::vector<double>& x, const std::vector<double>& y, std::size_t i, std::size_t j) {
  return std::hypot(x[i] - x[j], y[i] - y[j]);
}

// Plain-loop silhouette over coordinate vectors.
double silhouette_oracle(const std::vector<double>& x, const std::vector<double>& y, const std::vector<int>& labels) {
  const std::size_t n = x.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::map<int, std::pair<double, int>> by_label;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      auto& acc = by_label[labels[j]];
      acc.first += dist(x, y, i, j);
      acc.second += 1;
    }
    if (by_label.count(labels[i]) == 0) continue;  // singleton
    const double a = by_label[labels[i]].first / by_label[labels[i]].second;
    double b = 1e300;
    for (const auto& [label, acc] : by_label)
      if (label != labels[i]) b = std::min(b, acc.first / acc.second);
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

double intra_oracle(const std::vector<double>& x, const std::vector<double>& y, const std::vector<int>& labels) {
  std::map<int, std::pair<double, int>> pairs;
  std::map<int, int> sizes;
  for (int l : labels) ++sizes[l];
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j)
      if (labels[i] == labels[j]) {
        pairs[labels[i]].first += dist(x, y, i, j);
        pairs[labels[i]].second += 1;
      }
  double total = 0.0;
  for (const auto& [label, acc] : pairs) total += acc.first / acc.second;
  return total / static_cast<double>(sizes.size());
}

Eigen::MatrixXd to_points(const std::vector<double>& x, const std::vector<double>& y) {
  Eigen::MatrixXd p(static_cast<Eigen::Index>(x.size()), 2);
  for (std::size_t i = 0; i < x.size(); ++i) p.row(static_cast<Eigen::Index>(i)) << x[i], y[i];
  return p;
}

}  // namespace

TEST_CASE("silhouette and intra-cluster distance match brute force") {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> x(20), y(20);
    std::vector<int> labels(20);
    const int k = 2 + trial % 4;
    for (int i = 0; i < 20; ++i) {
      labels[static_cast<std::size_t>(i)] = i < k ? i : static_cast<int>(rng() % static_cast<std::uint64_t>(k));
      x[static_cast<std::size_t>(i)] = normal(rng) + 2.0 * labels[static_cast<std::size_t>(i)];
      y[static_cast<std::size_t>(i)] = normal(rng);
    }
    if (trial % 7 == 0) labels[19] = 9;  // singleton group
    const auto points = to_points(x, y);
    const auto s = silhouette(points, labels);
    CHECK(std::abs(s.score - silhouette_oracle(x, y, labels)) <= 1e-9);
    CHECK(std::abs(intra_cluster_distance(points, labels).distance - intra_oracle(x, y, labels)) <= 1e-9);
    CHECK((s.per_point.array().abs() <= 1.0).all());
  }
}

TEST_CASE("silhouette worked example") {
  Eigen::MatrixXd points(4, 2);
  points << 0, 0, 0, 1, 10, 0, 10, 1;
  const std::vector<ConceptId> labels{0, 0, 1, 1};
  const double b = (10.0 + std::sqrt(101.0)) / 2.0;
  const auto s = silhouette(points, labels);
  CHECK(s.score == doctest::Approx((b - 1.0) / b).epsilon(1e-14));
  CHECK(std::abs(s.score - 0.900) <= 0.001);
}

TEST_CASE("coincident clusters do not separate") {
  Eigen::MatrixXd points(4, 2);
  points << 0, 0, 1, 1, 0, 0, 1, 1;
  const std::vector<ConceptId> labels{0, 0, 1, 1};
  CHECK(silhouette(points, labels).score <= 0.0);
  Eigen::MatrixXd same = Eigen::MatrixXd::Zero(4, 2);
  CHECK(silhouette(same, labels).score == 0.0);
}

TEST_CASE("singletons score zero and a single group is rejected") {
  Eigen::MatrixXd points(3, 2);
  points << 0, 0, 0, 1, 5, 5;
  const std::vector<ConceptId> labels{0, 0, 1};
  CHECK(silhouette(points, labels).per_point[2] == 0.0);
  const auto d = intra_cluster_distance(points, labels);
  CHECK(d.singleton_groups == std::vector<ConceptId>{1});
  CHECK(d.distance == doctest::Approx(0.5));
  const std::vector<ConceptId> one{0, 0, 0};
  CHECK_THROWS_AS(silhouette(points, one), Error);
}

TEST_CASE("intra-cluster distance examples and homogeneity") {
  Eigen::MatrixXd points(4, 2);
  points << 0, 0, 3, 4, 0, 0, 0, 2;
  const std::vector<ConceptId> labels{0, 0, 1, 1};
  CHECK(intra_cluster_distance(points, labels).distance == doctest::Approx(3.5).epsilon(1e-15));
  CHECK(intra_cluster_distance(2.0 * points, labels).distance == doctest::Approx(7.0).epsilon(1e-15));
  Eigen::MatrixXd stacked(4, 2);
  stacked << 1, 1, 1, 1, 4, 2, 4, 2;
  CHECK(intra_cluster_distance(stacked, labels).distance == 0.0);
}

TEST_CASE("metrics are invariant under rigid motions") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd points = Eigen::MatrixXd::NullaryExpr(20, 2, [&] { return normal(rng); });
  std::vector<ConceptId> labels;
  for (int i = 0; i < 20; ++i) labels.push_back(i % 3);
  const double t = 0.7;
  Eigen::Matrix2d rot;
  rot << std::cos(t), -std::sin(t), std::sin(t), std::cos(t);
  const Eigen::MatrixXd moved = (points * rot.transpose()).rowwise() + Eigen::RowVector2d(3.0, -8.0);
  CHECK(silhouette(moved, labels).score == doctest::Approx(silhouette(points, labels).score).epsilon(1e-12));
  CHECK(intra_cluster_distance(moved, labels).distance ==
        doctest::Approx(intra_cluster_distance(points, labels).distance).epsilon(1e-12));
}

TEST_CASE("PCA of centered 2-D points is an isometry") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd points = Eigen::MatrixXd::NullaryExpr(15, 2, [&] { return normal(rng); });
  points.col(0) *= 3.0;
  points = points.rowwise() - points.colwise().mean();
  const auto e = embed_pca(points);
  CHECK(e.embedder == "pca");
  for (Eigen::Index i = 0; i < 15; ++i)
    for (Eigen::Index j = 0; j < 15; ++j)
      CHECK(std::abs((e.points.row(i) - e.points.row(j)).norm() - (points.row(i) - points.row(j)).norm()) <= 1e-9);
}

TEST_CASE("PCA matches the covariance eigenvectors with the sign convention") {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd x = Eigen::MatrixXd::NullaryExpr(40, 6, [&] { return normal(rng); });
  x.col(1) *= 4.0;
  x.col(4) *= 2.0;
  const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(centered.transpose() * centered);
  Eigen::MatrixXd axes(6, 2);
  axes.col(0) = eig.eigenvectors().col(5);
  axes.col(1) = eig.eigenvectors().col(4);
  for (int a = 0; a < 2; ++a) {
    Eigen::Index peak;
    axes.col(a).cwiseAbs().maxCoeff(&peak);
    if (axes(peak, a) < 0) axes.col(a) *= -1.0;
  }
  CHECK((embed_pca(x).points - centered * axes).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("PCA rejects rank-deficient input") {
  const Eigen::MatrixXd same = Eigen::MatrixXd::Constant(5, 4, 2.0);
  try {
    embed_pca(same, 3);
    FAIL("expected degenerate");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::degenerate);
    CHECK(std::string(e.what()).find("layer 3") != std::string::npos);
  }
  Eigen::MatrixXd line(5, 3);
  for (int i = 0; i < 5; ++i) line.row(i) << i, 2.0 * i, -i;
  CHECK_THROWS_AS(embed_pca(line), Error);
  CHECK_THROWS_AS(embed_pca(Eigen::MatrixXd::Identity(2, 2)), Error);
}

namespace {

// Blob c centred 10 sigma out along axis c, unit noise.
double blob_silhouette(int k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd x(12 * k, 32);
  std::vector<ConceptId> labels;
  for (int i = 0; i < 12 * k; ++i) {
    labels.push_back(i % k);
    for (int j = 0; j < 32; ++j) x(i, j) = (j == i % k ? 10.0 : 0.0) + normal(rng);
  }
  return silhouette(embed_pca(x).points, labels).score;
}

}  // namespace

TEST_CASE("well separated blobs give a high silhouette after PCA") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) CHECK(blob_silhouette(3, seed) >= 0.8);
  // Five centres span four dimensions, so two axes cannot hold them apart.
  MESSAGE("five-blob silhouette " << blob_silhouette(5, 0));
}

TEST_CASE("planted metrics curve has one row per layer and peaks at or after the concept layer") {
  const auto& p = planted();
  const auto metrics = metrics_curve(p.records, p.dataset);
  REQUIRE(metrics.size() == 4);
  int peak = 0;
  for (int l = 0; l < 4; ++l) {
    CHECK(metrics[static_cast<std::size_t>(l)].layer == l);
    if (metrics[static_cast<std::size_t>(l)].silhouette > metrics[static_cast<std::size_t>(peak)].silhouette) peak = l;
  }
  CHECK(peak >= p.spec.concept_layer());
  CHECK(metrics_csv(metrics).rfind("layer,S,D\n", 0) == 0);
}

TEST_CASE("external embeddings reproduce the internal metrics") {
  const auto& p = planted();
  const auto dir = clens::testing::scratch_dir("embeddings");
  for (int l = 0; l < 4; ++l)
    write_file_atomic(dir / ("layer_" + std::to_string(l) + ".csv"),
                      embedding_csv(embed_pca(residual_matrix(p.records, l), l), p.dataset));
  const auto internal = metrics_curve(p.records, p.dataset);
  const auto external = metrics_curve(p.records, p.dataset, external_embedder(dir.string(), p.dataset));
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK(external[l].embedder == "external");
    CHECK(external[l].silhouette == internal[l].silhouette);
    CHECK(external[l].intra_cluster == internal[l].intra_cluster);
  }
  CHECK_THROWS_AS(parse_embedding_csv("item_id,x,y\nsyn-000,1,2\n", p.dataset, 0), Error);
  CHECK_THROWS_AS(parse_embedding_csv("id,x,y\n", p.dataset, 0), Error);
}
